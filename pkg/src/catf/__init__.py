"""Context-aware transformer for multi-modal trajectory prediction.

Subpackages:
    tensor    -- minimal numpy-backed tensors with reverse-mode differentiation
    geometry  -- agent states, actor-centered frames, grid-cell feasibility test
    scene     -- synthetic scene generation, BEV rasterization, dataset format
    model     -- context encoder + transformer encoder-decoder with K-mode heads
    losses    -- mixture NLL, off-road penalty, multitask combination
    metrics   -- minADE/minFDE/off-road rate evaluation
    training  -- Adam, warm-up schedule, train loop, constant-velocity baseline
    bench     -- attention time/memory scaling benchmark
    cli       -- command-line entry point
"""

__version__ = "0.1.0"

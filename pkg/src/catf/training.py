"""Optimization loop: Adam with warm-up, ablation switches, baselines.

Training is single-writer and fully deterministic for a fixed seed: data
split, shuffling, dropout, and parameter init all derive from it.  The
best-validation checkpoint (minADE_3) is retained, with early stopping.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tz
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import Trajectory, world_to_actor
from .losses import (MultitaskWeights, multitask_loss, nll_mixture_loss_batch,
                     offroad_loss, straight_through_offroad_gradient)
from .metrics import EvalRecord, evaluate_dataset
from .model import CATFModel, ModelConfig, PredictionSet
from .scene import DrivableGrid, RasterConfig, RasterImage, Scene, build_drivable_grid, rasterize
from .tensor import Tensor


# -- config and logs ----------------------------------------------------------


@dataclass
class TrainConfig:
    preset: str = "desk"
    batch_size: int = 8
    epochs: int = 30
    base_lr: float = 1e-3
    warmup_epochs: int = 5
    seed: int = 0
    use_context: bool = True
    use_offroad_loss: bool = True
    attention: str = "full"             # full | linear | linear_shared
    patience: int = 5
    val_eval_scenes: int = 64           # rollout-metric cap per validation pass
    grid_cell_size: float = 0.5
    normalize_offroad: bool = False
    # exp(clamped off-road count) spans ~13 orders of magnitude; starting the
    # learned task weight sigma2^2 near that scale keeps the early gradient
    # balance sane, after which the uncertainty weighting self-adjusts.
    init_log_sigma2: float = 15.0
    # fraction of teacher-forced decoder inputs replaced by the last observed
    # position; without it the ground-truth prefix leaks the road geometry
    # and the model never learns to consult the raster context
    input_dropout: float = 0.3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warm-up epochs must be smaller than total epochs")


@dataclass
class RunLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, **kwargs):
        if self.entries and kwargs.get("epoch", 0) < self.entries[-1].get("epoch", 0):
            raise ValueError("RunLog: epoch indices must be monotone")
        self.entries.append(kwargs)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e) + "\n")


# -- schedule and optimizer ---------------------------------------------------


def lr_schedule(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear ramp to base_lr over the warm-up epochs, then 1/sqrt decay.

    Continuous at the junction: the decay is base_lr * sqrt(s_w / s).
    """
    if step < 0:
        raise ValueError("lr_schedule: step must be >= 0")
    warmup_steps = max(1, config.warmup_epochs * steps_per_epoch)
    if step < warmup_steps:
        return config.base_lr * step / warmup_steps
    return config.base_lr * math.sqrt(warmup_steps / step)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> bool:
    """One Adam update in place; returns False (step skipped) on NaN gradients."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


# -- data preparation ---------------------------------------------------------


@dataclass
class Sample:
    scene_id: str
    agent_id: str
    target_hist: np.ndarray         # (m, 2) actor frame
    av_hist: np.ndarray             # (m, 2) actor frame
    truth: np.ndarray               # (H, 2) actor frame
    raster: RasterImage
    grid: DrivableGrid


def prepare_sample(scene: Scene, agent_id: str, model_cfg: ModelConfig,
                   grid_cell_size: float = 0.5) -> Sample:
    ref = scene.ref_pose(agent_id)
    m, horizon = model_cfg.m, model_cfg.H
    raster_cfg = RasterConfig(size_px=model_cfg.raster_px,
                              resolution=model_cfg.raster_resolution)

    def local(aid: str) -> np.ndarray:
        traj = scene.agent(aid)
        pts = world_to_actor(traj.positions(), ref)
        t0 = traj.states[0].t
        return pts, t0

    tgt, t0 = local(agent_id)
    av, a0 = local(scene.av_id)
    r = scene.ref_time
    return Sample(
        scene_id=scene.scene_id,
        agent_id=agent_id,
        target_hist=tgt[r - t0 - m + 1: r - t0 + 1],
        av_hist=av[r - a0 - m + 1: r - a0 + 1],
        truth=tgt[r - t0 + 1: r - t0 + 1 + horizon],
        raster=rasterize(scene, agent_id, raster_cfg),
        grid=build_drivable_grid(scene, agent_id, grid_cell_size, raster_cfg.extent()),
    )


def prepare_samples(scenes: list[Scene], model_cfg: ModelConfig,
                    grid_cell_size: float = 0.5) -> list[Sample]:
    """One sample per scene: the first non-AV agent is the prediction target."""
    return [prepare_sample(s, s.target_ids()[0], model_cfg, grid_cell_size)
            for s in scenes]


def split_samples(samples: list[Sample], seed: int) -> tuple[list, list, list]:
    """Deterministic 70/15/15 split by scene."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    n_train = int(round(n * 0.70))
    n_val = int(round(n * 0.15))
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


# -- baselines ----------------------------------------------------------------


def constant_velocity_baseline(history, horizon: int) -> PredictionSet:
    """Extrapolate the last observed displacement for `horizon` steps (K=1)."""
    if isinstance(history, Trajectory):
        pts = history.positions()
    else:
        pts = np.asarray(history, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("constant_velocity_baseline: need at least 2 history states")
    step = pts[-1] - pts[-2]
    future = pts[-1] + step * np.arange(1, horizon + 1)[:, None]
    return PredictionSet(trajectories=future[None], credibility=np.array([1.0]))


# -- evaluation helpers -------------------------------------------------------


def predict_records(model: CATFModel, samples: list[Sample]) -> list[EvalRecord]:
    records = []
    for s in samples:
        pred = model.predict(s.raster if model.config.use_context else None,
                             s.target_hist, s.av_hist)
        records.append(EvalRecord(s.scene_id, s.agent_id, s.truth, pred, s.grid))
    return records


def baseline_records(samples: list[Sample], horizon: int) -> list[EvalRecord]:
    return [EvalRecord(s.scene_id, s.agent_id, s.truth,
                       constant_velocity_baseline(s.target_hist, horizon), s.grid)
            for s in samples]


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    model: CATFModel
    weights: MultitaskWeights
    runlog: RunLog
    best_val_ade3: float
    val_samples: list[Sample]
    test_samples: list[Sample]


def _batch_loss(model: CATFModel, weights: MultitaskWeights, batch: list[Sample],
                cfg: TrainConfig, rng) -> tuple[Tensor, int]:
    """Mean objective over one mini-batch as a single tape scalar."""
    rasters = [s.raster for s in batch] if cfg.use_context else None
    t_hists = np.stack([s.target_hist for s in batch])
    av_hists = np.stack([s.av_hist for s in batch])
    truths = np.stack([s.truth for s in batch])
    input_mask = None
    if cfg.input_dropout > 0:
        input_mask = rng.random((len(batch), truths.shape[1])) < cfg.input_dropout
    positions, cred = model.forward_teacher_batch(rasters, t_hists, av_hists, truths,
                                                  training=True, rng=rng,
                                                  input_mask=input_mask)
    l_c = nll_mixture_loss_batch(truths, positions, cred)
    if not cfg.use_offroad_loss:
        inv1 = (weights.log_sigma1 * (-2.0)).exp()
        reg = (weights.log_sigma1.exp() + 1.0).log()
        return l_c * inv1 + reg, 0
    total_count = 0
    penalties = []
    surrogate = np.zeros_like(positions.data)
    for i, s in enumerate(batch):
        count, l_o = offroad_loss(positions.data[i], s.grid, cfg.normalize_offroad)
        total_count += count
        penalties.append(l_o)
        if count > 0:
            surrogate[i] = straight_through_offroad_gradient(
                positions.data[i], s.grid, cfg.normalize_offroad)
    loss = multitask_loss(l_c, float(np.mean(penalties)), weights)
    if total_count > 0:
        # routes the surrogate off-road gradient into the waypoint tensor
        scale = float(np.exp(-2.0 * weights.log_sigma2.data)) / len(batch)
        loss = loss + (positions * Tensor(surrogate * scale)).sum() \
            - float((positions.data * surrogate * scale).sum())
    return loss, total_count


def train(samples: list[Sample], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Train on a prepared sample list; returns the best-validation model.

    Ablation switches: use_context replaces the context token with zeros,
    use_offroad_loss drops the off-road term from the objective, attention
    selects full / linear / shared-projection linear kernels.
    """
    if not samples:
        raise ValueError("train: empty dataset")
    model_cfg = replace(model_cfg, use_context=cfg.use_context, attention=cfg.attention)
    model = CATFModel(model_cfg, seed=cfg.seed)
    weights = MultitaskWeights.fresh(log_sigma2=cfg.init_log_sigma2)
    train_set, val_set, test_set = split_samples(samples, cfg.seed)
    if not train_set or not val_set:
        raise ValueError(f"train: dataset of {len(samples)} scenes too small to split")

    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState()
    runlog = RunLog()
    steps_per_epoch = max(1, len(train_set) // cfg.batch_size)
    step = 0
    best_ade3 = float("inf")
    best_state = {k: t.data.copy() for k, t in model.params.items()}
    bad_epochs = 0
    val_probe = val_set[:cfg.val_eval_scenes]

    opt_params = dict(model.params)
    opt_params["loss.log_sigma1"] = weights.log_sigma1
    opt_params["loss.log_sigma2"] = weights.log_sigma2

    for epoch in range(cfg.epochs):
        t_start = time.time()
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        diverged = False
        for b0 in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            batch = [train_set[i] for i in order[b0:b0 + cfg.batch_size]]
            model.zero_grad()
            weights.log_sigma1.zero_grad()
            weights.log_sigma2.zero_grad()
            total, _ = _batch_loss(model, weights, batch, cfg, rng)
            if not np.isfinite(total.data).all():
                diverged = True
                break
            total.backward()
            step += 1
            lr = lr_schedule(step, steps_per_epoch, cfg)
            grads = {name: t.grad for name, t in opt_params.items()}
            adam_step(opt_params, grads, state, lr)
            epoch_loss += float(total.data)
            n_batches += 1
        if diverged:
            runlog.append(epoch=epoch, step=step, event="diverged")
            break

        val_loss = _validation_loss(model, weights, val_set, cfg)
        table = evaluate_dataset(predict_records(model, val_probe))
        runlog.append(epoch=epoch, step=step, lr=lr_schedule(step, steps_per_epoch, cfg),
                      train_loss=epoch_loss / max(1, n_batches), val_loss=val_loss,
                      minADE_1=table.min_ade[1], minADE_3=table.min_ade[3],
                      offroad_rate=table.offroad_rate_3,
                      wall_time=time.time() - t_start)
        if table.min_ade[3] < best_ade3:
            best_ade3 = table.min_ade[3]
            best_state = {k: t.data.copy() for k, t in opt_params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break

    model.load_state({k: v for k, v in best_state.items() if not k.startswith("loss.")})
    if "loss.log_sigma1" in best_state:
        weights = MultitaskWeights(Tensor(best_state["loss.log_sigma1"], requires_grad=True),
                                   Tensor(best_state["loss.log_sigma2"], requires_grad=True))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        params = dict(model.params)
        params["loss.log_sigma1"] = weights.log_sigma1
        params["loss.log_sigma2"] = weights.log_sigma2
        save_checkpoint(params, out_dir / "model.ckpt")
        (out_dir / "model.cfg").write_text(model_cfg.to_text(), encoding="utf-8")
        runlog.save(out_dir / "runlog.jsonl")
    return TrainResult(model=model, weights=weights, runlog=runlog,
                       best_val_ade3=best_ade3, val_samples=val_set, test_samples=test_set)


def _validation_loss(model: CATFModel, weights: MultitaskWeights,
                     val_set: list[Sample], cfg: TrainConfig) -> float:
    total = 0.0
    with tz.no_grad():
        for b0 in range(0, len(val_set), cfg.batch_size):
            batch = val_set[b0:b0 + cfg.batch_size]
            rasters = [s.raster for s in batch] if cfg.use_context else None
            t_hists = np.stack([s.target_hist for s in batch])
            av_hists = np.stack([s.av_hist for s in batch])
            truths = np.stack([s.truth for s in batch])
            positions, cred = model.forward_teacher_batch(rasters, t_hists, av_hists,
                                                          truths, training=False)
            total += float(nll_mixture_loss_batch(truths, positions, cred).data) * len(batch)
    return total / max(1, len(val_set))


def load_model(ckpt_path, cfg_path) -> tuple[CATFModel, MultitaskWeights]:
    """Rebuild a model (and multitask weights) from checkpoint + config text."""
    model_cfg = ModelConfig.from_text(Path(cfg_path).read_text(encoding="utf-8"))
    state = load_checkpoint(ckpt_path)
    model = CATFModel(model_cfg, seed=0)
    ls1 = state.pop("loss.log_sigma1", np.array(0.0))
    ls2 = state.pop("loss.log_sigma2", np.array(0.0))
    model.load_state(state)
    weights = MultitaskWeights(Tensor(ls1, requires_grad=True),
                               Tensor(ls2, requires_grad=True))
    return model, weights

"""Context-conditioned transformer encoder-decoder with K-mode output heads.

The encoder consumes the embedded target/AV history plus a context token
derived from the BEV raster by a small conv net.  The decoder produces
per-step displacement offsets for K hypotheses under a causal mask;
predicted positions are cumulative sums of those offsets from the last
observed position.  Attention comes in two flavors: full scaled
dot-product (quadratic in sequence length) and a linearly-projected
variant that compresses keys/values from length n to length p.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .scene import RasterImage
from .tensor import Tensor, softmax_rows, layer_norm, conv2d_s2, global_avg_pool, dropout


# -- configuration ------------------------------------------------------------


@dataclass
class ModelConfig:
    D: int = 64                 # embedding dim
    L: int = 2                  # encoder/decoder layers
    h: int = 4                  # attention heads
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 128
    p: int = 16                 # projected length for linear attention (0 = full only)
    shared_projection: bool = False
    attention: str = "full"     # full | linear | linear_shared
    K: int = 3                  # prediction modes
    m: int = 10                 # history steps
    H: int = 50                 # horizon steps
    dropout: float = 0.1
    use_context: bool = True
    raster_px: int = 64
    raster_resolution: float = 1.5      # 96 m window covers the full horizon
    conv_channels: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.D != self.h * self.d_k:
            raise ValueError(f"ModelConfig: D ({self.D}) must equal h*d_k ({self.h * self.d_k})")
        if self.p < 0 or self.K < 1:
            raise ValueError("ModelConfig: p must be >= 0 and K >= 1")
        if self.attention not in ("full", "linear", "linear_shared"):
            raise ValueError(f"ModelConfig: unknown attention kind {self.attention!r}")

    @property
    def enc_len(self) -> int:
        return self.m + 1  # history tokens plus one context token

    @staticmethod
    def desk(**overrides) -> "ModelConfig":
        return replace(ModelConfig(), **overrides)

    @staticmethod
    def paper(**overrides) -> "ModelConfig":
        base = ModelConfig(D=512, L=6, h=8, d_k=64, d_v=64, d_ff=2048, p=64,
                           raster_px=224, raster_resolution=0.25,
                           conv_channels=(16, 32, 64))
        return replace(base, **overrides)

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in sorted(vars(self))]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        fields = {}
        for line in text.splitlines():
            if "=" not in line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key in ("shared_projection", "use_context"):
                fields[key] = val == "True"
            elif key == "attention":
                fields[key] = val
            elif key == "conv_channels":
                fields[key] = tuple(int(v) for v in val.strip("()").split(",") if v.strip())
            elif key in ("dropout", "raster_resolution"):
                fields[key] = float(val)
            else:
                fields[key] = int(val)
        return ModelConfig(**fields)


@dataclass
class PredictionSet:
    """K hypothesis trajectories plus a normalized credibility vector."""

    trajectories: np.ndarray    # (K, H, 2), actor-frame meters
    credibility: np.ndarray     # (K,), non-negative, sums to 1

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        self.credibility = np.asarray(self.credibility, dtype=np.float64)
        if self.trajectories.ndim != 3 or self.trajectories.shape[2] != 2:
            raise ValueError(f"PredictionSet: trajectories must be (K,H,2), "
                             f"got {self.trajectories.shape}")
        if self.credibility.shape != (self.trajectories.shape[0],):
            raise ValueError("PredictionSet: credibility length must equal mode count")
        if (self.credibility < -1e-12).any() or abs(self.credibility.sum() - 1.0) > 1e-6:
            raise ValueError("PredictionSet: credibility must be non-negative and sum to 1")


@dataclass
class PositionalEncoding:
    table: np.ndarray           # (T_max, D) in [-1, 1]


def positional_encoding(t_max: int, d_model: int) -> PositionalEncoding:
    """Sinusoidal table: sin(t / 10000^(d/D)) on even columns, cos on odd.

    Note the exponent is d/D for every column, so sin/cos pairs run at
    slightly different frequencies.
    """
    if t_max < 1 or d_model < 1:
        raise ValueError("positional_encoding: t_max and D must be >= 1")
    t = np.arange(t_max, dtype=np.float64)[:, None]
    d = np.arange(d_model, dtype=np.float64)[None, :]
    angles = t / np.power(10000.0, d / d_model)
    table = np.where(np.arange(d_model) % 2 == 0, np.sin(angles), np.cos(angles))
    return PositionalEncoding(table=table)


# -- attention instrumentation ------------------------------------------------


class AttentionMeter:
    """Tracks the peak per-head attention weight-buffer size (bytes)."""

    def __init__(self):
        self.enabled = False
        self.peak_bytes_per_head = 0

    def reset(self):
        self.peak_bytes_per_head = 0

    def record(self, rows: int, cols: int, itemsize: int):
        if self.enabled:
            self.peak_bytes_per_head = max(self.peak_bytes_per_head, rows * cols * itemsize)


attention_meter = AttentionMeter()


# -- attention kernels --------------------------------------------------------


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V, optionally with a boolean block mask.

    Masked (True) positions receive a -1e9 bias.  A fully masked row is a
    construction error and is rejected.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: {k.shape[-2]} keys vs {v.shape[-2]} values")
    d_k = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[-2], k.shape[-2]):
            raise ValueError(f"attention: mask shape {mask.shape} does not match "
                             f"({q.shape[-2]}, {k.shape[-2]})")
        if mask.all(axis=-1).any():
            raise ValueError("attention: fully masked row")
        scores = scores + np.where(mask, -1e9, 0.0)
    weights = softmax_rows(scores)
    attention_meter.record(weights.shape[-2], weights.shape[-1], weights.data.itemsize)
    return weights @ v


def _split_heads(x: Tensor, w: Tensor) -> Tensor:
    """(..., n, D) x with (h, D, d) weights -> (..., h, n, d) projections."""
    h, d_model, d = w.shape
    w2 = w.transpose(1, 0, 2).reshape(d_model, h * d)
    y = (x @ w2).reshape(x.shape[:-1] + (h, d))
    return y.swapaxes(-2, -3)


def _merge_heads(heads: Tensor, wo: Tensor) -> Tensor:
    """(..., h, n, d_v) -> concat over heads -> (..., n, D) output projection."""
    h, n, d_v = heads.shape[-3:]
    merged = heads.swapaxes(-3, -2).reshape(heads.shape[:-3] + (n, h * d_v))
    return merged @ wo


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: dict,
                         mask: np.ndarray | None = None) -> Tensor:
    """Concat of h scaled dot-product heads followed by the output projection.

    params: wq/wk (h, D, d_k), wv (h, D, d_v), wo (h*d_v, D).
    """
    wq, wk, wv, wo = params["wq"], params["wk"], params["wv"], params["wo"]
    if wq.shape[0] != wk.shape[0] or wq.shape[0] != wv.shape[0]:
        raise ValueError("multi_head_attention: head counts disagree")
    if wo.shape[0] != wv.shape[0] * wv.shape[2]:
        raise ValueError("multi_head_attention: wo rows must equal h*d_v")
    heads = scaled_dot_product_attention(_split_heads(q, wq), _split_heads(k, wk),
                                         _split_heads(v, wv), mask)
    return _merge_heads(heads, wo)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, params: dict,
                     f_proj: Tensor, g_proj: Tensor) -> Tensor:
    """Low-rank attention: keys/values are compressed from n to p rows.

    Per head: softmax(Q W_q (F^T K W_k)^T / sqrt(d_k)) @ (G^T V W_v); the
    weight buffer is n_q x p, never n_q x n.  F and G have shape (n, p)
    with p <= n.
    """
    n = k.shape[-2]
    if f_proj.shape[0] != n or g_proj.shape[0] != n:
        raise ValueError(f"linear_attention: projection rows {f_proj.shape[0]} "
                         f"must match sequence length {n}")
    p = f_proj.shape[1]
    if p < 1 or p > n:
        raise ValueError(f"linear_attention: projected dim {p} must be in [1, n={n}]")
    wq, wk, wv, wo = params["wq"], params["wk"], params["wv"], params["wo"]
    kp = f_proj.transpose() @ _split_heads(k, wk)     # (h, p, d_k)
    vp = g_proj.transpose() @ _split_heads(v, wv)     # (h, p, d_v)
    heads = scaled_dot_product_attention(_split_heads(q, wq), kp, vp)
    return _merge_heads(heads, wo)


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position i may not attend to j > i."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


# -- the model ----------------------------------------------------------------


class CATFModel:
    """Parameter container plus forward passes (teacher-forced and rollout)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.pos = positional_encoding(max(config.m, config.H) + 2, config.D)
        self._init_params(seed)

    # -- parameters -----------------------------------------------------------

    def _add(self, name: str, array: np.ndarray):
        self.params[name] = Tensor(array, requires_grad=True)

    def _init_params(self, seed: int):
        cfg = self.config
        rng = np.random.default_rng(seed)

        def normal(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        # fan-in-scaled init keeps the raster signal alive through the conv
        # stack; a flat small init attenuates it to noise by the last layer
        c_prev = 3
        for i, c in enumerate(cfg.conv_channels):
            std = math.sqrt(2.0 / (c_prev * 9))
            self._add(f"ctx.conv{i}.w", rng.normal(0.0, std, size=(c, c_prev, 3, 3)))
            self._add(f"ctx.conv{i}.b", np.zeros(c))
            c_prev = c
        self._add("ctx.fc.w", rng.normal(0.0, math.sqrt(1.0 / c_prev), size=(c_prev, cfg.D)))
        self._add("ctx.fc.b", np.zeros(cfg.D))

        self._add("embed.in.w", normal(4, cfg.D))
        self._add("embed.in.b", np.zeros(cfg.D))
        self._add("embed.out.w", normal(2, cfg.D))
        self._add("embed.out.b", np.zeros(cfg.D))

        def attn_block(prefix: str):
            self._add(f"{prefix}.wq", normal(cfg.h, cfg.D, cfg.d_k))
            self._add(f"{prefix}.wk", normal(cfg.h, cfg.D, cfg.d_k))
            self._add(f"{prefix}.wv", normal(cfg.h, cfg.D, cfg.d_v))
            self._add(f"{prefix}.wo", normal(cfg.h * cfg.d_v, cfg.D))

        def ln_block(prefix: str):
            self._add(f"{prefix}.g", np.ones(cfg.D))
            self._add(f"{prefix}.b", np.zeros(cfg.D))

        def ffn_block(prefix: str):
            self._add(f"{prefix}.w1", normal(cfg.D, cfg.d_ff))
            self._add(f"{prefix}.b1", np.zeros(cfg.d_ff))
            self._add(f"{prefix}.w2", normal(cfg.d_ff, cfg.D))
            self._add(f"{prefix}.b2", np.zeros(cfg.D))

        linear_kind = cfg.attention in ("linear", "linear_shared")
        shared = cfg.shared_projection or cfg.attention == "linear_shared"
        if linear_kind and shared:
            self._add("proj.g", normal(cfg.enc_len, cfg.p))
        for side, count in (("enc", cfg.L), ("dec", cfg.L)):
            for layer in range(count):
                base = f"{side}.l{layer}"
                attn_block(f"{base}.self")
                ln_block(f"{base}.ln1")
                if side == "dec":
                    attn_block(f"{base}.cross")
                    ln_block(f"{base}.ln2")
                ffn_block(f"{base}.ffn")
                ln_block(f"{base}.ln3")
                if linear_kind and not shared:
                    target = f"{base}.self" if side == "enc" else f"{base}.cross"
                    self._add(f"{target}.F", normal(cfg.enc_len, cfg.p))
                    self._add(f"{target}.G", normal(cfg.enc_len, cfg.p))

        self._add("head.traj.w", normal(cfg.D, cfg.K * 2))
        self._add("head.traj.b", np.zeros(cfg.K * 2))
        self._add("head.cred.w", normal(cfg.D, cfg.K))
        self._add("head.cred.b", np.zeros(cfg.K))

    def check_finite(self):
        for name, t in self.params.items():
            if not np.isfinite(t.data).all():
                raise ValueError(f"model parameter {name!r} contains non-finite values")

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]):
        for name, arr in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r} in state")
            if self.params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: "
                                 f"{self.params[name].data.shape} vs {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    # -- submodules -----------------------------------------------------------

    def _attn_params(self, prefix: str) -> dict:
        return {k: self.params[f"{prefix}.{k}"] for k in ("wq", "wk", "wv", "wo")}

    def _projections(self, prefix: str) -> tuple[Tensor, Tensor]:
        shared = self.config.shared_projection or self.config.attention == "linear_shared"
        if shared:
            g = self.params["proj.g"]
            return g, g
        return self.params[f"{prefix}.F"], self.params[f"{prefix}.G"]

    def _memory_attention(self, q: Tensor, mem: Tensor, prefix: str) -> Tensor:
        """Attention over encoder memory: linearly projected when configured."""
        if self.config.attention == "full":
            return multi_head_attention(q, mem, mem, self._attn_params(prefix))
        f_proj, g_proj = self._projections(prefix)
        return linear_attention(q, mem, mem, self._attn_params(prefix), f_proj, g_proj)

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        hidden = (x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]).sigmoid()
        return hidden @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _add_norm(self, x: Tensor, sub: Tensor, prefix: str, training, rng) -> Tensor:
        if training and self.config.dropout > 0:
            sub = dropout(sub, self.config.dropout, rng, training=True)
        return layer_norm(x + sub, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def encode_context(self, raster: RasterImage) -> Tensor:
        """Conv stack -> global average pooling -> linear map to D."""
        cfg = self.config
        px = raster.pixels
        if px.shape != (cfg.raster_px, cfg.raster_px, 3):
            raise ValueError(f"encode_context: raster shape {px.shape} does not match config "
                             f"({cfg.raster_px}, {cfg.raster_px}, 3)")
        x = Tensor(np.ascontiguousarray(px.transpose(2, 0, 1)))
        for i in range(len(cfg.conv_channels)):
            x = conv2d_s2(x, self.params[f"ctx.conv{i}.w"], self.params[f"ctx.conv{i}.b"]).relu()
        pooled = global_avg_pool(x).reshape(1, -1)
        return (pooled @ self.params["ctx.fc.w"] + self.params["ctx.fc.b"]).reshape(-1)

    def encode(self, raster: RasterImage | None, target_hist: np.ndarray,
               av_hist: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Embed history + context token and run the encoder stack.

        Token order: [context, hist_0 .. hist_{m-1}]; positional encoding is
        added to history tokens only.
        """
        cfg = self.config
        target_hist = np.asarray(target_hist, dtype=np.float64)
        av_hist = np.asarray(av_hist, dtype=np.float64)
        if target_hist.shape != (cfg.m, 2) or av_hist.shape != (cfg.m, 2):
            raise ValueError(f"encode: history must be ({cfg.m}, 2) for target and AV, "
                             f"got {target_hist.shape} and {av_hist.shape}")
        self.check_finite()
        if cfg.use_context and raster is not None:
            ctx = self.encode_context(raster)
        else:
            ctx = Tensor(np.zeros(cfg.D))
        hist = Tensor(np.concatenate([target_hist, av_hist], axis=1))   # (m, 4)
        tokens = hist @ self.params["embed.in.w"] + self.params["embed.in.b"]
        tokens = tokens + Tensor(self.pos.table[:cfg.m])
        x = tz.concat([ctx.reshape(1, -1), tokens], axis=0)             # (m+1, D)
        return self._encoder_stack(x, training, rng)

    def encode_batch(self, rasters, target_hists, av_hists,
                     training: bool = False, rng=None) -> Tensor:
        """Batched encoder: (B, m, 2) histories (+ B rasters) -> (B, m+1, D)."""
        cfg = self.config
        th = np.asarray(target_hists, dtype=np.float64)
        ah = np.asarray(av_hists, dtype=np.float64)
        if th.ndim != 3 or th.shape[1:] != (cfg.m, 2) or ah.shape != th.shape:
            raise ValueError(f"encode_batch: histories must be (B, {cfg.m}, 2), "
                             f"got {th.shape} and {ah.shape}")
        batch = th.shape[0]
        self.check_finite()
        if cfg.use_context and rasters is not None:
            if len(rasters) != batch:
                raise ValueError(f"encode_batch: {len(rasters)} rasters for {batch} histories")
            ctx = tz.stack([self.encode_context(r) for r in rasters], axis=0)
        else:
            ctx = Tensor(np.zeros((batch, cfg.D)))
        hist = Tensor(np.concatenate([th, ah], axis=2))                 # (B, m, 4)
        tokens = hist @ self.params["embed.in.w"] + self.params["embed.in.b"]
        tokens = tokens + Tensor(self.pos.table[:cfg.m])
        x = tz.concat([ctx.reshape(batch, 1, cfg.D), tokens], axis=1)   # (B, m+1, D)
        return self._encoder_stack(x, training, rng)

    def _encoder_stack(self, x: Tensor, training, rng) -> Tensor:
        for layer in range(self.config.L):
            base = f"enc.l{layer}"
            attn = self._memory_attention(x, x, f"{base}.self")
            x = self._add_norm(x, attn, f"{base}.ln1", training, rng)
            x = self._add_norm(x, self._ffn(x, f"{base}.ffn"), f"{base}.ln3", training, rng)
        return x

    def decode(self, inputs: Tensor, memory: Tensor, training: bool = False,
               rng=None) -> Tensor:
        """Masked decoder: (..., T, 2) previous positions -> (..., T, D) states."""
        cfg = self.config
        t_len = inputs.shape[-2]
        y = inputs @ self.params["embed.out.w"] + self.params["embed.out.b"]
        y = y + Tensor(self.pos.table[:t_len])
        mask = causal_mask(t_len)
        for layer in range(cfg.L):
            base = f"dec.l{layer}"
            self_attn = multi_head_attention(y, y, y, self._attn_params(f"{base}.self"),
                                             mask=mask)
            y = self._add_norm(y, self_attn, f"{base}.ln1", training, rng)
            cross = self._memory_attention(y, memory, f"{base}.cross")
            y = self._add_norm(y, cross, f"{base}.ln2", training, rng)
            y = self._add_norm(y, self._ffn(y, f"{base}.ffn"), f"{base}.ln3", training, rng)
        return y

    def _offsets(self, states: Tensor) -> Tensor:
        """(..., T, D) decoder states -> (..., K, T, 2) per-step offsets."""
        out = states @ self.params["head.traj.w"] + self.params["head.traj.b"]
        out = out.reshape(states.shape[:-1] + (self.config.K, 2))
        return out.swapaxes(-3, -2)

    def _credibility_logits(self, pooled: Tensor) -> Tensor:
        if pooled.ndim == 1:
            pooled = pooled.reshape(1, -1)
        return pooled @ self.params["head.cred.w"] + self.params["head.cred.b"]

    # -- forward passes -------------------------------------------------------

    def _credibility(self, memory: Tensor, last_obs: np.ndarray,
                     training: bool = False, rng=None) -> Tensor:
        """Mode credibilities from a single-step decoder pass.

        Conditioning only on the encoded history/context (never on decoded
        trajectories) keeps training and rollout credibilities identical in
        distribution.  last_obs: (2,) or (B, 2); returns (1, K) or (B, K).
        """
        first = np.asarray(last_obs, dtype=np.float64).reshape(-1, 1, 2)
        if memory.ndim == 2:
            state = self.decode(Tensor(first[0]), memory, training, rng)       # (1, D)
        else:
            state = self.decode(Tensor(first), memory, training, rng)          # (B, 1, D)
        pooled = state.mean(axis=-2)
        return softmax_rows(self._credibility_logits(pooled))

    def forward_teacher(self, raster, target_hist, av_hist, truth: np.ndarray,
                        training: bool = False, rng=None, input_mask=None):
        """Teacher-forced pass for training.

        Decoder inputs are the last observed position followed by the first
        H-1 ground-truth positions; predictions are cumulative sums of the
        per-step offsets.  `input_mask` (H,) marks steps whose decoder input
        is replaced by the last observed position (decoder input dropout).
        Returns (positions (K,H,2), credibility (K,), both tape Tensors).
        """
        cfg = self.config
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != (cfg.H, 2):
            raise ValueError(f"forward_teacher: truth must be ({cfg.H}, 2), got {truth.shape}")
        memory = self.encode(raster, target_hist, av_hist, training, rng)
        last_obs = np.asarray(target_hist, dtype=np.float64)[-1]
        dec_np = np.concatenate([[last_obs], truth[:-1]], axis=0)          # (H, 2)
        if input_mask is not None:
            dec_np = np.where(np.asarray(input_mask, dtype=bool)[:, None],
                              last_obs[None], dec_np)
        states = self.decode(Tensor(dec_np), memory, training, rng)
        offsets = self._offsets(states)                                    # (K, H, 2)
        positions = _cumsum_time(offsets) + Tensor(last_obs.reshape(1, 1, 2))
        cred = self._credibility(memory, last_obs, training, rng).reshape(-1)
        return positions, cred

    def forward_teacher_batch(self, rasters, target_hists, av_hists,
                              truths: np.ndarray, training: bool = False, rng=None,
                              input_mask=None):
        """Batched teacher-forced pass over B samples sharing one tape.

        `input_mask` (B, H) marks decoder inputs replaced by the last
        observed position.  Returns (positions (B,K,H,2), credibility
        (B,K)), both Tensors.
        """
        cfg = self.config
        truths = np.asarray(truths, dtype=np.float64)
        if truths.ndim != 3 or truths.shape[1:] != (cfg.H, 2):
            raise ValueError(f"forward_teacher_batch: truths must be (B, {cfg.H}, 2), "
                             f"got {truths.shape}")
        memory = self.encode_batch(rasters, target_hists, av_hists, training, rng)
        last_obs = np.asarray(target_hists, dtype=np.float64)[:, -1]   # (B, 2)
        dec_np = np.concatenate([last_obs[:, None], truths[:, :-1]], axis=1)
        if input_mask is not None:
            dec_np = np.where(np.asarray(input_mask, dtype=bool)[:, :, None],
                              last_obs[:, None, :], dec_np)
        states = self.decode(Tensor(dec_np), memory, training, rng)    # (B, H, D)
        offsets = self._offsets(states)                                # (B, K, H, 2)
        positions = _cumsum_time(offsets) + Tensor(last_obs[:, None, None, :])
        cred = self._credibility(memory, last_obs, training, rng)      # (B, K)
        return positions, cred

    def predict(self, raster, target_hist, av_hist) -> PredictionSet:
        """Autoregressive rollout advancing all K modes in parallel.

        Each mode feeds back only its own predicted positions; its
        credibility logit is read from its own rollout's pooled states.
        """
        cfg = self.config
        with tz.no_grad():
            memory = self.encode(raster, target_hist, av_hist, training=False)
            mem_b = Tensor(np.broadcast_to(memory.data, (cfg.K,) + memory.shape).copy())
            last_obs = np.asarray(target_hist, dtype=np.float64)[-1]
            inputs = np.tile(last_obs, (cfg.K, 1, 1))                  # (K, 1, 2)
            pos = np.tile(last_obs, (cfg.K, 1))                        # (K, 2)
            trajs = np.zeros((cfg.K, cfg.H, 2))
            diag = np.arange(cfg.K)
            for step in range(cfg.H):
                states = self.decode(Tensor(inputs), mem_b)            # (K, t, D)
                offs = self._offsets(states).data                      # (K, K, t, 2)
                pos = pos + offs[diag, diag, -1]
                trajs[:, step] = pos
                inputs = np.concatenate([inputs, pos[:, None]], axis=1)
            cred = self._credibility(memory, last_obs).data.reshape(-1)
        return PredictionSet(trajectories=trajs, credibility=cred)


def _cumsum_time(offsets: Tensor) -> Tensor:
    """Cumulative sum along the second-to-last (time) axis.

    positions_t = sum_{tau<=t} offsets_tau, via a lower-triangular matmul
    broadcast over any leading axes.
    """
    t = offsets.shape[-2]
    return Tensor(np.tril(np.ones((t, t)))) @ offsets

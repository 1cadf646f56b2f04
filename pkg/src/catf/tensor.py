"""Minimal n-dimensional tensor with reverse-mode differentiation.

The graph is a dynamic tape: every operation records its parents and a
closure that routes the output gradient back to them.  ``backward()`` on a
scalar walks the tape in reverse topological order.  Tensors are float64 by
default (gradient checks are unreliable at float32); training builds may
switch via :func:`set_default_dtype`.

Broadcasting is restricted to a lower-rank operand aligning to the trailing
axes of the other (leading-axis batch).  Anything else needs an explicit
reshape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (np.float64 or np.float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager disabling tape construction (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (undo leading-axis broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # axes where the original had size 1 but grad does not
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _compatible(a_shape: tuple, b_shape: tuple) -> bool:
    """True if one shape is a trailing suffix (up to size-1 axes) of the other."""
    short, long = sorted((a_shape, b_shape), key=len)
    tail = long[len(long) - len(short):]
    return all(s == t or s == 1 or t == 1 for s, t in zip(short, tail))


class Tensor:
    """A flat float array with shape, optional gradient, and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this scalar through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- elementwise arithmetic ----------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        if not _compatible(self.shape, other.shape):
            raise ValueError(f"add: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        if not _compatible(self.shape, other.shape):
            raise ValueError(f"mul: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if not _compatible(self.shape, other.shape):
            raise ValueError(f"div: incompatible shapes {self.shape} and {other.shape}")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        if not np.isscalar(exponent):
            raise TypeError("pow supports scalar exponents only")
        a = self

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1))

        return Tensor._from_op(a.data ** exponent, (a,), backward)

    # -- transcendental -------------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._from_op(out_data, (a,), backward)

    def log(self):
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._from_op(np.log(a.data), (a,), backward)

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (a,), backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._from_op(a.data * mask, (a,), backward)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward(g):
            a._accumulate(g.reshape(old))

        return Tensor._from_op(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        a = self
        inv = np.argsort(axes)

        def backward(g):
            a._accumulate(g.transpose(inv))

        return Tensor._from_op(a.data.transpose(axes), (a,), backward)

    def swapaxes(self, ax1: int, ax2: int):
        axes = list(range(self.ndim))
        axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
        return self.transpose(*axes)

    def __getitem__(self, idx):
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._from_op(a.data[idx], (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy()
                              if g.shape != a.shape else g)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.shape).copy())

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires rank >= 2 operands")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
            raise ValueError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

        def backward(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward)

    __matmul__ = matmul


# -- free functions -----------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis),
                           tensors, backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by per-row max subtraction.

    Rejects non-finite input with the index of the first offending entry.
    """
    x = Tensor._coerce(x)
    if not np.isfinite(x.data).all():
        bad = np.argwhere(~np.isfinite(x.data))[0]
        raise ValueError(f"softmax_rows: non-finite input at index {tuple(bad)}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        # dL/dx = y * (g - sum(g * y)) along the last axis
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale & shift."""
    x = Tensor._coerce(x)
    gain = Tensor._coerce(gain)
    bias = Tensor._coerce(bias)
    d = x.shape[-1] if x.ndim else 0
    if d < 1:
        raise ValueError("layer_norm: zero-length feature axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            # standard layer-norm backward over the last axis
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of `table` by integer index; gradients scatter-add back."""
    table = Tensor._coerce(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return Tensor._from_op(table.data[idx], (table,), backward)


def conv2d_s2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 2, padding 1, via im2col.

    x: (C_in, H, W); weight: (C_out, C_in, 3, 3); bias: (C_out,).
    Output: (C_out, ceil(H/2), ceil(W/2)).
    """
    x = Tensor._coerce(x)
    weight = Tensor._coerce(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_s2: expected (C,H,W) input and (O,C,3,3) weight, "
                         f"got {x.shape} and {weight.shape}")
    if x.shape[0] != weight.shape[1]:
        raise ValueError(f"conv2d_s2: channel mismatch {x.shape[0]} vs {weight.shape[1]}")
    c_in, h, w = x.shape
    c_out = weight.shape[0]
    h_out = (h + 1) // 2
    w_out = (w + 1) // 2

    padded = np.zeros((c_in, h + 2, w + 2), dtype=x.data.dtype)
    padded[:, 1:-1, 1:-1] = x.data
    # column matrix: (h_out*w_out, c_in*9)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    windows = windows[:, ::2, ::2][:, :h_out, :w_out]          # (c_in, h_out, w_out, 3, 3)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * 9)
    wmat = weight.data.reshape(c_out, c_in * 9)
    out_data = (cols @ wmat.T).T.reshape(c_out, h_out, w_out)
    if bias is not None:
        bias = Tensor._coerce(bias)
        out_data = out_data + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(c_out, h_out * w_out)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=1))
        if weight.requires_grad:
            weight._accumulate((gmat @ cols).reshape(weight.shape))
        if x.requires_grad:
            gcols = gmat.T @ wmat                              # (h_out*w_out, c_in*9)
            gcols = gcols.reshape(h_out, w_out, c_in, 3, 3)
            gpad = np.zeros_like(padded)
            for di in range(3):
                for dj in range(3):
                    gpad[:, di:di + 2 * h_out:2, dj:dj + 2 * w_out:2] += \
                        gcols[:, :, :, di, dj].transpose(2, 0, 1)
            x._accumulate(gpad[:, 1:-1, 1:-1])

    return Tensor._from_op(out_data, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,) spatial mean."""
    x = Tensor._coerce(x)
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool: expected (C,H,W), got {x.shape}")
    c, h, w = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy())

    return Tensor._from_op(x.data.mean(axis=(1, 2)), (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when p == 0 or not training."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout: p must be < 1")
    x = Tensor._coerce(x)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(x.data * mask, (x,), backward)


# -- gradient checking --------------------------------------------------------


@dataclass
class GradReport:
    """Comparison of reverse-mode gradients against central finite differences."""

    max_abs_diff: float
    max_rel_diff: float
    per_parameter: dict = field(default_factory=dict)

    def ok(self, rel_tol: float = 1e-4) -> bool:
        return self.max_rel_diff < rel_tol


def _rel_diff(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def check_gradient(f, params, h: float = 1e-5) -> GradReport:
    """Compare the tape gradient of scalar `f(*params)` with central differences.

    `params` is a dict name -> Tensor or a sequence of Tensors.  Each must
    have requires_grad set.  The relative error uses max(|a|, |b|, 1e-8) as
    denominator.
    """
    if isinstance(params, dict):
        named = list(params.items())
        args = list(params.values())
    else:
        args = list(params)
        named = [(f"p{i}", t) for i, t in enumerate(args)]
    for name, t in named:
        if not t.requires_grad:
            raise ValueError(f"check_gradient: parameter {name!r} does not require grad")
        t.zero_grad()

    out = f(*args)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("check_gradient: f must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise ValueError("check_gradient: f returned a non-finite value")
    out.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in named}

    per_param = {}
    max_abs = 0.0
    max_rel = 0.0
    with no_grad():
        for name, t in named:
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = float(f(*args).data)
                flat[i] = orig - h
                lo = float(f(*args).data)
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2.0 * h)
            a = analytic[name]
            abs_d = float(np.max(np.abs(a - numeric))) if a.size else 0.0
            rel_d = float(np.max(_rel_diff(a, numeric))) if a.size else 0.0
            per_param[name] = {"max_abs_diff": abs_d, "max_rel_diff": rel_d}
            max_abs = max(max_abs, abs_d)
            max_rel = max(max_rel, rel_d)
    return GradReport(max_abs_diff=max_abs, max_rel_diff=max_rel, per_parameter=per_param)

"""Training objectives: mixture NLL, off-road penalty, multitask combination.

The mixture NLL treats the ground truth as drawn from a credibility-weighted
mixture of unit-variance Gaussians around the K hypotheses and is evaluated
in log-sum-exp form (max exponent subtracted), so it stays finite for
squared residuals far beyond the naive form's overflow point.

The off-road penalty exponentiates the count of waypoints landing in blocked
grid cells.  The count is piecewise constant, so training uses a surrogate
gradient that pulls each off-road waypoint toward the nearest drivable cell
center.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .scene import DrivableGrid
from .tensor import Tensor

OFFROAD_COUNT_CLAMP = 30.0  # exp() of anything larger would dwarf float range


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def nll_mixture_loss(truth: np.ndarray, preds, credibility) -> Tensor:
    """Negative log-likelihood of `truth` under the K-mode mixture.

    truth: (H, 2) array; preds: (K, H, 2); credibility: (K,) positive,
    summing to 1.  Differentiable w.r.t. preds and credibility when those
    are tape tensors.
    """
    truth = np.asarray(truth, dtype=np.float64)
    preds = _as_tensor(preds)
    credibility = _as_tensor(credibility)
    if preds.ndim != 3 or preds.shape[1:] != truth.shape:
        raise ValueError(f"nll_mixture_loss: preds {preds.shape} do not match "
                         f"truth {truth.shape} over K modes")
    if credibility.shape != (preds.shape[0],):
        raise ValueError("nll_mixture_loss: credibility length must equal mode count")
    cred_data = credibility.data
    if (cred_data <= 0).any() or abs(cred_data.sum() - 1.0) > 1e-6:
        raise ValueError(f"nll_mixture_loss: credibility must be positive and sum to 1, "
                         f"got sum {cred_data.sum():.8f}")
    diff = preds - Tensor(truth)
    sq = (diff * diff).sum(axis=2).sum(axis=1)          # (K,) total squared residual
    exponents = credibility.log() - 0.5 * sq            # (K,)
    a_star = float(exponents.data.max())                # constant shift
    return -(a_star + (exponents - a_star).exp().sum().log())


def nll_mixture_loss_batch(truths: np.ndarray, preds, credibility) -> Tensor:
    """Mean mixture NLL over a batch: truths (B,H,2), preds (B,K,H,2),
    credibility (B,K) with each row positive and summing to 1."""
    truths = np.asarray(truths, dtype=np.float64)
    preds = _as_tensor(preds)
    credibility = _as_tensor(credibility)
    if (preds.ndim != 4 or truths.ndim != 3 or preds.shape[0] != truths.shape[0]
            or preds.shape[2:] != truths.shape[1:]):
        raise ValueError(f"nll_mixture_loss_batch: preds {preds.shape} do not match "
                         f"truths {truths.shape} over K modes")
    if credibility.shape != preds.shape[:2]:
        raise ValueError("nll_mixture_loss_batch: credibility must be (B, K)")
    cred_data = credibility.data
    if (cred_data <= 0).any() or np.abs(cred_data.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("nll_mixture_loss_batch: credibility rows must be positive "
                         "and sum to 1")
    diff = preds - Tensor(truths[:, None])
    sq = (diff * diff).sum(axis=3).sum(axis=2)              # (B, K)
    exponents = credibility.log() - 0.5 * sq                # (B, K)
    a_star = exponents.data.max(axis=1, keepdims=True)      # constant per-row shift
    lse = (exponents - Tensor(a_star)).exp().sum(axis=1).log() + Tensor(a_star[:, 0])
    return -lse.mean()


def offroad_count(preds: np.ndarray, grid: DrivableGrid) -> int:
    """Number of (mode, step) waypoints inside blocked cells (or off the grid)."""
    preds = np.asarray(preds, dtype=np.float64)
    return int(grid.offroad_flags(preds).sum())


def offroad_loss(preds, grid: DrivableGrid, normalize: bool = False) -> tuple[int, float]:
    """Raw off-road waypoint count and exp(count) penalty.

    The exponent is clamped at OFFROAD_COUNT_CLAMP to stay finite; with
    `normalize` the count is divided by K*H first (off by default).
    """
    preds = np.asarray(preds.data if isinstance(preds, Tensor) else preds, dtype=np.float64)
    count = offroad_count(preds, grid)
    value = count / (preds.shape[0] * preds.shape[1]) if normalize else float(count)
    return count, float(np.exp(min(value, OFFROAD_COUNT_CLAMP)))


def straight_through_offroad_gradient(preds, grid: DrivableGrid,
                                      normalize: bool = False) -> np.ndarray:
    """Surrogate d(exp(count))/d(preds): nonzero only at off-road waypoints.

    Each off-road waypoint gets a pull toward the nearest unblocked cell
    center, scaled by the penalty's slope at the clamped count.
    """
    preds = np.asarray(preds.data if isinstance(preds, Tensor) else preds, dtype=np.float64)
    grad = np.zeros_like(preds)
    flags = grid.offroad_flags(preds)
    count = int(flags.sum())
    if count == 0:
        return grad
    denom = preds.shape[0] * preds.shape[1] if normalize else 1
    scale = np.exp(min(count / denom, OFFROAD_COUNT_CLAMP)) / denom
    free = grid.free_centers()
    if len(free) == 0:
        warnings.warn("straight_through_offroad_gradient: no drivable cell in grid, "
                      "surrogate gradient is zero")
        return grad
    points = preds[flags]                                   # (count, 2)
    d2 = ((points[:, None] - free[None]) ** 2).sum(axis=2)
    targets = free[np.argmin(d2, axis=1)]
    grad[flags] = scale * (points - targets)
    return grad


@dataclass
class MultitaskWeights:
    """Unconstrained log-sigma parameters; sigma_i = exp(log_sigma_i) > 0."""

    log_sigma1: Tensor
    log_sigma2: Tensor

    @staticmethod
    def fresh(log_sigma1: float = 0.0, log_sigma2: float = 0.0) -> "MultitaskWeights":
        return MultitaskWeights(Tensor(log_sigma1, requires_grad=True),
                                Tensor(log_sigma2, requires_grad=True))

    def sigmas(self) -> tuple[float, float]:
        return float(np.exp(self.log_sigma1.data)), float(np.exp(self.log_sigma2.data))


def multitask_loss(l_c, l_o, w: MultitaskWeights) -> Tensor:
    """L_c / sigma1^2 + L_o / sigma2^2 + sum_i log(sigma_i + 1)."""
    l_c = _as_tensor(l_c)
    l_o = _as_tensor(l_o)
    if not (np.isfinite(l_c.data).all() and np.isfinite(l_o.data).all()):
        raise ValueError("multitask_loss: task losses must be finite")
    inv1 = (w.log_sigma1 * (-2.0)).exp()
    inv2 = (w.log_sigma2 * (-2.0)).exp()
    reg = (w.log_sigma1.exp() + 1.0).log() + (w.log_sigma2.exp() + 1.0).log()
    return l_c * inv1 + l_o * inv2 + reg

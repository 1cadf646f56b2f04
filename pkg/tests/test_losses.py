"""Mixture likelihood, off-road penalty, and multitask weighting."""

import math

import numpy as np
import pytest

from catf.losses import (OFFROAD_COUNT_CLAMP, MultitaskWeights, multitask_loss,
                         nll_mixture_loss, nll_mixture_loss_batch,
                         offroad_count, offroad_loss,
                         straight_through_offroad_gradient)
from catf.scene import DrivableGrid
from catf.tensor import Tensor, check_gradient


def _naive_nll(truth, preds, cred):
    sq = ((preds - truth[None]) ** 2).sum(axis=(1, 2))
    return -math.log(float((cred * np.exp(-0.5 * sq)).sum()))


def _half_grid():
    """10x10 m grid with the upper half (y > 5) blocked."""
    blocked = np.zeros((10, 10), dtype=bool)
    blocked[5:] = True
    return DrivableGrid(cell_size=1.0, extent=(0.0, 0.0, 10.0, 10.0), blocked=blocked)


# -- mixture NLL --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_nll_matches_naive_form(seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(6, 2))
    preds = truth[None] + rng.normal(0, 0.8, size=(3, 6, 2))
    logits = rng.normal(size=3)
    cred = np.exp(logits) / np.exp(logits).sum()
    got = float(nll_mixture_loss(truth, Tensor(preds), Tensor(cred)).data)
    want = _naive_nll(truth, preds, cred)
    assert abs(got - want) / max(abs(want), 1e-8) < 1e-10


def test_nll_stable_for_huge_residuals():
    truth = np.zeros((4, 2))
    preds = np.full((2, 4, 2), 1e3)
    cred = np.array([0.5, 0.5])
    val = float(nll_mixture_loss(truth, Tensor(preds), Tensor(cred)).data)
    assert np.isfinite(val)
    # two identical modes: -log(e^{-S}) = S = 0.5 * 4*2 * (1e3)^2
    assert val == pytest.approx(0.5 * 8 * 1e6, rel=1e-9)


def test_nll_exact_single_mode_is_zero():
    truth = np.arange(8.0).reshape(4, 2)
    val = nll_mixture_loss(truth, Tensor(truth[None].copy()), Tensor([1.0]))
    assert abs(float(val.data)) < 1e-12


def test_nll_half_credibility_reference_value():
    # one exact mode at credibility 0.5, the other far away: -log(0.5)
    truth = np.zeros((3, 2))
    preds = np.stack([truth, truth + 100.0])
    val = float(nll_mixture_loss(truth, Tensor(preds), Tensor([0.5, 0.5])).data)
    assert val == pytest.approx(0.6931472, abs=1e-6)


def test_nll_credibility_validation():
    truth = np.zeros((3, 2))
    preds = np.zeros((2, 3, 2))
    with pytest.raises(ValueError):
        nll_mixture_loss(truth, Tensor(preds), Tensor([0.7, 0.7]))
    with pytest.raises(ValueError):
        nll_mixture_loss(truth, Tensor(preds), Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        nll_mixture_loss(truth, Tensor(np.zeros((2, 4, 2))), Tensor([0.5, 0.5]))


def test_nll_gradient():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=(4, 2))
    preds = Tensor(truth[None] + rng.normal(0, 0.5, size=(2, 4, 2)),
                   requires_grad=True)
    logits = Tensor(rng.normal(size=2), requires_grad=True)

    def f(preds, logits):
        cred = logits.exp() * (1.0 / logits.exp().sum())
        return nll_mixture_loss(truth, preds, cred)

    assert check_gradient(f, [preds, logits]).ok(1e-4)


def test_nll_batch_equals_mean_of_singles():
    rng = np.random.default_rng(2)
    truths = rng.normal(size=(4, 5, 2))
    preds = truths[:, None] + rng.normal(0, 0.6, size=(4, 3, 5, 2))
    logits = rng.normal(size=(4, 3))
    cred = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    batch = float(nll_mixture_loss_batch(truths, Tensor(preds), Tensor(cred)).data)
    singles = [float(nll_mixture_loss(truths[i], Tensor(preds[i]),
                                      Tensor(cred[i])).data) for i in range(4)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)
    with pytest.raises(ValueError):
        nll_mixture_loss_batch(truths, Tensor(preds), Tensor(cred[:, :2]))


# -- off-road penalty ---------------------------------------------------------


def test_offroad_count_and_penalty():
    grid = _half_grid()
    preds = np.array([[[2.5, 2.5], [2.5, 7.5]],      # one on-road, one blocked
                      [[1.5, 1.5], [3.5, 3.5]]])     # all on-road
    assert offroad_count(preds, grid) == 1
    count, penalty = offroad_loss(preds, grid)
    assert count == 1 and penalty == pytest.approx(math.e)
    zero_count, zero_pen = offroad_loss(preds[1:], grid)
    assert zero_count == 0 and zero_pen == 1.0


def test_offroad_penalty_clamps_large_counts():
    grid = _half_grid()
    preds = np.full((3, 50, 2), 7.5)                 # 150 blocked waypoints
    count, penalty = offroad_loss(preds, grid)
    assert count == 150
    assert penalty == pytest.approx(math.exp(OFFROAD_COUNT_CLAMP))
    assert np.isfinite(penalty)


def test_offroad_penalty_normalized():
    grid = _half_grid()
    preds = np.full((2, 2, 2), 7.5)                  # 4 of 4 waypoints blocked
    count, penalty = offroad_loss(preds, grid, normalize=True)
    assert count == 4 and penalty == pytest.approx(math.e)


def test_straight_through_gradient_targets_nearest_free_cell():
    grid = _half_grid()
    preds = np.array([[[2.5, 2.5], [2.5, 7.5]]])
    grad = straight_through_offroad_gradient(preds, grid)
    assert grad.shape == preds.shape
    np.testing.assert_array_equal(grad[0, 0], 0.0)   # on-road point untouched
    # nearest free center from (2.5, 7.5) is (2.5, 4.5); slope exp(count)=e
    np.testing.assert_allclose(grad[0, 1], math.e * np.array([0.0, 3.0]), atol=1e-9)


def test_straight_through_gradient_zero_when_on_road():
    grid = _half_grid()
    preds = np.full((2, 3, 2), 1.5)
    assert not straight_through_offroad_gradient(preds, grid).any()


def test_straight_through_gradient_warns_without_free_cells():
    grid = DrivableGrid(1.0, (0, 0, 2, 2), np.ones((2, 2), dtype=bool))
    with pytest.warns(UserWarning):
        grad = straight_through_offroad_gradient(np.full((1, 1, 2), 0.5), grid)
    assert not grad.any()


# -- multitask weighting ------------------------------------------------------


def test_multitask_loss_reference_value():
    w = MultitaskWeights.fresh()                     # sigma1 = sigma2 = 1
    val = float(multitask_loss(2.0, 1.0, w).data)
    assert val == pytest.approx(3.0 + 2.0 * math.log(2.0), abs=1e-9)
    assert val == pytest.approx(4.386294, abs=1e-6)


def test_multitask_weights_positive_sigma():
    w = MultitaskWeights.fresh(log_sigma1=-3.0, log_sigma2=4.0)
    s1, s2 = w.sigmas()
    assert s1 == pytest.approx(math.exp(-3.0)) and s2 == pytest.approx(math.exp(4.0))
    assert s1 > 0 and s2 > 0


def test_multitask_loss_gradient_flows_to_weights():
    w = MultitaskWeights.fresh(0.3, -0.2)
    loss = multitask_loss(2.0, 1.5, w)
    loss.backward()
    assert w.log_sigma1.grad is not None and w.log_sigma2.grad is not None

    def f(ls1, ls2):
        return multitask_loss(2.0, 1.5, MultitaskWeights(ls1, ls2))

    w2 = MultitaskWeights.fresh(0.3, -0.2)
    assert check_gradient(f, [w2.log_sigma1, w2.log_sigma2]).ok(1e-4)


def test_multitask_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        multitask_loss(float("nan"), 1.0, MultitaskWeights.fresh())

import math

import numpy as np
import pytest

from bevdet.errors import ContractError
from bevdet.losses import (
    LossVariant,
    LossWeights,
    class_weights_from_freq,
    focal_loss,
    l1_loss,
    label_frequencies,
    smooth_l1,
    total_loss,
    weighted_ce,
)
from bevdet.nn.gradcheck import numeric_gradient, relative_error

SEEDS = (0, 1, 2)


def toy(seed, k=3, n=2, h=4, w=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, k, h, w)) * 2, rng.integers(0, k, (n, h, w))


def fd_error(fn, x):
    """Relative error of ``fn(x) -> (loss, grad)`` against central differences."""
    _, g = fn(x)
    return relative_error(g, numeric_gradient(lambda: fn(x)[0], x))


class TestClassWeights:
    def test_values(self):
        w = class_weights_from_freq([0.0, 1.0], 1.02)
        assert w[0] == pytest.approx(50.4983, abs=1e-4)
        # 1 / ln(2.02)
        assert w[1] == pytest.approx(1.42227, abs=1e-5)

    def test_monotone(self):
        w = class_weights_from_freq(np.linspace(0, 1, 101))
        assert (np.diff(w) < 0).all() and (w > 0).all()

    @pytest.mark.parametrize("eps", [1.0, 0.5])
    def test_eps_must_exceed_one(self, eps):
        with pytest.raises(ContractError):
            class_weights_from_freq([0.1], eps)

    def test_frequencies(self):
        maps = [np.array([[0, 1], [1, 2]]), np.array([[0, 0], [0, 0]])]
        np.testing.assert_allclose(label_frequencies(maps, 4), [5 / 8, 2 / 8, 1 / 8, 0])


class TestWeightedCE:
    def test_uniform_two_class(self):
        labels = np.zeros((1, 3, 3), dtype=np.int64)
        loss, _ = weighted_ce(np.zeros((1, 2, 3, 3)), labels, [1.0, 1.0])
        assert loss == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_prediction(self):
        _, labels = toy(0)
        logits = np.eye(3)[labels].transpose(0, 3, 1, 2) * 60.0
        loss, grad = weighted_ce(logits, labels, [1.0, 2.0, 3.0])
        assert loss < 1e-20 and np.abs(grad).max() < 1e-20

    def test_weight_applies_per_label(self):
        logits, labels = toy(1, k=2)
        a, _ = weighted_ce(logits, labels, [1.0, 1.0])
        b, _ = weighted_ce(logits, labels, [3.0, 3.0])
        assert b == pytest.approx(3 * a)

    def test_label_out_of_range(self):
        logits, labels = toy(0)
        labels[0, 0, 0] = 3
        with pytest.raises(ContractError):
            weighted_ce(logits, labels)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        logits, labels = toy(seed)
        w = np.random.default_rng(seed).uniform(0.5, 5, 3)
        assert fd_error(lambda z: weighted_ce(z, labels, w), logits) < 1e-4


class TestFocal:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_reduces_to_ce(self, seed):
        logits, labels = toy(seed)
        f, gf = focal_loss(logits, labels, gamma=0.0, alpha=1.0)
        c, gc = weighted_ce(logits, labels)
        assert abs(f - c) < 1e-6
        assert np.abs(gf - gc).max() < 1e-6

    def test_confident_is_zero(self):
        _, labels = toy(0)
        logits = np.eye(3)[labels].transpose(0, 3, 1, 2) * 60.0
        assert focal_loss(logits, labels)[0] < 1e-20

    def test_downweights_easy(self):
        logits, labels = toy(2)
        assert focal_loss(logits, labels, 2.0, 1.0)[0] < weighted_ce(logits, labels)[0]

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("gamma,alpha", [(2.0, 0.25), (0.5, 1.0), (1.0, 0.5)])
    def test_gradient(self, seed, gamma, alpha):
        logits, labels = toy(seed)
        assert fd_error(lambda z: focal_loss(z, labels, gamma, alpha), logits) < 1e-4


class TestRegression:
    def _one(self, x, fn=smooth_l1):
        pred = np.full((1, 1, 1, 1), float(x))
        return fn(pred, np.zeros_like(pred), np.ones((1, 1, 1), bool))

    @pytest.mark.parametrize("x,expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (0.0, 0.0)])
    def test_branches(self, x, expected):
        assert self._one(x)[0] == pytest.approx(expected)

    def test_continuity_at_one(self):
        below, g_below = self._one(np.nextafter(1.0, 0.0))
        above, g_above = self._one(1.0)
        assert below == pytest.approx(0.5) and above == 0.5
        assert g_below.item() == pytest.approx(1.0) and g_above.item() == 1.0

    def test_l1(self):
        assert self._one(-0.3, l1_loss)[0] == pytest.approx(0.3)

    def test_mask_and_mean(self):
        pred = np.array([[[[1.0, 9.0]], [[0.5, 9.0]]]])  # (1, 2, 1, 2)
        mask = np.array([[[True, False]]])
        loss, grad = smooth_l1(pred, np.zeros_like(pred), mask)
        assert loss == pytest.approx((0.5 + 0.125) / 2)
        assert not grad[..., 1].any()

    def test_empty_mask(self):
        pred = np.ones((1, 3, 2, 2))
        loss, grad = smooth_l1(pred, np.zeros_like(pred), np.zeros((1, 2, 2), bool))
        assert loss == 0.0 and not grad.any()

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            smooth_l1(np.ones((1, 3, 2, 2)), np.ones((1, 3, 2, 1)), np.ones((1, 2, 2), bool))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("fn", [smooth_l1, l1_loss])
    def test_gradient(self, seed, fn):
        rng = np.random.default_rng(seed)
        pred = rng.uniform(-3, 3, (2, 3, 4, 4))
        # keep every residual away from the kinks at 0 and +-1
        pred = np.where(np.abs(np.abs(pred) - 1) < 0.05, pred + 0.1, pred)
        pred = np.where(np.abs(pred) < 0.05, 0.2, pred)
        mask = rng.random((2, 4, 4)) < 0.5
        assert fd_error(lambda p: fn(p, np.zeros_like(p), mask), pred) < 1e-4


def toy_heads(seed, n=1, h=8, w=8):
    rng = np.random.default_rng(seed)
    heads = (rng.standard_normal((n, 2, h, w)), rng.standard_normal((n, 3, h, w)), rng.standard_normal((n, 21, h, w)))
    cls = (rng.random((n, h, w)) < 0.3).astype(np.int64)
    rot = np.where(cls > 0, rng.integers(1, 21, (n, h, w)), 0)
    box = rng.uniform(0, 1.5, (n, 3, h, w))
    return heads, (cls, box, rot)


class TestTotal:
    def test_perfect(self):
        _, (cls, box, rot) = toy_heads(0)
        heads = (
            np.eye(2)[cls].transpose(0, 3, 1, 2) * 60.0,
            box.copy(),
            np.eye(21)[rot].transpose(0, 3, 1, 2) * 60.0,
        )
        total, _, _ = total_loss(heads, (cls, box, rot))
        assert total < 1e-5

    def test_weights_linear(self):
        heads, targets = toy_heads(1)
        total, terms, _ = total_loss(heads, targets, LossWeights(1.0, 0.0, 0.0))
        assert total == terms["keypoints"]
        t2, terms2, g2 = total_loss(heads, targets, LossWeights(1.0, 0.98 * 2, 0.95))
        _, _, g1 = total_loss(heads, targets)
        np.testing.assert_allclose(g2[1], 2 * g1[1])
        assert t2 == pytest.approx(terms2["keypoints"] + 1.96 * terms2["box"] + 0.95 * terms2["rotation"])

    def test_default_weights(self):
        assert LossWeights() == LossWeights(1.0, 0.98, 0.95)

    def test_shape_mismatch(self):
        heads, targets = toy_heads(0)
        with pytest.raises(ContractError):
            total_loss((heads[0], heads[1][:, :, :4], heads[2]), targets)

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("variant", [LossVariant(), LossVariant("focal", "l1")])
    def test_gradient(self, seed, variant):
        heads, targets = toy_heads(seed)
        cw = np.array([0.7, 12.0])
        rw = np.random.default_rng(seed).uniform(1, 40, 21)
        _, _, grads = total_loss(heads, targets, class_weights=cw, rot_weights=rw, variant=variant)

        def f():
            return total_loss(heads, targets, class_weights=cw, rot_weights=rw, variant=variant)[0]

        for g, x in zip(grads, heads):
            assert relative_error(g, numeric_gradient(f, x)) < 1e-3

    def test_nonnegative(self):
        for seed in range(5):
            heads, targets = toy_heads(seed)
            total, terms, _ = total_loss(heads, targets)
            assert total >= 0 and min(terms.values()) >= 0

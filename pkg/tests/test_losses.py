"""Loss family: formula values, identities, and the weight-update rule."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardiokit import autodiff as ad
from cardiokit.autodiff import Tensor
from cardiokit.losses import (
    AllZeroWeights,
    ClassWeights,
    LossConfig,
    ScoreOutOfRange,
    focal_dice_class,
    hard_dice,
    one_hot,
    total_loss,
    update_class_weights,
)
from cardiokit.volume import ShapeMismatch

RNG = np.random.default_rng(77)


def random_pg(shape=(4, 3, 2, 2, 2)):
    logits = RNG.normal(size=shape)
    p = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    labels = RNG.integers(0, 4, size=shape[1:])
    g = one_hot(labels.reshape(shape[1:3] + (-1,)) if labels.ndim == 3 else labels)
    g = np.zeros(shape)
    for c in range(4):
        g[c] = labels == c
    return p, g


# focal_dice_class


def test_hand_example():
    # (2*0.8 + 1e-5) / (0.64 + 0.36 + 1 + 1e-5) = 1.60001/2.00001 = 0.800001...
    loss = focal_dice_class(np.array([0.8, 0.6]), np.array([1.0, 0.0]), beta=2.0, epsilon=1e-5)
    ratio = (2 * 0.8 + 1e-5) / (0.8**2 + 0.6**2 + 1.0 + 1e-5)
    assert abs(ratio - 0.800001) < 1e-6
    assert abs(loss.item() - 0.10557) < 1e-5
    assert abs(loss.item() - (1.0 - ratio**0.5)) < 1e-12


def test_perfect_prediction_near_zero():
    g = (RNG.random((5, 5)) < 0.4).astype(np.float64)
    for beta in (0.5, 1.0, 2.0, 4.0):
        loss = focal_dice_class(g.copy(), g, beta=beta, epsilon=1e-5)
        assert 0 <= loss.item() < 1e-5


def test_beta_one_is_soft_dice():
    for _ in range(10):
        p = RNG.random((6, 4))
        g = (RNG.random((6, 4)) < 0.5).astype(np.float64)
        loss = focal_dice_class(p, g, beta=1.0, epsilon=1e-5).item()
        soft = 1.0 - (2 * (p * g).sum() + 1e-5) / ((p**2).sum() + (g**2).sum() + 1e-5)
        assert abs(loss - soft) <= 1e-12


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        focal_dice_class(np.zeros(3), np.zeros(4), 2.0, 1e-5)


def test_gradient_matches_finite_differences():
    p0 = RNG.random((4, 3))
    g = (RNG.random((4, 3)) < 0.5).astype(np.float64)
    t = Tensor(p0.copy(), requires_grad=True)
    focal_dice_class(t, g, beta=2.0, epsilon=1e-5).backward()
    h = 1e-6
    for idx in np.ndindex(p0.shape):
        pp, pm = p0.copy(), p0.copy()
        pp[idx] += h
        pm[idx] -= h
        num = (
            focal_dice_class(pp, g, 2.0, 1e-5).item()
            - focal_dice_class(pm, g, 2.0, 1e-5).item()
        ) / (2 * h)
        assert abs(t.grad[idx] - num) < 1e-6


# total_loss


def loop_total_loss(p, g, w, cfg):
    """Scalar-loop recomputation of the weighted Focal Dice total."""
    beta = 1.0 if cfg.kind == "dice" else cfg.beta
    first = 0 if cfg.include_background else 1
    num = 0.0
    for i, c in enumerate(range(first, 4)):
        inter = p2 = g2 = 0.0
        for flat in range(p[c].size):
            pv = p[c].ravel()[flat]
            gv = g[c].ravel()[flat]
            inter += pv * gv
            p2 += pv * pv
            g2 += gv * gv
        ratio = (2 * inter + cfg.epsilon) / (p2 + g2 + cfg.epsilon)
        num += w[i] * (1.0 - ratio ** (1.0 / beta))
    return num / sum(w)


def test_loop_oracle_agreement():
    cfg = LossConfig(kind="focal_dice", beta=2.0)
    for _ in range(5):
        p, g = random_pg()
        w = list(RNG.random(4) + 0.1)
        got = total_loss(p, g, w, cfg).item()
        assert abs(got - loop_total_loss(p, g, w, cfg)) <= 1e-10


def test_loop_oracle_without_background():
    cfg = LossConfig(kind="dynamic_focal_dice", beta=3.0, include_background=False)
    p, g = random_pg()
    w = [0.5, 1.0, 0.25]
    got = total_loss(p, g, w, cfg).item()
    assert abs(got - loop_total_loss(p, g, w, cfg)) <= 1e-10


def test_equal_weights_arithmetic_mean():
    # two-class toy check of the normalization: loss (l0+l1+l2+l3)/4
    p, g = random_pg()
    cfg = LossConfig(kind="focal_dice")
    per_class = [
        focal_dice_class(p[c], g[c], cfg.beta, cfg.epsilon).item() for c in range(4)
    ]
    got = total_loss(p, g, ClassWeights.uniform(), cfg).item()
    assert abs(got - float(np.mean(per_class))) <= 1e-12


def test_weight_scaling_invariance():
    p, g = random_pg()
    cfg = LossConfig(kind="dynamic_focal_dice")
    w = np.array([0.3, 1.0, 0.7, 0.05])
    a = total_loss(p, g, w, cfg).item()
    b = total_loss(p, g, w * 7.0, cfg).item()
    assert abs(a - b) <= 1e-12


def test_all_zero_weights():
    p, g = random_pg()
    with pytest.raises(AllZeroWeights):
        total_loss(p, g, np.zeros(4), LossConfig(kind="focal_dice"))
    with pytest.raises(AllZeroWeights):
        ClassWeights((0.0, 0.0, 0.0, 0.0))


def test_dice_kind_forces_beta_one():
    p, g = random_pg()
    w = ClassWeights.uniform()
    a = total_loss(p, g, w, LossConfig(kind="dice", beta=7.0)).item()
    b = total_loss(p, g, w, LossConfig(kind="focal_dice", beta=1.0)).item()
    assert abs(a - b) <= 1e-12


def test_cross_entropy_is_mean_nll():
    p, g = random_pg()
    cfg = LossConfig(kind="cross_entropy")
    got = total_loss(p, g, ClassWeights.uniform(), cfg).item()
    labels = g.argmax(axis=0)
    nll = 0.0
    for idx in np.ndindex(labels.shape):
        nll -= np.log(p[(labels[idx],) + idx])
    assert abs(got - nll / labels.size) <= 1e-10


def test_perfect_prediction_gradient_tiny():
    _, g = random_pg()
    t = Tensor(g.copy(), requires_grad=True)
    cfg = LossConfig(kind="dynamic_focal_dice")
    total_loss(t, g, ClassWeights.uniform(), cfg).backward()
    assert np.abs(t.grad).max() <= 1e-6


def test_weight_count_must_match():
    p, g = random_pg()
    with pytest.raises(ValueError):
        total_loss(p, g, [1.0, 1.0, 1.0], LossConfig(kind="focal_dice"))
    with pytest.raises(ValueError):
        total_loss(p, g, [1.0] * 4, LossConfig(kind="focal_dice", include_background=False))


# update_class_weights


def test_update_rule_example():
    w = update_class_weights([0.9, 0.5, 0.6, 1.0], w_min=0.05)
    assert np.allclose(w.w, (0.1, 0.5, 0.4, 0.05), atol=1e-12)


def test_update_all_zero_dice():
    assert update_class_weights([0.0, 0.0, 0.0, 0.0]).w == (1.0, 1.0, 1.0, 1.0)


def test_update_out_of_range():
    for bad in ([-0.1, 0, 0, 0], [0, 1.2, 0, 0], [0, np.nan, 0, 0]):
        with pytest.raises(ScoreOutOfRange):
            update_class_weights(bad)


@given(st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4),
       st.floats(0.0, 0.5))
def test_update_bounds_and_monotonicity(dice, w_min):
    w = update_class_weights(dice, w_min).w
    assert all(w_min <= x <= 1.0 for x in w)
    order = np.argsort(dice)
    sorted_w = [w[i] for i in order]
    assert all(a >= b for a, b in zip(sorted_w, sorted_w[1:]))


# helpers


def test_one_hot_round_trip():
    labels = RNG.integers(0, 4, size=(5, 4, 3, 2))
    oh = one_hot(labels)
    assert oh.shape == (4, 5, 4, 3, 2)
    assert np.array_equal(oh.argmax(axis=0), labels)
    assert np.all(oh.sum(axis=0) == 1.0)
    oh3 = one_hot(labels[..., 0])
    assert oh3.shape == (4, 5, 4, 3, 1)


def test_hard_dice_cases():
    a = np.array([[0, 1], [2, 3]])
    assert np.allclose(hard_dice(a, a), 1.0)
    b = np.array([[1, 0], [3, 2]])
    assert np.allclose(hard_dice(a, b), 0.0)
    # class 3 absent from both maps scores 1.0
    c = np.array([[0, 1], [2, 2]])
    d = np.array([[0, 1], [2, 0]])
    dice = hard_dice(c, d)
    assert dice[3] == 1.0
    assert dice[1] == 1.0
    assert abs(dice[2] - 2 * 1 / (2 + 1)) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="hinge")
    with pytest.raises(ValueError):
        LossConfig(beta=0.0)
    with pytest.raises(ValueError):
        LossConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        LossConfig(weight_floor=1.0)


def test_class_weights_validation():
    with pytest.raises(ValueError):
        ClassWeights((-0.1, 1.0, 1.0, 1.0))
    assert len(ClassWeights.uniform(3)) == 3

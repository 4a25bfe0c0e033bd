import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mt3 import autodiff as ad
from mt3 import losses, verify
from mt3.autodiff import Tensor

vec = arrays(np.float64, st.integers(2, 12),
             elements=st.floats(-10, 10, allow_nan=False, allow_subnormal=False))


def nonzero(v):
    return np.linalg.norm(v) > 1e-3


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("float64"):
        yield


def test_pair_distance_examples():
    a = np.array([1.0, 2.0, -0.5])
    assert float(losses.pair_distance(a, a).data) == pytest.approx(0, abs=1e-12)
    assert float(losses.pair_distance(a, -a).data) == pytest.approx(4, abs=1e-12)
    assert float(losses.pair_distance([1.0, 0.0], [0.0, 3.0]).data) == pytest.approx(2, abs=1e-12)


def test_pair_distance_zero_norm_raises():
    with pytest.raises(ValueError):
        losses.pair_distance([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        losses.byol_loss(np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 3)), np.ones((2, 3)))


def test_pair_distance_equals_normalized_squared_distance():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(64, 5)), rng.normal(size=(64, 5))
    na = a / np.linalg.norm(a, axis=1, keepdims=True)
    nb = b / np.linalg.norm(b, axis=1, keepdims=True)
    np.testing.assert_allclose(losses.pair_distance(a, b).data, np.sum((na - nb) ** 2, 1), atol=1e-12)


def test_byol_ranges_over_1000_draws():
    rng = np.random.default_rng(1)
    vals = [rng.normal(size=(1000, 6)) for _ in range(4)]
    d = losses.pair_distance(vals[0], vals[1]).data
    b = losses.byol_loss(*vals).data
    assert d.min() >= 0 and d.max() <= 4
    assert b.min() >= 0 and b.max() <= 8


def test_byol_matches_brute_force():
    rng = np.random.default_rng(2)
    r, rt, z, zt = (rng.normal(size=(50, 7)) for _ in range(4))

    def cos(u, v):
        return np.sum(u * v, 1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))

    want = (2 - 2 * cos(r, zt)) + (2 - 2 * cos(rt, z))
    assert np.max(np.abs(losses.byol_loss(r, rt, z, zt).data - want)) < 1e-10


def test_byol_minimum_at_proportional_inputs():
    rng = np.random.default_rng(3)
    z, zt = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    out = losses.byol_loss(2.5 * zt, 0.3 * z, z, zt).data
    np.testing.assert_allclose(out, 0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec, st.integers(0, 3), st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_byol_scale_invariance(v, which, c, seed):
    rng = np.random.default_rng(seed)
    vals = [rng.normal(size=v.shape) for _ in range(4)]
    vals[which] = v if nonzero(v) else vals[which]
    scaled = list(vals)
    scaled[which] = vals[which] * c
    assert abs(float(losses.byol_loss(*vals).data) - float(losses.byol_loss(*scaled).data)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(2, 8), st.integers(0, 2 ** 31))
def test_byol_view_swap(n, d, seed):
    rng = np.random.default_rng(seed)
    r, rt, z, zt = (rng.normal(size=(n, d)) for _ in range(4))
    a = losses.byol_loss(r, rt, z, zt).data
    b = losses.byol_loss(rt, r, zt, z).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_byol_gradients_orthogonal_to_inputs():
    rng = np.random.default_rng(4)
    leaves = [Tensor(rng.normal(size=(6, 5)), requires_grad=True) for _ in range(4)]
    grads = ad.grad(ad.reduce_sum(losses.byol_loss(*leaves)), leaves)
    for x, g in zip(leaves, grads):
        assert np.max(np.abs(np.sum(x.data * g.data, axis=1))) < 1e-12


def test_cross_entropy_uniform_logits():
    ce = losses.cross_entropy(np.zeros((3, 10)), [0, 4, 9]).data
    np.testing.assert_allclose(ce, math.log(10), rtol=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_decreases_monotonically_to_zero():
    vals = [float(losses.cross_entropy(np.array([[t, 0.0, 0.0]]), [0]).data[0])
            for t in np.linspace(0, 60, 31)]
    assert all(a > b for a, b in zip(vals, vals[1:]) if b > 0)
    assert vals[-1] < 1e-20


def test_cross_entropy_large_logits_stable():
    ce = losses.cross_entropy(np.array([[1000.0, 0.0]]), [1]).data
    assert ce[0] == pytest.approx(1000.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 10), st.floats(-1e3, 1e3), st.integers(0, 2 ** 31))
def test_cross_entropy_shift_invariance(n, c, shift, seed):
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(n, c)), rng.integers(0, c, n)
    a = losses.cross_entropy(logits, labels).data
    b = losses.cross_entropy(logits + shift, labels).data
    assert np.max(np.abs(a - b)) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    logits, labels = rng.normal(size=(5, 4)), np.array([0, 3, 1, 1, 2])
    lt = Tensor(logits, requires_grad=True)
    (g,) = ad.grad(ad.reduce_sum(losses.cross_entropy(lt, labels)), [lt])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    np.testing.assert_allclose(g.data, p - np.eye(4)[labels], atol=1e-12)
    (num,) = verify.numeric_grad(
        lambda v: float(np.sum(losses.cross_entropy(v[0], labels).data)), [logits])
    assert verify.relative_error(g.data, num) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        losses.cross_entropy(np.zeros((1, 3)), [3])


def test_total_loss():
    assert float(losses.total_loss(2.0, 1.0, losses.LossWeights(0.1)).data) == pytest.approx(2.1)
    assert float(losses.total_loss(2.0, 5.0, losses.LossWeights(0.0)).data) == 2.0
    assert losses.LossWeights().gamma == 0.1
    with pytest.raises(ValueError):
        losses.LossWeights(-1.0)

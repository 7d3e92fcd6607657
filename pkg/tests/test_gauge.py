import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from hypergen import autodiff as ad
from hypergen.gauge import check_gauge, gauge_fix, random_trivial_symmetry
from hypergen.target_net import DEFAULT_ARCH, TargetArch, init_target_weights, target_forward

TINY = TargetArch(image_size=8, kernel=3, conv_filters=(3, 2), fc_units=4, classes=3)


def random_theta(r, arch=DEFAULT_ARCH):
    return init_target_weights(r, arch).astype(np.float64) + r.normal(0, 0.05, arch.layout.size)


def test_constraints_hold(f64, rng):
    g = gauge_fix(random_theta(rng))
    assert check_gauge(g)["max_residual"] < 1e-9


def test_idempotent(f64, rng):
    g = gauge_fix(random_theta(rng))
    np.testing.assert_allclose(gauge_fix(g), g, atol=1e-12)


def test_preserves_function(f64, rng):
    theta = random_theta(rng)
    x = rng.uniform(size=(4, 28, 28, 1))
    np.testing.assert_allclose(target_forward(x, gauge_fix(theta)).data, target_forward(x, theta).data, atol=1e-12)


def test_batch_matches_single(f64, rng):
    thetas = np.stack([random_theta(rng) for _ in range(3)])
    g = gauge_fix(thetas)
    for n in range(3):
        np.testing.assert_allclose(g[n], gauge_fix(thetas[n]), atol=1e-14)


def test_tensor_input_is_differentiable(f64, rng):
    w = rng.normal(size=TINY.layout.size)
    theta = rng.normal(size=(2, TINY.layout.size))
    rep = ad.grad_check(lambda t: (gauge_fix(t[0], TINY.layout) * w).sum(), [theta], samples=80, rng=0)
    assert rep["max"] < 1e-6


def test_wrong_length():
    with pytest.raises(ad.ShapeError):
        gauge_fix(np.zeros(10))


def test_zero_filter_stays_finite():
    theta = np.zeros(DEFAULT_ARCH.layout.size)
    assert np.all(np.isfinite(gauge_fix(theta)))


@given(seed=st.integers(0, 10_000))
def test_symmetry_invariance(seed):
    r = np.random.default_rng(seed)
    with ad.precision(np.float64):
        theta = random_theta(r, TINY)
        moved = random_trivial_symmetry(r, theta, TINY.layout)
        g1, g2 = gauge_fix(theta, TINY.layout), gauge_fix(moved, TINY.layout)
    np.testing.assert_allclose(g2, g1, atol=1e-10 * np.abs(g1).max())


@given(seed=st.integers(0, 10_000))
def test_symmetry_preserves_output(seed):
    r = np.random.default_rng(seed)
    with ad.precision(np.float64):
        theta = random_theta(r, TINY)
        moved = random_trivial_symmetry(r, theta, TINY.layout)
        x = r.uniform(size=(3, 8, 8, 1))
        np.testing.assert_allclose(target_forward(x, moved, TINY).data, target_forward(x, theta, TINY).data,
                                   atol=1e-12)

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from hypergen import autodiff as ad
from hypergen.target_net import (DEFAULT_ARCH, TargetArch, apply_logits_bias_symmetry, apply_scaling_symmetry,
                                 forward_logits, init_target_weights, nll, predict, target_accuracy,
                                 target_forward, target_loss, weight_counts)

TINY = TargetArch(image_size=8, kernel=3, conv_filters=(3, 2), fc_units=4, classes=3)


def oracle_logits(x, theta, arch):
    """Forward pass written directly from the documented flat layout."""
    k, pos, h = arch.kernel, 0, x.astype(np.float64)
    cin = arch.in_channels
    for f in arch.conv_filters:
        w = np.empty((f, k, k, cin))
        b = np.empty(f)
        for u in range(f):
            w[u] = theta[pos:pos + k * k * cin].reshape(k, k, cin)
            b[u] = theta[pos + k * k * cin]
            pos += k * k * cin + 1
        p = k // 2
        hp = np.pad(h, ((0, 0), (p, p), (p, p), (0, 0)))
        n, side = h.shape[0], h.shape[1]
        conv = np.zeros((n, side, side, f))
        for dy in range(k):
            for dx in range(k):
                conv += np.einsum("nijc,uc->niju", hp[:, dy:dy + side, dx:dx + side, :], w[:, dy, dx, :])
        act = np.maximum(conv + b, 0)
        out = -(-side // 2)
        padded = np.full((n, out * 2, out * 2, f), -np.inf)
        padded[:, :side, :side] = act
        h = padded.reshape(n, out, 2, out, 2, f).max(axis=(2, 4))
        cin = f
    flat = h.reshape(h.shape[0], -1)
    for units, last in ((arch.fc_units, False), (arch.classes, True)):
        fan = flat.shape[1]
        w = np.empty((units, fan))
        b = np.empty(units)
        for u in range(units):
            w[u] = theta[pos:pos + fan]
            b[u] = theta[pos + fan]
            pos += fan + 1
        flat = flat @ w.T + b
        if not last:
            flat = np.maximum(flat, 0)
    assert pos == len(theta)
    return flat


def test_weight_counts_exact():
    c = weight_counts()
    assert [c["layer1"], c["layer2"], c["layer3"], c["layer4"]] == [832, 12816, 6280, 90]
    assert c["total"] == 20018


def test_layout_indices_cover_vector():
    lay = DEFAULT_ARCH.layout
    seen = np.zeros(lay.size, dtype=int)
    for l, spec in enumerate(lay.layers, start=1):
        for i in range(spec.gen_filters):
            seen[list(lay.filter_range(l, i))] += 1
    assert (seen == 1).all()


def test_locate_roundtrip():
    lay = DEFAULT_ARCH.layout
    for idx in [0, 831, 832, 13647, 13648, 19927, 19928, 20017]:
        l, f, e = lay.locate(idx)
        assert lay.filter_range(l, f)[e] == idx


def test_forward_matches_oracle_tiny(f64, rng):
    theta = rng.normal(size=TINY.layout.size)
    x = rng.uniform(size=(4, 8, 8, 1))
    np.testing.assert_allclose(forward_logits(x, theta, TINY).data, oracle_logits(x, theta, TINY), atol=1e-10)


def test_forward_matches_oracle_default(f64, rng):
    theta = init_target_weights(rng) + rng.normal(0, 0.05, DEFAULT_ARCH.layout.size)
    x = rng.uniform(size=(3, 28, 28, 1))
    np.testing.assert_allclose(forward_logits(x, theta).data, oracle_logits(x, theta, DEFAULT_ARCH), atol=1e-9)


def test_batched_models_match_single(rng):
    thetas = rng.normal(0, 0.1, size=(3, DEFAULT_ARCH.layout.size)).astype(np.float32)
    x = rng.uniform(size=(5, 28, 28, 1)).astype(np.float32)
    batched = forward_logits(x, thetas).data
    for m in range(3):
        np.testing.assert_allclose(batched[m], forward_logits(x, thetas[m]).data, rtol=1e-5, atol=1e-5)


def test_zero_weights_give_uniform(rng):
    p = target_forward(rng.uniform(size=(4, 28, 28, 1)), np.zeros(20018)).data
    np.testing.assert_allclose(p, 0.1, atol=1e-7)
    assert target_loss(np.zeros(20018), rng.uniform(size=(4, 28, 28, 1)), [0, 1, 2, 3]).data == \
        pytest.approx(np.log(10), abs=1e-5)


def test_nll_floor(f64):
    logits = ad.Tensor(np.array([[0.0, 100.0]]))
    assert nll(logits, [0]).data[0] == pytest.approx(-np.log(1e-12))


def test_wrong_length_rejected(rng):
    with pytest.raises(ad.ShapeError):
        forward_logits(rng.uniform(size=(1, 28, 28, 1)), np.zeros(100))


def test_bad_label_rejected():
    with pytest.raises(ValueError):
        target_loss(np.zeros(20018), np.zeros((1, 28, 28, 1)), [10])


def test_predict_and_accuracy(rng):
    theta = rng.normal(0, 0.1, size=(2, 20018)).astype(np.float32)
    x = rng.uniform(size=(7, 28, 28, 1)).astype(np.float32)
    preds = predict(theta, x, chunk=3)
    np.testing.assert_array_equal(preds, forward_logits(x, theta).data.argmax(-1))
    acc = target_accuracy(theta, x, preds[0])
    assert acc[0] == 1.0


def test_target_gradient(f64, rng):
    x = rng.uniform(size=(2, 8, 8, 1))
    rep = ad.grad_check(lambda t: target_loss(t[0], x, [0, 2], TINY), [rng.normal(size=TINY.layout.size)],
                        samples=60, rng=0, step=1e-6)
    assert rep["max"] < 1e-5


def test_scaling_last_layer_rejected():
    with pytest.raises(ValueError):
        apply_scaling_symmetry(np.zeros(20018), 4, 0, 2.0)
    with pytest.raises(ValueError):
        apply_scaling_symmetry(np.zeros(20018), 1, 0, -1.0)


@given(l=st.integers(1, 3), i=st.integers(0, 7), alpha=st.floats(0.5, 2.0), seed=st.integers(0, 1000))
def test_scaling_symmetry_preserves_output(l, i, alpha, seed):
    r = np.random.default_rng(seed)
    with ad.precision(np.float64):
        theta = init_target_weights(r, TINY) + r.normal(0, 0.3, TINY.layout.size)
        i = i % TINY.layout.layer(l).units
        x = r.uniform(size=(3, 8, 8, 1))
        moved = apply_scaling_symmetry(theta, l, i, alpha, TINY.layout)
        np.testing.assert_allclose(target_forward(x, moved, TINY).data, target_forward(x, theta, TINY).data,
                                   atol=1e-12)


@given(c=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_logits_bias_symmetry_preserves_output(c, seed):
    r = np.random.default_rng(seed)
    with ad.precision(np.float64):
        theta = r.normal(0, 0.3, TINY.layout.size)
        x = r.uniform(size=(2, 8, 8, 1))
        moved = apply_logits_bias_symmetry(theta, c, TINY.layout)
        np.testing.assert_allclose(target_forward(x, moved, TINY).data, target_forward(x, theta, TINY).data,
                                   atol=1e-12)

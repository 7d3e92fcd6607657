import numpy as np
import pytest

from hypergen import autodiff as ad
from hypergen.hypernet import (DEFAULT_HYPERNET, HypernetArch, ToyArch, count_params, extractor_forward,
                               generate_weights, init_hypernet, init_toy, sample_noise, shrunken_arch,
                               split_codes, toy_forward)


def leaky(x, s=0.1):
    return np.where(x > 0, x, s * x)


def mlp_oracle(x, hp, name, depth):
    for j in range(depth):
        x = x @ hp.params[f"{name}.w{j}"].astype(np.float64)
        if j < depth - 1:
            st = hp.stats[f"{name}.bn{j}"]
            x = (x - st.mean) / np.sqrt(st.var + 1e-5)
            x = x * hp.params[f"{name}.bn{j}.scale"] + hp.params[f"{name}.bn{j}.shift"]
            x = leaky(x, hp.arch.leaky_slope)
    return x


def warmed(arch, rng, n=16):
    hp = init_hypernet(rng, arch)
    generate_weights(sample_noise(rng, n, arch.z_dim), hp, mode="train")
    return hp


def test_parameter_counts():
    c = count_params()
    assert [c[k] for k in ("E", "W1", "W2", "W3", "W4")] == [436500, 3240, 91600, 90000, 9900]
    assert c["batchnorm"] == 2400
    assert c["total"] == 633640


def test_init_matches_counts(rng):
    hp = init_hypernet(rng)
    assert sum(v.size for v in hp.params.values()) == 633640


def test_generated_shape(rng):
    hp = init_hypernet(rng)
    theta = generate_weights(sample_noise(rng, 3, 300), hp, mode="train")
    assert theta.shape == (3, 20018)


def test_generation_matches_recomputation(f64, rng):
    arch = shrunken_arch()
    hp = warmed(arch, rng)
    z = sample_noise(rng, 4, arch.z_dim)
    theta = generate_weights(z, hp, mode="infer").data
    codes = mlp_oracle(z, hp, "E", 2)
    lay = arch.target.layout
    for l, spec in enumerate(lay.layers, start=1):
        for i in range(spec.gen_filters):
            c = codes[:, list(arch.code_columns(l, i))]
            w = mlp_oracle(c, hp, f"W{l}", 2)
            r = lay.filter_range(l, i)
            np.testing.assert_allclose(theta[:, r.start:r.stop], w, atol=1e-10)


def test_infer_mode_is_per_sample(rng):
    arch = shrunken_arch()
    hp = warmed(arch, rng)
    z = sample_noise(rng, 5, arch.z_dim)
    batch = generate_weights(z, hp, mode="infer").data
    for n in range(5):
        np.testing.assert_allclose(generate_weights(z[n:n + 1], hp, mode="infer").data[0], batch[n], atol=1e-6)


def test_infer_needs_stats(rng):
    hp = init_hypernet(rng, shrunken_arch())
    with pytest.raises(ValueError):
        generate_weights(sample_noise(rng, 2, 8), hp, mode="infer")


def test_train_needs_two_samples(rng):
    hp = init_hypernet(rng, shrunken_arch())
    with pytest.raises(ValueError):
        generate_weights(sample_noise(rng, 1, 8), hp, mode="train")


def test_wrong_noise_dim(rng):
    hp = init_hypernet(rng, shrunken_arch())
    with pytest.raises(ad.ShapeError):
        extractor_forward(np.zeros((3, 5)), hp, mode="train")


def test_zero_init_generates_zeros(rng):
    hp = init_hypernet(rng, shrunken_arch(), init="zeros")
    theta = generate_weights(sample_noise(rng, 3, 8), hp, mode="train")
    assert np.all(theta.data == 0)


def test_split_codes_layout(rng):
    arch = shrunken_arch()
    codes = ad.Tensor(np.arange(2 * arch.code_dim * arch.code_count).reshape(2, -1))
    parts = split_codes(codes, arch)
    assert [p.shape[1] for p in parts] == arch.filters_per_layer
    np.testing.assert_array_equal(parts[1].data[0, 0], codes.data[0, list(arch.code_columns(2, 0))])


def test_determinism():
    a = generate_weights(sample_noise(np.random.default_rng(3), 4, 8), init_hypernet(np.random.default_rng(3),
                         shrunken_arch()), mode="train").data
    b = generate_weights(sample_noise(np.random.default_rng(3), 4, 8), init_hypernet(np.random.default_rng(3),
                         shrunken_arch()), mode="train").data
    np.testing.assert_array_equal(a, b)


def test_noise_range(rng):
    z = sample_noise(rng, 100, 300)
    assert z.min() >= -1 and z.max() <= 1 and z.shape == (100, 300)


def test_fanin_init_keeps_logits_moderate(rng):
    from hypergen.target_net import forward_logits

    hp = init_hypernet(rng)
    theta = generate_weights(sample_noise(rng, 4, 300), hp, mode="train").data
    logits = forward_logits(rng.uniform(size=(16, 28, 28, 1)), theta).data
    assert np.abs(logits).max() < 20


def test_arch_roundtrip():
    assert HypernetArch.from_dict(DEFAULT_HYPERNET.to_dict()) == DEFAULT_HYPERNET
    assert HypernetArch.from_dict(shrunken_arch().to_dict()) == shrunken_arch()


def test_toy_forward(rng):
    arch = ToyArch()
    params = init_toy(rng, arch)
    out = toy_forward(np.linspace(-1, 1, 7).reshape(7, 1), params, arch)
    assert out.shape == (7, 2)
    assert sum(v.size for v in params.values()) == (1 * 30 + 30) + (30 * 10 + 10) + (10 * 10 + 10) + (10 * 2 + 2)

"""Hypernetwork G(z; phi): extractor MLP -> per-filter codes -> shared weight generators.

The extractor output is read layer-major, filter-major: the code of filter
``i`` in layer ``l`` occupies columns ``code_dim * (filters before layer l + i)``
onward.  Weight generator ``W_l`` is applied to every code of layer ``l`` and
its outputs are written, in filter order, into the flat weight layout of
:mod:`hypergen.target_net`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .target_net import DEFAULT_ARCH, TargetArch


@dataclass(frozen=True)
class HypernetArch:
    target: TargetArch = DEFAULT_ARCH
    z_dim: int = 300
    code_dim: int = 15
    extractor_hidden: tuple = (300, 300)
    generator_hidden: tuple = ((40, 40), (100, 100), (100, 100), (60, 60))
    leaky_slope: float = 0.1

    @property
    def filters_per_layer(self) -> list:
        return [spec.gen_filters for spec in self.target.layout.layers]

    @property
    def code_count(self) -> int:
        return sum(self.filters_per_layer)

    def subnet_sizes(self) -> dict:
        """Layer widths ``(in, hidden..., out)`` of every sub-network."""
        sizes = {"E": (self.z_dim, *self.extractor_hidden, self.code_dim * self.code_count)}
        for l, (spec, hidden) in enumerate(zip(self.target.layout.layers, self.generator_hidden), start=1):
            sizes[f"W{l}"] = (self.code_dim, *hidden, spec.filter_size)
        return sizes

    def code_columns(self, l: int, i: int) -> range:
        before = sum(self.filters_per_layer[: l - 1]) + i
        return range(before * self.code_dim, (before + 1) * self.code_dim)

    def to_dict(self) -> dict:
        t = self.target
        return {
            "target": {"image_size": t.image_size, "in_channels": t.in_channels, "kernel": t.kernel,
                       "conv_filters": list(t.conv_filters), "fc_units": t.fc_units, "classes": t.classes},
            "z_dim": self.z_dim, "code_dim": self.code_dim,
            "extractor_hidden": list(self.extractor_hidden),
            "generator_hidden": [list(h) for h in self.generator_hidden],
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypernetArch":
        t = dict(d["target"])
        t["conv_filters"] = tuple(t["conv_filters"])
        return cls(target=TargetArch(**t), z_dim=d["z_dim"], code_dim=d["code_dim"],
                   extractor_hidden=tuple(d["extractor_hidden"]),
                   generator_hidden=tuple(tuple(h) for h in d["generator_hidden"]),
                   leaky_slope=d["leaky_slope"])


DEFAULT_HYPERNET = HypernetArch()


def shrunken_arch() -> HypernetArch:
    """Tiny variant (8x8 inputs, z dim 8, code dim 3) for finite-difference checks."""
    target = TargetArch(image_size=8, kernel=3, conv_filters=(3, 2), fc_units=4, classes=3)
    return HypernetArch(target=target, z_dim=8, code_dim=3, extractor_hidden=(6,),
                        generator_hidden=((4,), (4,), (4,), (4,)))


@dataclass
class HypernetParams:
    """Trainable matrices and batch-norm affine parameters plus running statistics."""

    arch: HypernetArch
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def leaves(self) -> dict:
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def copy(self) -> "HypernetParams":
        stats = {k: RunningStats(s.momentum,
                                 None if s.mean is None else s.mean.copy(),
                                 None if s.var is None else s.var.copy())
                 for k, s in self.stats.items()}
        return HypernetParams(self.arch, {k: v.copy() for k, v in self.params.items()}, stats)


def _glorot(rng, fan_in, fan_out, dtype):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)


def init_hypernet(rng: np.random.Generator, arch: HypernetArch = DEFAULT_HYPERNET,
                  init: str = "fanin", momentum: float = 0.99) -> HypernetParams:
    """Glorot-uniform matrices, unit batch-norm scales, zero shifts.

    ``init="fanin"`` (default) redraws the output matrix of each weight
    generator W_l from N(0, 2 / (hidden * fan_in_l)), where fan_in_l is the
    input count of a target unit in layer l.  Generated weights then start at
    roughly 1/sqrt(fan_in_l) scale instead of O(1), which would saturate the
    target logits.  ``init="zeros"`` gives an all-zero phi.
    """
    dtype = ad.get_dtype()
    params, stats = {}, {}
    for name, sizes in arch.subnet_sizes().items():
        for j, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if init in ("glorot", "fanin"):
                params[f"{name}.w{j}"] = _glorot(rng, a, b, dtype)
                if init == "fanin" and name != "E" and j == len(sizes) - 2:
                    fan = arch.target.layout.layer(int(name[1:])).unit_size - 1
                    w = rng.normal(0.0, np.sqrt(2.0 / (a * fan)), size=(a, b))
                    params[f"{name}.w{j}"] = w.astype(dtype)
            elif init == "zeros":
                params[f"{name}.w{j}"] = np.zeros((a, b), dtype=dtype)
            else:
                raise ValueError(f"unknown init {init!r}")
            if j < len(sizes) - 2:
                params[f"{name}.bn{j}.scale"] = np.ones(b, dtype=dtype)
                params[f"{name}.bn{j}.shift"] = np.zeros(b, dtype=dtype)
                stats[f"{name}.bn{j}"] = RunningStats(momentum)
    return HypernetParams(arch, params, stats)


def count_params(arch: HypernetArch = DEFAULT_HYPERNET) -> dict:
    """Parameter counts per sub-network (matrices only), batch norm, and totals."""
    counts, bn = {}, 0
    for name, sizes in arch.subnet_sizes().items():
        counts[name] = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
        bn += 2 * sum(sizes[1:-1])
    counts["without_batchnorm"] = sum(counts.values())
    counts["batchnorm"] = bn
    counts["total"] = counts["without_batchnorm"] + bn
    return counts


def sample_noise(rng: np.random.Generator, batch: int, dim: int) -> np.ndarray:
    if batch < 1:
        raise ValueError("batch must be at least 1")
    return rng.uniform(-1.0, 1.0, size=(batch, dim)).astype(ad.get_dtype())


def _mlp(x: Tensor, name: str, depth: int, leaves: dict, hp: HypernetParams, mode: str,
         slope: float, update_stats: bool) -> Tensor:
    for j in range(depth):
        x = x @ leaves[f"{name}.w{j}"]
        if j < depth - 1:
            x = ad.batchnorm(x, leaves[f"{name}.bn{j}.scale"], leaves[f"{name}.bn{j}.shift"],
                             mode=mode, state=hp.stats[f"{name}.bn{j}"], update_stats=update_stats)
            x = ad.leaky_relu(x, slope)
    return x


def _resolve(hp: HypernetParams, leaves: Optional[dict]) -> dict:
    if leaves is not None:
        return leaves
    return {k: Tensor(v) for k, v in hp.params.items()}


def extractor_forward(z, hp: HypernetParams, mode: str = "infer", leaves: Optional[dict] = None,
                      update_stats: bool = True) -> Tensor:
    """(N, z_dim) noise -> (N, code_dim * code_count) concatenated codes."""
    z = ad.as_tensor(z)
    arch = hp.arch
    if z.ndim != 2 or z.shape[1] != arch.z_dim:
        raise ad.ShapeError("extractor_forward", z.shape, detail=f"expected (N, {arch.z_dim})")
    depth = len(arch.extractor_hidden) + 1
    return _mlp(z, "E", depth, _resolve(hp, leaves), hp, mode, arch.leaky_slope, update_stats)


def split_codes(codes: Tensor, arch: HypernetArch) -> list:
    """Per-layer (N, filters, code_dim) views of the extractor output."""
    out, start = [], 0
    n = codes.shape[0]
    for f in arch.filters_per_layer:
        stop = start + f * arch.code_dim
        out.append(codes[:, start:stop].reshape(n, f, arch.code_dim))
        start = stop
    return out


def generate_weights(z, hp: HypernetParams, mode: str = "infer", leaves: Optional[dict] = None,
                     update_stats: bool = True) -> Tensor:
    """(N, z_dim) noise -> (N, D) target weight vectors."""
    arch = hp.arch
    leaves = _resolve(hp, leaves)
    codes = extractor_forward(z, hp, mode, leaves, update_stats)
    n = codes.shape[0]
    blocks = []
    for l, (c, hidden) in enumerate(zip(split_codes(codes, arch), arch.generator_hidden), start=1):
        f = c.shape[1]
        w = _mlp(c.reshape(n * f, arch.code_dim), f"W{l}", len(hidden) + 1, leaves, hp, mode,
                 arch.leaky_slope, update_stats)
        blocks.append(w.reshape(n, -1))
    return ad.concat(blocks, axis=1)


# ---------------------------------------------------------------- toy problem


@dataclass(frozen=True)
class ToyArch:
    z_dim: int = 1
    hidden: tuple = (30, 10, 10)
    out_dim: int = 2
    leaky_slope: float = 0.1

    @property
    def sizes(self) -> tuple:
        return (self.z_dim, *self.hidden, self.out_dim)

    def to_dict(self) -> dict:
        return {"z_dim": self.z_dim, "hidden": list(self.hidden), "out_dim": self.out_dim,
                "leaky_slope": self.leaky_slope}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyArch":
        return cls(d["z_dim"], tuple(d["hidden"]), d["out_dim"], d["leaky_slope"])


def init_toy(rng: np.random.Generator, arch: ToyArch = ToyArch()) -> dict:
    dtype = ad.get_dtype()
    params = {}
    for j, (a, b) in enumerate(zip(arch.sizes[:-1], arch.sizes[1:])):
        params[f"w{j}"] = _glorot(rng, a, b, dtype)
        params[f"b{j}"] = np.zeros(b, dtype=dtype)
    return params


def toy_forward(z, params: dict, arch: ToyArch = ToyArch()) -> Tensor:
    """Plain MLP with biases and leaky-ReLU hidden layers, no batch norm."""
    x = ad.as_tensor(z)
    depth = len(arch.sizes) - 1
    for j in range(depth):
        x = x @ ad.as_tensor(params[f"w{j}"]) + ad.as_tensor(params[f"b{j}"])
        if j < depth - 1:
            x = ad.leaky_relu(x, arch.leaky_slope)
    return x

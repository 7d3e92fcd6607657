"""Gauge fixing for the scaling and logits-bias symmetries of the target net.

Filters of every layer except the last are rescaled so that their squared norm
(bias included) equals their element count; the removed scale is pushed into
the matching input channel of the next layer.  Layers are processed in order
1, 2, ... because rescaling layer ``l`` changes the norms of layer ``l + 1``.
Finally the last-layer biases are shifted to sum to zero.

Squared norms are floored at ``eps`` so all-zero filters stay finite.  The
floor leaves every other filter exact; an additive ``eps`` would bias the
norm of small filters and the bias compounds from layer to layer.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .target_net import DEFAULT_ARCH, Layout, apply_logits_bias_symmetry, apply_scaling_symmetry

GAUGE_EPS = 1e-8


def gauge_fix(theta, layout: Optional[Layout] = None, eps: float = GAUGE_EPS):
    """Canonical representative of ``theta`` (D,) or (N, D).

    Accepts an array (returns a new array) or a :class:`Tensor` (returns a
    differentiable Tensor).
    """
    layout = layout or DEFAULT_ARCH.layout
    as_array = not isinstance(theta, Tensor)
    t = ad.as_tensor(np.array(theta, copy=True) if as_array else theta)
    if t.shape[-1] != layout.size:
        raise ad.ShapeError("gauge_fix", t.shape, detail=f"weight vector length must be {layout.size}")
    single = t.ndim == 1
    if single:
        t = t.reshape(1, -1)
    n = t.shape[0]
    specs = layout.layers
    blocks = [t[:, s.offset:s.stop].reshape(n, s.units, s.unit_size) for s in specs]

    for l in range(len(specs) - 1):
        spec, nxt = specs[l], specs[l + 1]
        sq = ad.square(blocks[l]).sum(axis=-1)
        alpha = ad.sqrt(spec.unit_size / ad.clamp_min(sq, eps))          # (n, units)
        blocks[l] = blocks[l] * alpha.reshape(n, spec.units, 1)
        w = blocks[l + 1][:, :, :-1].reshape(n, nxt.units, nxt.in_spatial, nxt.in_channels)
        w = w / alpha.reshape(n, 1, 1, nxt.in_channels)
        blocks[l + 1] = ad.concat([w.reshape(n, nxt.units, -1), blocks[l + 1][:, :, -1:]], axis=-1)

    last = blocks[-1]
    bias = last[:, :, -1:]
    bias = bias - bias.mean(axis=1, keepdims=True)
    blocks[-1] = ad.concat([last[:, :, :-1], bias], axis=-1)

    out = ad.concat([b.reshape(n, -1) for b in blocks], axis=1)
    if single:
        out = out.reshape(-1)
    return out.data if as_array else out


def check_gauge(theta, layout: Optional[Layout] = None) -> dict:
    """Residuals of the gauge constraints for a single weight vector.

    ``layers`` maps layer number to ``|sum_k theta^2 - n|`` per filter;
    ``logits_bias_sum`` is the sum of the last-layer biases.
    """
    layout = layout or DEFAULT_ARCH.layout
    theta = np.asarray(theta, dtype=np.float64)
    report = {"layers": {}}
    for l, spec in enumerate(layout.layers[:-1], start=1):
        block = theta[spec.offset:spec.stop].reshape(spec.units, spec.unit_size)
        report["layers"][l] = np.abs((block ** 2).sum(axis=1) - spec.unit_size)
    report["logits_bias_sum"] = float(theta[layout.bias_indices(len(layout.layers))].sum())
    report["max_residual"] = max(max(float(r.max()) for r in report["layers"].values()),
                                 abs(report["logits_bias_sum"]))
    return report


def random_trivial_symmetry(rng: np.random.Generator, theta: np.ndarray, layout: Optional[Layout] = None,
                            scale_prob: float = 0.5, alpha_range=(0.5, 2.0), shift_range=(-1.0, 1.0),
                            shift: bool = True) -> np.ndarray:
    """Random composition of filter scalings and a logits-bias shift.

    Each filter of layers 1..m-1 is scaled with probability ``scale_prob`` by a
    log-uniform factor from ``alpha_range``.
    """
    layout = layout or DEFAULT_ARCH.layout
    out = np.array(theta, copy=True)
    lo, hi = np.log(alpha_range[0]), np.log(alpha_range[1])
    for l, spec in enumerate(layout.layers[:-1], start=1):
        for i in range(spec.units):
            if rng.random() < scale_prob:
                out = apply_scaling_symmetry(out, l, i, float(np.exp(rng.uniform(lo, hi))), layout)
    if shift:
        out = apply_logits_bias_symmetry(out, float(rng.uniform(*shift_range)), layout)
    return out

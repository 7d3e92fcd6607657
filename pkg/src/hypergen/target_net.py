"""The fixed MNIST convnet evaluated with externally supplied flat weights.

Flat weight layout (layer-major, then output-unit-major)::

    layer 1  conv 5x5, 32 units    unit = [k, k, C_in] kernel row-major, then bias
    layer 2  conv 5x5, 16 units    same
    layer 3  fc, 8 units           unit = pooled map flattened (h, w, c), then bias
    layer 4  fc, 10 units          unit = 8 weights, then bias

Within a unit the weights are ordered ``spatial * C_in + channel`` so the
weights reading channel ``c`` of the previous layer sit at ``s * C_in + c``.
The last layer is treated as one generator "filter" of 90 elements.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_PROB_FLOOR = float(np.log(1e-12))


@dataclass(frozen=True)
class TargetArch:
    image_size: int = 28
    in_channels: int = 1
    kernel: int = 5
    conv_filters: tuple = (32, 16)
    fc_units: int = 8
    classes: int = 10

    @cached_property
    def layout(self) -> "Layout":
        return Layout.build(self)

    @property
    def input_shape(self) -> tuple:
        return (self.image_size, self.image_size, self.in_channels)


@dataclass(frozen=True)
class LayerSpec:
    kind: str            # "conv" or "fc"
    units: int           # output channels / neurons
    in_spatial: int      # spatial positions read per input channel
    in_channels: int
    offset: int          # first flat index of the layer
    gen_filters: int     # filters as seen by the weight generator
    spatial_shape: tuple = ()

    @property
    def unit_size(self) -> int:
        return self.in_spatial * self.in_channels + 1

    @property
    def size(self) -> int:
        return self.units * self.unit_size

    @property
    def filter_size(self) -> int:
        return self.size // self.gen_filters

    @property
    def stop(self) -> int:
        return self.offset + self.size


class Layout:
    """Maps flat weight indices to (layer, filter, element) and back.

    Layers are numbered from 1 in the public methods.
    """

    def __init__(self, layers: list):
        self.layers = layers
        self.size = layers[-1].stop

    @classmethod
    def build(cls, arch: TargetArch) -> "Layout":
        k = arch.kernel
        layers, offset = [], 0
        cin, side = arch.in_channels, arch.image_size
        for f in arch.conv_filters:
            spec = LayerSpec("conv", f, k * k, cin, offset, f, (k, k))
            layers.append(spec)
            offset = spec.stop
            cin, side = f, -(-side // 2)
        spec = LayerSpec("fc", arch.fc_units, side * side, cin, offset, arch.fc_units, (side, side))
        layers.append(spec)
        offset = spec.stop
        layers.append(LayerSpec("fc", arch.classes, 1, arch.fc_units, offset, 1, (1, 1)))
        return cls(layers)

    def __len__(self):
        return self.size

    def layer(self, l: int) -> LayerSpec:
        if not 1 <= l <= len(self.layers):
            raise IndexError(f"layer {l} out of range 1..{len(self.layers)}")
        return self.layers[l - 1]

    def weight_counts(self) -> list:
        return [spec.size for spec in self.layers]

    def filter_range(self, l: int, i: int) -> range:
        """Flat indices of generator filter ``i`` of layer ``l`` (bias included)."""
        spec = self.layer(l)
        if not 0 <= i < spec.gen_filters:
            raise IndexError(f"filter {i} out of range for layer {l}")
        start = spec.offset + i * spec.filter_size
        return range(start, start + spec.filter_size)

    def unit_range(self, l: int, j: int) -> range:
        spec = self.layer(l)
        if not 0 <= j < spec.units:
            raise IndexError(f"unit {j} out of range for layer {l}")
        start = spec.offset + j * spec.unit_size
        return range(start, start + spec.unit_size)

    def bias_indices(self, l: int) -> np.ndarray:
        spec = self.layer(l)
        return spec.offset + np.arange(spec.units) * spec.unit_size + spec.unit_size - 1

    def channel_indices(self, l: int, i: int) -> np.ndarray:
        """Flat indices in layer ``l + 1`` that read output channel ``i`` of layer ``l``."""
        if l >= len(self.layers):
            raise IndexError("the last layer has no next layer")
        if not 0 <= i < self.layer(l).units:
            raise IndexError(f"channel {i} out of range for layer {l}")
        nxt = self.layer(l + 1)
        units = np.arange(nxt.units)[:, None]
        spatial = np.arange(nxt.in_spatial)[None, :]
        return (nxt.offset + units * nxt.unit_size + spatial * nxt.in_channels + i).ravel()

    def locate(self, index: int) -> tuple:
        """(layer, filter, element) of a flat index."""
        for l, spec in enumerate(self.layers, start=1):
            if spec.offset <= index < spec.stop:
                rel = index - spec.offset
                return l, rel // spec.filter_size, rel % spec.filter_size
        raise IndexError(index)


DEFAULT_ARCH = TargetArch()


def weight_counts(arch: TargetArch = DEFAULT_ARCH) -> dict:
    counts = {f"layer{l}": n for l, n in enumerate(arch.layout.weight_counts(), start=1)}
    counts["total"] = sum(arch.layout.weight_counts())
    return counts


def _check_theta(theta, layout: Layout):
    if theta.shape[-1] != layout.size:
        raise ad.ShapeError("target_forward", theta.shape,
                            detail=f"weight vector length must be {layout.size}")


def _unpack(theta: Tensor, layout: Layout):
    """Split (M, D) weights into per-layer (kernel-or-matrix, bias) tensors."""
    m = theta.shape[0]
    out = []
    for spec in layout.layers:
        block = theta[:, spec.offset:spec.stop].reshape(m, spec.units, spec.unit_size)
        w = block[:, :, :-1]
        b = block[:, :, -1]
        if spec.kind == "conv":
            k = spec.spatial_shape[0]
            w = w.reshape(m, spec.units, k, k, spec.in_channels).transpose(0, 2, 3, 4, 1)
            b = b.reshape(m, 1, 1, 1, spec.units)
        else:
            w = w.transpose(0, 2, 1)
            b = b.reshape(m, 1, spec.units)
        out.append((w, b))
    return out


def forward_logits(x, theta, arch: TargetArch = DEFAULT_ARCH) -> Tensor:
    """Logits of the target net.

    ``theta`` is (D,) or (M, D).  ``x`` is (B, H, W, C), shared by all models,
    or (M, B, H, W, C) with one image batch per model.  The result is (B, K)
    for a single weight vector and (M, B, K) otherwise.
    """
    layout = arch.layout
    theta = ad.as_tensor(theta)
    x = ad.as_tensor(x)
    _check_theta(theta, layout)
    single = theta.ndim == 1
    if single:
        theta = theta.reshape(1, -1)
    m = theta.shape[0]
    if x.ndim == 4:
        if x.shape[1:] != arch.input_shape:
            raise ad.ShapeError("target_forward", x.shape, detail=f"images must be B x {arch.input_shape}")
        if x.requires_grad:
            x = x.reshape((1,) + x.shape)
            if m != 1:
                raise ad.ShapeError("target_forward", x.shape, theta.shape)
        else:
            x = Tensor(np.broadcast_to(x.data, (m,) + x.shape))
    elif x.ndim == 5:
        if x.shape[0] != m or x.shape[2:] != arch.input_shape:
            raise ad.ShapeError("target_forward", x.shape, theta.shape)
    else:
        raise ad.ShapeError("target_forward", x.shape, detail="images must be B x H x W x C")

    params = _unpack(theta, layout)
    h = x
    for (w, b), spec in zip(params, layout.layers):
        if spec.kind == "conv":
            # pooling first is equivalent (bias is per channel, relu is monotone) and cheaper
            h = ad.relu(ad.maxpool2d(ad.conv2d(h, w), 2) + b)
        else:
            if h.ndim == 5:
                h = h.reshape(m, h.shape[1], -1)
            h = h @ w + b
            if spec is not layout.layers[-1]:
                h = ad.relu(h)
    if single:
        h = h.reshape(h.shape[1:])
    return h


def target_forward(x, theta, arch: TargetArch = DEFAULT_ARCH) -> Tensor:
    """Class probabilities T(x; theta)."""
    return ad.softmax(forward_logits(x, theta, arch), axis=-1)


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in 0..{classes - 1}")
    return (labels[..., None] == np.arange(classes)).astype(ad.get_dtype())


def nll(logits: Tensor, labels) -> Tensor:
    """Per-example -log p(y|x) with the probability floored at 1e-12."""
    logp = ad.clamp_min(ad.log_softmax(logits, axis=-1), LOG_PROB_FLOOR)
    onehot = _one_hot(labels, logits.shape[-1])
    return -(logp * onehot).sum(axis=-1)


def target_loss(theta, images, labels, arch: TargetArch = DEFAULT_ARCH) -> Tensor:
    """Mean negative log likelihood over the batch (and over models, if batched)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("target_loss: empty batch")
    return nll(forward_logits(images, theta, arch), labels).mean()


def predict(theta, images, arch: TargetArch = DEFAULT_ARCH, chunk: int = 2048) -> np.ndarray:
    """Argmax class predictions (lowest index wins ties); no graph is kept.

    ``theta`` (D,) gives (N,), ``theta`` (M, D) gives (M, N).
    """
    theta = np.asarray(theta, dtype=ad.get_dtype())
    images = np.asarray(images)
    single = theta.ndim == 1
    thetas = theta.reshape(1, -1) if single else theta
    mchunk = max(1, min(len(thetas), 8))
    ichunk = max(1, chunk // mchunk)
    preds = np.empty((len(thetas), len(images)), dtype=np.int64)
    for a in range(0, len(thetas), mchunk):
        th = thetas[a:a + mchunk]
        for b in range(0, len(images), ichunk):
            logits = forward_logits(images[b:b + ichunk], th, arch).data
            preds[a:a + mchunk, b:b + ichunk] = logits.argmax(axis=-1)
    return preds[0] if single else preds


def target_accuracy(theta, images, labels, arch: TargetArch = DEFAULT_ARCH):
    """Fraction of argmax-correct examples; an array of accuracies for (M, D) weights."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("target_accuracy: empty dataset")
    return (predict(theta, images, arch) == labels).mean(axis=-1)


def apply_scaling_symmetry(theta: np.ndarray, l: int, i: int, alpha: float,
                           layout: Optional[Layout] = None) -> np.ndarray:
    """Scale filter (l, i) by ``alpha`` and its outgoing channel weights by ``1/alpha``."""
    layout = layout or DEFAULT_ARCH.layout
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if l >= len(layout.layers):
        raise ValueError("the last layer has no scaling symmetry")
    out = np.array(theta, copy=True)
    r = layout.unit_range(l, i)
    out[..., r.start:r.stop] *= alpha
    out[..., layout.channel_indices(l, i)] /= alpha
    return out


def apply_logits_bias_symmetry(theta: np.ndarray, c: float,
                               layout: Optional[Layout] = None) -> np.ndarray:
    layout = layout or DEFAULT_ARCH.layout
    out = np.array(theta, copy=True)
    out[..., layout.bias_indices(len(layout.layers))] += c
    return out


def init_target_weights(rng: np.random.Generator, arch: TargetArch = DEFAULT_ARCH) -> np.ndarray:
    """Glorot-uniform weights, zero biases, for training the target net directly."""
    layout = arch.layout
    theta = np.zeros(layout.size, dtype=ad.get_dtype())
    for spec in layout.layers:
        fan_in = spec.unit_size - 1
        fan_out = spec.units * (spec.in_spatial if spec.kind == "conv" else 1)
        s = np.sqrt(6.0 / (fan_in + fan_out))
        block = theta[spec.offset:spec.stop].reshape(spec.units, spec.unit_size)
        block[:, :-1] = rng.uniform(-s, s, size=(spec.units, fan_in))
    return theta

"""Post-training analyses over a frozen hypernetwork.

CSV schemas written by the ``write_*`` helpers:

* histogram samples: ``sample,accuracy``
* histogram bins:    ``bin_start,bin_end,count``
* pca:               ``sample,pc1,...,pck`` plus ``component,explained_variance_ratio``
* paths:             ``pair,step,t,kind,accuracy``  (kind is ``direct`` or ``interpolated``)
* ensemble:          ``member,accuracy`` with a final ``ensemble`` row
* adversarial:       ``epsilon,single_success,ensemble_success``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypernet import HypernetParams, generate_weights, sample_noise
from .target_net import Layout, forward_logits, nll, predict, target_accuracy

FGSM_EPSILONS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16, 0.18, 0.2, 0.22, 0.24)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def sample_weights(hp: HypernetParams, n: int, rng: np.random.Generator, chunk: int = 256) -> np.ndarray:
    """``n`` inference-mode weight vectors, shape (n, D)."""
    z = sample_noise(rng, n, hp.arch.z_dim)
    return generate(hp, z, chunk)


def generate(hp: HypernetParams, z: np.ndarray, chunk: int = 256) -> np.ndarray:
    z = np.atleast_2d(z)
    return np.concatenate([generate_weights(z[a:a + chunk], hp, mode="infer").data
                           for a in range(0, len(z), chunk)])


# ------------------------------------------------------------------ histogram


def accuracy_histogram(hp: HypernetParams, images, labels, samples: int = 100, bin_width: float = 0.001,
                       rng: Optional[np.random.Generator] = None):
    """Accuracies of ``samples`` generated nets and their binned counts.

    Returns ``(accuracies, bins)`` where ``bins`` is a list of
    ``(start, end, count)`` covering [min, max] in steps of ``bin_width``.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = rng or np.random.default_rng(0)
    accs = np.atleast_1d(target_accuracy(sample_weights(hp, samples, rng), images, labels, hp.arch.target))
    return accs, histogram_bins(accs, bin_width)


def histogram_bins(values, bin_width: float) -> list:
    values = np.asarray(values, dtype=np.float64)
    lo = np.floor(values.min() / bin_width)
    hi = np.floor(values.max() / bin_width)
    idx = (np.floor(values / bin_width) - lo).astype(np.int64)
    counts = np.bincount(idx, minlength=int(hi - lo) + 1)
    return [((lo + k) * bin_width, (lo + k + 1) * bin_width, int(c)) for k, c in enumerate(counts)]


# ------------------------------------------------------------------ filters


def filter_slices(theta: np.ndarray, layout: Layout, layer: int, index: int, channel: int = 0) -> np.ndarray:
    """Slice of filter ``index`` of ``layer`` for every row of ``theta``.

    Conv layers give (N, k, k) for one input channel; fc layers give the
    (N, fan_in) weight row.  Biases are not included.
    """
    theta = np.atleast_2d(theta)
    if not 1 <= layer <= len(layout.layers) - 1:
        raise ValueError(f"layer must be in 1..{len(layout.layers) - 1}, got {layer}")
    spec = layout.layer(layer)
    if not 0 <= index < spec.units:
        raise ValueError(f"filter index {index} out of range for layer {layer} ({spec.units} filters)")
    if not 0 <= channel < spec.in_channels:
        raise ValueError(f"channel {channel} out of range for layer {layer} ({spec.in_channels} channels)")
    r = layout.unit_range(layer, index)
    unit = theta[:, r.start:r.stop - 1]
    if spec.kind == "conv":
        k = int(round(np.sqrt(spec.in_spatial)))
        return unit.reshape(len(theta), k, k, spec.in_channels)[..., channel]
    return unit


def dump_filter_samples(hp: HypernetParams, layer: int, index: int, count: int = 25, channel: int = 0,
                        rng: Optional[np.random.Generator] = None, path=None) -> np.ndarray:
    """``count`` generated slices of one filter; optionally written as a numeric grid file.

    The file has a ``#`` header line, then one block per sample (rows of
    space-separated values) with blocks separated by blank lines.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = rng or np.random.default_rng(0)
    slices = filter_slices(sample_weights(hp, count, rng), hp.arch.target.layout, layer, index, channel)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(f"# layer {layer} filter {index} channel {channel} samples {count} shape {slices.shape[1:]}\n")
            for k, s in enumerate(slices):
                if k:
                    fh.write("\n")
                for row in np.atleast_2d(s):
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    return slices


def read_filter_grid(path) -> np.ndarray:
    blocks, cur = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            continue
        if not line.strip():
            blocks.append(cur)
            cur = []
            continue
        cur.append([float(v) for v in line.split()])
    if cur:
        blocks.append(cur)
    return np.squeeze(np.array(blocks), axis=1) if len(blocks[0]) == 1 else np.array(blocks)


# ------------------------------------------------------------------ PCA


@dataclass
class PCAResult:
    projections: np.ndarray      # (N, k)
    components: np.ndarray       # (k, D') unit principal directions
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    indices: np.ndarray          # flat weight indices used


def resolve_selector(selector, layout: Layout, dim: int) -> np.ndarray:
    """``"all"``, ``"layer:l"`` or ``"filter:l:i"`` to flat weight indices."""
    if selector in (None, "all"):
        return np.arange(dim)
    parts = str(selector).split(":")
    try:
        if parts[0] == "layer" and len(parts) == 2:
            spec = layout.layer(int(parts[1]))
            return np.arange(spec.offset, spec.stop)
        if parts[0] == "filter" and len(parts) == 3:
            return np.asarray(layout.filter_range(int(parts[1]), int(parts[2])))
    except (ValueError, IndexError) as exc:
        raise ValueError(f"bad selector {selector!r}: {exc}") from None
    raise ValueError(f"bad selector {selector!r}; use all, layer:L or filter:L:I")


def pca(samples: np.ndarray, k: Optional[int] = None) -> tuple:
    """Gram-matrix PCA of (N, D) samples.

    Returns ``(projections (N, k), components (k, D), ratios (k,), mean)``.
    Each component's largest-magnitude loading is made positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n < 2:
        raise ValueError("pca needs an (N, D) array with N >= 2")
    k = min(n - 1, x.shape[1]) if k is None else k
    if not 1 <= k <= min(n, x.shape[1]):
        raise ValueError(f"cannot take {k} components from {n} samples in {x.shape[1]} dims")
    mean = x.mean(axis=0)
    xc = x - mean
    evals, evecs = np.linalg.eigh(xc @ xc.T)
    order = np.argsort(evals)[::-1][:k]
    evals = np.clip(evals[order], 0.0, None)
    u = evecs[:, order]
    total = float(np.trace(xc @ xc.T))
    scale = np.sqrt(evals)
    safe = np.where(scale > 0, scale, 1.0)
    comps = (xc.T @ u / safe).T                              # (k, D)
    comps[scale == 0] = 0.0
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    flip[flip == 0] = 1.0
    comps *= flip[:, None]
    proj = u * scale * flip
    ratios = evals / total if total > 0 else np.zeros(k)
    return proj, comps, ratios, mean


def pca_scatter(samples: np.ndarray, layout: Optional[Layout] = None, selector="all", k: int = 2) -> PCAResult:
    samples = np.asarray(samples)
    idx = resolve_selector(selector, layout, samples.shape[1])
    proj, comps, ratios, mean = pca(samples[:, idx], k)
    return PCAResult(proj, comps, ratios, mean, idx)


# ------------------------------------------------------------------ paths


@dataclass(frozen=True)
class PathSpec:
    z1: np.ndarray
    z2: np.ndarray
    steps: int = 100

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("a path needs at least 2 steps")

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps)


def path_weights(hp: HypernetParams, spec: PathSpec) -> dict:
    """Weight vectors along both paths, keyed ``direct`` and ``interpolated``.

    The direct path is G(z1) t + G(z2) (1 - t); the interpolated path is
    G(z1 t + z2 (1 - t)).  Both reuse the same generated endpoints so they
    agree exactly at t = 0 and t = 1.
    """
    t = spec.t[:, None]
    z1 = np.asarray(spec.z1, dtype=ad.get_dtype()).reshape(1, -1)
    z2 = np.asarray(spec.z2, dtype=ad.get_dtype()).reshape(1, -1)
    ends = generate(hp, np.concatenate([z1, z2]))
    g1, g2 = ends[:1], ends[1:]
    direct = g1 * t + g2 * (1.0 - t)
    direct[0], direct[-1] = g2[0], g1[0]
    interp = np.empty_like(direct)
    if spec.steps > 2:
        zt = (z1 * t[1:-1] + z2 * (1.0 - t[1:-1])).astype(ad.get_dtype())
        interp[1:-1] = generate(hp, zt)
    interp[0], interp[-1] = g2[0], g1[0]
    return {"direct": direct, "interpolated": interp}


def path_accuracies(hp: HypernetParams, spec: PathSpec, images, labels) -> dict:
    """Accuracy at every step of both paths plus the ``t`` grid."""
    w = path_weights(hp, spec)
    out = {"t": spec.t}
    for kind, thetas in w.items():
        out[kind] = np.asarray(target_accuracy(thetas, images, labels, hp.arch.target))
    return out


def path_experiment(hp: HypernetParams, images, labels, pairs: int = 10, steps: int = 100,
                    rng: Optional[np.random.Generator] = None) -> list:
    rng = rng or np.random.default_rng(0)
    results = []
    for _ in range(pairs):
        z = sample_noise(rng, 2, hp.arch.z_dim)
        results.append(path_accuracies(hp, PathSpec(z[0], z[1], steps), images, labels))
    return results


def path_rows(results: list) -> list:
    rows = []
    for p, res in enumerate(results):
        for kind in ("direct", "interpolated"):
            for s, (t, a) in enumerate(zip(res["t"], res[kind])):
                rows.append([p, s, float(t), kind, float(a)])
    return rows


# ------------------------------------------------------------------ ensembles


@dataclass(frozen=True)
class EnsembleSpec:
    members: int = 50

    def __post_init__(self):
        if self.members < 1:
            raise ValueError("an ensemble needs at least one member")


def probabilities(thetas: np.ndarray, images, arch=None, chunk: int = 1024) -> np.ndarray:
    """(K, B, C) softmax outputs of K nets on shared images."""
    from .target_net import DEFAULT_ARCH

    arch = arch or DEFAULT_ARCH
    thetas = np.atleast_2d(thetas)
    mchunk = min(len(thetas), 8)
    ichunk = max(1, chunk // mchunk)
    out = np.empty((len(thetas), len(images), arch.classes), dtype=ad.get_dtype())
    for m in range(0, len(thetas), mchunk):
        for a in range(0, len(images), ichunk):
            logits = forward_logits(images[a:a + ichunk], thetas[m:m + mchunk], arch)
            out[m:m + mchunk, a:a + ichunk] = ad.softmax(logits, axis=-1).data
    return out


def majority_vote(probs: np.ndarray) -> np.ndarray:
    """Majority of member argmax votes; ties go to the larger summed probability, then the lower class.

    ``probs`` is (K, ..., C); the result drops the member axis.
    """
    probs = np.asarray(probs)
    c = probs.shape[-1]
    votes = (probs.argmax(axis=-1)[..., None] == np.arange(c)).sum(axis=0)
    top = votes == votes.max(axis=-1, keepdims=True)
    summed = np.where(top, probs.sum(axis=0), -np.inf)
    return summed.argmax(axis=-1)


def ensemble_eval(hp: HypernetParams, spec: EnsembleSpec, images, labels,
                  rng: Optional[np.random.Generator] = None, thetas: Optional[np.ndarray] = None) -> dict:
    """Majority-vote accuracy of ``spec.members`` generated nets and each member's own accuracy."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("ensemble_eval: empty dataset")
    rng = rng or np.random.default_rng(0)
    if thetas is None:
        thetas = sample_weights(hp, spec.members, rng)
    probs = probabilities(thetas, images, hp.arch.target)
    member = (probs.argmax(axis=-1) == labels).mean(axis=1)
    ens = float((majority_vote(probs) == labels).mean())
    return {"ensemble_accuracy": ens, "member_accuracies": member, "mean_member_accuracy": float(member.mean())}


# ------------------------------------------------------------------ adversarial


def fgsm_direction(theta, x, target, arch=None) -> np.ndarray:
    """sign of d/dx [-log p(target | x; theta)].

    ``theta`` (D,) with ``x`` (B, H, W, C) attacks one net; ``theta`` (B, D)
    attacks example b against its own net b.
    """
    from .target_net import DEFAULT_ARCH

    arch = arch or DEFAULT_ARCH
    x = np.asarray(x, dtype=ad.get_dtype())
    target = np.asarray(target)
    classes = arch.classes
    if target.size and (target.min() < 0 or target.max() >= classes):
        raise ValueError(f"target class must lie in 0..{classes - 1}")
    theta = np.asarray(theta, dtype=ad.get_dtype())
    leaf = Tensor(x if theta.ndim == 1 else x[:, None], requires_grad=True)
    logits = forward_logits(leaf, theta, arch)
    loss = nll(logits, target if theta.ndim == 1 else target[:, None]).sum()
    (g,) = ad.backward(loss, [leaf])
    return np.sign(g if theta.ndim == 1 else g[:, 0])


def fgsm_attack(theta, x, target, eps: float, arch=None) -> np.ndarray:
    """x' = clip(x - eps * sign(grad_x[-log p(target | x)]), 0, 1)."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=ad.get_dtype())
    if eps == 0:
        return x.copy()
    return np.clip(x - eps * fgsm_direction(theta, x, target, arch), 0.0, 1.0).astype(x.dtype)


def random_other_class(rng: np.random.Generator, labels, classes: int = 10) -> np.ndarray:
    labels = np.asarray(labels)
    shift = rng.integers(1, classes, size=labels.shape)
    return (labels + shift) % classes


def adversarial_experiment(hp: HypernetParams, images, labels, epsilons=FGSM_EPSILONS, members: int = 25,
                           rng: Optional[np.random.Generator] = None, chunk: int = 8,
                           reuse_attacked: bool = False) -> dict:
    """Targeted-attack success rate against the attacked net and against an ensemble.

    Per example: generate one net, pick a random wrong target class, craft
    FGSM images for every epsilon against that net, then classify them with
    the net itself and with ``members`` freshly generated nets (majority
    vote).  ``reuse_attacked=True`` makes the ensemble the attacked net
    repeated, which is only meaningful as a consistency check.
    """
    rng = rng or np.random.default_rng(0)
    images = np.asarray(images, dtype=ad.get_dtype())
    labels = np.asarray(labels)
    eps = np.asarray(epsilons, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilons must be non-negative")
    arch = hp.arch.target
    single = np.zeros(len(eps))
    ensemble = np.zeros(len(eps))
    n = len(labels)
    for a in range(0, n, chunk):
        x, y = images[a:a + chunk], labels[a:a + chunk]
        b = len(y)
        theta = sample_weights(hp, b, rng)
        target = random_other_class(rng, y, arch.classes)
        direction = fgsm_direction(theta, x, target, arch)
        adv = np.clip(x[:, None] - eps[None, :, None, None, None] * direction[:, None], 0.0, 1.0)
        adv = adv.astype(x.dtype)                                  # (b, E, H, W, C)
        pred = forward_logits(adv, theta, arch).data.argmax(axis=-1)     # (b, E)
        single += (pred == target[:, None]).sum(axis=0)
        if reuse_attacked:
            members_theta = np.repeat(theta, members, axis=0)
        else:
            members_theta = sample_weights(hp, b * members, rng)
        probs = ad.softmax(forward_logits(np.repeat(adv, members, axis=0), members_theta, arch), axis=-1).data
        probs = probs.reshape(b, members, len(eps), -1).transpose(1, 0, 2, 3)
        ensemble += (majority_vote(probs) == target[:, None]).sum(axis=0)
    return {"epsilon": eps, "single": single / n, "ensemble": ensemble / n}

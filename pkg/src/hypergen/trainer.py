"""Loss assembly and the training loops (hypernetwork, toy problem, plain target net)."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .checkpoint import Checkpoint, hypernet_to_checkpoint, save_checkpoint
from .config import TrainConfig
from .diversity import EntropyConfig, diversity_from_weights, kl_entropy
from .hypernet import (DEFAULT_HYPERNET, HypernetArch, shrunken_arch, HypernetParams, ToyArch, generate_weights,
                       init_hypernet, init_toy, sample_noise, toy_forward)
from .target_net import DEFAULT_ARCH, TargetArch, init_target_weights, nll, forward_logits, target_accuracy

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "total_loss", "accuracy_loss", "diversity_loss", "val_mean_acc", "val_std_acc"]


# ------------------------------------------------------------------ losses


def accuracy_loss(theta, images, labels, arch: TargetArch = DEFAULT_ARCH) -> Tensor:
    """Mean over noise samples of the target loss on each sample's own image batch.

    ``theta`` is (N, D); ``images`` (N, B, H, W, C); ``labels`` (N, B).
    """
    theta = ad.as_tensor(theta)
    labels = np.asarray(labels)
    if theta.ndim != 2 or np.shape(images)[0] != theta.shape[0] or labels.shape[0] != theta.shape[0]:
        raise ValueError(f"accuracy_loss: {theta.shape[0]} weight vectors but "
                         f"{np.shape(images)[0]} image batches / {labels.shape[0]} label batches")
    return nll(forward_logits(images, theta, arch), labels).mean()


def total_loss(z, hp: HypernetParams, images, labels, lam: float, leaves: Optional[dict] = None,
               entropy: Optional[EntropyConfig] = None, mode: str = "train", update_stats: bool = True):
    """lam * accuracy + diversity, and a dict with both components."""
    entropy = entropy or EntropyConfig(d=hp.arch.z_dim)
    theta = generate_weights(z, hp, mode=mode, leaves=leaves, update_stats=update_stats)
    acc = accuracy_loss(theta, images, labels, hp.arch.target)
    div = diversity_from_weights(theta, hp.arch.target.layout, entropy)
    loss = acc * lam + div
    return loss, {"accuracy": float(acc.data), "diversity": float(div.data), "total": float(loss.data)}


def gradient_check(seed: int = 0, samples_per_group: int = 20, step: float = 1e-6, lam: float = 1e3,
                   arch: Optional[HypernetArch] = None) -> dict:
    """Finite-difference check of the total-loss gradient on a shrunken config (64-bit).

    Covers every parameter group, so the checked paths include batch norm,
    gauge fixing and the entropy term.
    """
    arch = arch or shrunken_arch()
    with ad.precision(np.float64):
        rng = np.random.default_rng(seed)
        hp = init_hypernet(rng, arch)
        n_z, per_z = 5, 4
        z = sample_noise(rng, n_z, arch.z_dim)
        images = rng.uniform(0, 1, size=(n_z, per_z) + arch.target.input_shape)
        labels = rng.integers(0, arch.target.classes, size=(n_z, per_z))
        names = list(hp.params)

        def fn(leaves):
            loss, _ = total_loss(z, hp, images, labels, lam, leaves=dict(zip(names, leaves)),
                                 update_stats=False)
            return loss

        report = ad.grad_check(fn, [hp.params[k] for k in names], step=step, samples=samples_per_group,
                               rng=rng)
    coords = sum(min(samples_per_group, hp.params[k].size) for k in names)
    out = {names[i]: v for i, v in report.items() if i != "max"}
    out["max"] = report["max"]
    out["coordinates"] = coords
    return out


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; rejects non-finite gradients."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}; step rejected")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(params[k].dtype)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_decay_every > 0:
        return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)
    return cfg.lr


def _check_finite(loss: Tensor, grads: dict, step: int) -> None:
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss at step {step}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r} at step {step}")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class CSVLog:
    def __init__(self, path, columns):
        self.rows = []
        self.columns = columns
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(columns)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([row["step"]] + [_fmt(row.get(c)) for c in self.columns[1:]])
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


# ------------------------------------------------------------------ MNIST hypernetwork


@dataclass
class TrainResult:
    params: object
    log: list
    adam: Optional[AdamState] = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def validation_accuracies(hp: HypernetParams, z: np.ndarray, images, labels) -> np.ndarray:
    theta = generate_weights(z, hp, mode="infer").data
    return target_accuracy(theta, images, labels, hp.arch.target)


def train_mnist(cfg: TrainConfig, data, arch: Optional[HypernetArch] = None, log_path=None,
                checkpoint_path=None, progress: Optional[Callable] = None) -> TrainResult:
    """Train the hypernetwork on MNIST with loss lam * accuracy + diversity."""
    arch = arch or HypernetArch(leaky_slope=cfg.leaky_slope)
    rng = np.random.default_rng(cfg.seed)
    hp = init_hypernet(rng, arch, cfg.init, cfg.bn_momentum)
    adam = AdamState.zeros_like(hp.params)
    entropy = EntropyConfig(d=cfg.entropy_d or arch.z_dim, eps_min=cfg.eps_min)
    val_images, val_labels = data.validation(cfg.val_examples)
    val_z = sample_noise(np.random.default_rng([cfg.seed, 1]), cfg.val_nets, arch.z_dim)
    n_train = len(data.train_labels)
    per_step = cfg.z_batch * cfg.images_per_z
    if per_step > n_train:
        raise ValueError(f"{per_step} distinct images per step but only {n_train} training images")

    csv_log = CSVLog(log_path, LOG_COLUMNS)
    start = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            z = sample_noise(rng, cfg.z_batch, arch.z_dim)
            idx = rng.choice(n_train, size=per_step, replace=False).reshape(cfg.z_batch, cfg.images_per_z)
            leaves = hp.leaves()
            loss, parts = total_loss(z, hp, data.train_images[idx], data.train_labels[idx], cfg.lam,
                                     leaves=leaves, entropy=entropy)
            grads = dict(zip(leaves, ad.backward(loss, leaves.values())))
            _check_finite(loss, grads, step)
            adam_step(hp.params, grads, adam, _lr_at(cfg, step - 1), cfg.beta1, cfg.beta2, cfg.adam_eps)

            row = {"step": step, "total_loss": parts["total"], "accuracy_loss": parts["accuracy"],
                   "diversity_loss": parts["diversity"]}
            if cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps):
                accs = validation_accuracies(hp, val_z, val_images, val_labels)
                row["val_mean_acc"], row["val_std_acc"] = float(accs.mean()), float(accs.std())
            if step % cfg.log_every == 0 or "val_mean_acc" in row:
                csv_log.write(row)
            if progress is not None:
                progress(step, row)
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, hypernet_to_checkpoint(
                    hp, step, rng, cfg.to_dict(), adam, {"train_seconds": time.perf_counter() - start}))
    finally:
        csv_log.close()
    seconds = time.perf_counter() - start
    if checkpoint_path:
        save_checkpoint(checkpoint_path, hypernet_to_checkpoint(
            hp, cfg.steps, rng, cfg.to_dict(), adam, {"train_seconds": seconds}))
    return TrainResult(hp, csv_log.rows, adam, seconds)


# ------------------------------------------------------------------ toy problem


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k = len(self.weights)
        if self.means.shape != (k, 2) or self.covs.shape != (k, 2, 2):
            raise ValueError("mixture needs K weights, K x 2 means and K x 2 x 2 covariances")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        for c in self.covs:
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("covariances must be symmetric positive definite")

    @property
    def precisions(self) -> np.ndarray:
        return np.linalg.inv(self.covs)

    def log_density(self, x) -> Tensor:
        """Differentiable log p(x) for (N, 2) points."""
        x = ad.as_tensor(x)
        dtype = ad.get_dtype()
        diff = x.reshape(x.shape[0], 1, 1, 2) - self.means.reshape(1, -1, 1, 2).astype(dtype)
        maha = ((diff @ self.precisions.astype(dtype)) * diff).sum(axis=(2, 3))     # (N, K)
        _, logdet = np.linalg.slogdet(2 * np.pi * self.covs)
        comp = maha * -0.5 + (np.log(self.weights) - 0.5 * logdet).astype(dtype)
        return ad.logsumexp(comp, axis=1)

    def density(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(np.asarray(x)).data)

    def mahalanobis_to_means(self, x: np.ndarray) -> np.ndarray:
        """(N, K) Mahalanobis distance of each point to each component mean."""
        diff = np.asarray(x, dtype=np.float64)[:, None, :] - self.means[None]
        return np.sqrt(np.einsum("nki,kij,nkj->nk", diff, self.precisions, diff))

    def to_dict(self) -> dict:
        return {"components": [{"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
                               for w, m, c in zip(self.weights, self.means, self.covs)]}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        comps = d["components"]
        return cls([c["weight"] for c in comps], [c["mean"] for c in comps], [c["cov"] for c in comps])

    @classmethod
    def load(cls, path) -> "GaussianMixture":
        return cls.from_dict(json.loads(Path(path).read_text()))


DEFAULT_MIXTURE_PATH = Path(__file__).with_name("mixture5.json")


def toy_loss(z, params: dict, mixture: GaussianMixture, lam: float, l2: float, arch: ToyArch = ToyArch(),
             density: str = "log", eps_min: float = 1e-12):
    """lam * E[-log p_mix(G(z))] - H(batch; d = dim z) + l2 * ||phi||^2."""
    pts = toy_forward(z, params, arch)
    logp = mixture.log_density(pts)
    acc = -logp.mean() if density == "log" else -ad.exp(logp).mean()
    ent = kl_entropy(pts, EntropyConfig(d=arch.z_dim, eps_min=eps_min))
    reg = None
    for p in params.values():
        term = ad.square(p).sum()
        reg = term if reg is None else reg + term
    loss = acc * lam - ent + reg * l2
    return loss, {"accuracy": float(acc.data), "diversity": -float(ent.data), "l2": float(reg.data),
                  "total": float(loss.data)}


def toy_eval_points(params: dict, arch: ToyArch = ToyArch(), n: int = 400) -> np.ndarray:
    z = np.linspace(-1.0, 1.0, n).reshape(n, 1)
    return toy_forward(z, params, arch).data


def train_toy(cfg: TrainConfig, mixture: Optional[GaussianMixture] = None, arch: Optional[ToyArch] = None,
              log_path=None, checkpoint_path=None) -> TrainResult:
    arch = arch or ToyArch(leaky_slope=cfg.leaky_slope)
    if mixture is None:
        mixture = GaussianMixture.load(cfg.mixture or DEFAULT_MIXTURE_PATH)
    rng = np.random.default_rng(cfg.seed)
    params = init_toy(rng, arch)
    adam = AdamState.zeros_like(params)
    csv_log = CSVLog(log_path, ["step", "total_loss", "accuracy_loss", "diversity_loss", "l2"])
    start = time.perf_counter()
    try:
        for step in range(1, cfg.steps + 1):
            z = sample_noise(rng, cfg.z_batch, arch.z_dim)
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss, parts = toy_loss(z, leaves, mixture, cfg.lam, cfg.l2, arch, cfg.toy_density, cfg.eps_min)
            grads = dict(zip(leaves, ad.backward(loss, leaves.values())))
            _check_finite(loss, grads, step)
            adam_step(params, grads, adam, _lr_at(cfg, step - 1), cfg.beta1, cfg.beta2, cfg.adam_eps)
            if step % cfg.log_every == 0:
                csv_log.write({"step": step, "total_loss": parts["total"], "accuracy_loss": parts["accuracy"],
                               "diversity_loss": parts["diversity"], "l2": parts["l2"]})
    finally:
        csv_log.close()
    seconds = time.perf_counter() - start
    if checkpoint_path:
        save_checkpoint(checkpoint_path, Checkpoint(
            "toy", arch.to_dict(), {f"toy/{k}": v for k, v in params.items()}, cfg.steps,
            rng.bit_generator.state, cfg.to_dict(),
            {"train_seconds": seconds, "mixture": mixture.to_dict()}))
    return TrainResult(params, csv_log.rows, adam, seconds, {"mixture": mixture})


# ------------------------------------------------------------------ direct training


def train_target_directly(cfg: TrainConfig, data, arch: TargetArch = DEFAULT_ARCH, log_path=None,
                          checkpoint_path=None, max_steps: Optional[int] = None) -> TrainResult:
    """Plain minibatch Adam on the target loss, no hypernetwork."""
    rng = np.random.default_rng(cfg.seed)
    theta = {"theta": init_target_weights(rng, arch)}
    adam = AdamState.zeros_like(theta)
    n = len(data.train_labels)
    csv_log = CSVLog(log_path, ["step", "loss"])
    start = time.perf_counter()
    step = 0
    try:
        for _ in range(cfg.target_epochs):
            order = rng.permutation(n)
            for b in range(0, n, cfg.target_batch):
                if max_steps is not None and step >= max_steps:
                    break
                idx = order[b:b + cfg.target_batch]
                leaf = Tensor(theta["theta"], requires_grad=True)
                loss = nll(forward_logits(data.train_images[idx], leaf, arch), data.train_labels[idx]).mean()
                (g,) = ad.backward(loss, [leaf])
                step += 1
                _check_finite(loss, {"theta": g}, step)
                adam_step(theta, {"theta": g}, adam, _lr_at(cfg, step - 1), cfg.beta1, cfg.beta2, cfg.adam_eps)
                if step % cfg.log_every == 0:
                    csv_log.write({"step": step, "loss": float(loss.data)})
    finally:
        csv_log.close()
    seconds = time.perf_counter() - start
    if checkpoint_path:
        save_checkpoint(checkpoint_path, Checkpoint(
            "target", HypernetArch(target=arch).to_dict()["target"], {"theta": theta["theta"]}, step,
            rng.bit_generator.state, cfg.to_dict(), {"train_seconds": seconds}))
    return TrainResult(theta["theta"], csv_log.rows, adam, seconds)

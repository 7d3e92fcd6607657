"""Nearest-neighbour (Kozachenko-Leonenko) entropy and the diversity loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gauge import gauge_fix
from .target_net import Layout

EULER_GAMMA = 0.57721566490153286060651209


@dataclass(frozen=True)
class EntropyConfig:
    d: int = 300
    eps_min: float = 1e-12

    def __post_init__(self):
        if self.d < 1 or not self.eps_min > 0:
            raise ValueError("need d >= 1 and eps_min > 0")


def digamma(n: int) -> float:
    """psi(n) = -gamma + sum_{k<n} 1/k for a positive integer ``n``."""
    if int(n) != n or n < 1:
        raise ValueError(f"digamma is defined here for positive integers, got {n}")
    return -EULER_GAMMA + sum(1.0 / k for k in range(1, int(n)))


def nearest_neighbors(x: np.ndarray) -> np.ndarray:
    """Index of each row's nearest other row (lowest index on ties)."""
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    return d2.argmin(axis=1)


def nn_distances(batch, eps_min: float = 1e-12) -> Tensor:
    """Distance from each of N points to its nearest neighbour, floored at ``eps_min``.

    The neighbour assignment is held fixed when differentiating.
    """
    batch = ad.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ad.ShapeError("nn_distances", batch.shape, detail="need (N, D) with N >= 2")
    nn = nearest_neighbors(batch.data)
    diff = batch - batch[nn]
    sq = ad.clamp_min(ad.square(diff).sum(axis=1), eps_min ** 2)
    return ad.sqrt(sq)


def kl_entropy(batch, cfg: EntropyConfig = EntropyConfig()) -> Tensor:
    """psi(N) + (d / N) * sum_i log(eps_i)."""
    batch = ad.as_tensor(batch)
    eps = nn_distances(batch, cfg.eps_min)
    n = batch.shape[0]
    return ad.log(eps).sum() * (cfg.d / n) + digamma(n)


def diversity_from_weights(theta: Tensor, layout: Layout, cfg: EntropyConfig) -> Tensor:
    """Negative entropy of the gauge-fixed weight batch."""
    return -kl_entropy(gauge_fix(theta, layout), cfg)


def diversity_loss(z, hp, cfg: Optional[EntropyConfig] = None, mode: str = "train",
                   leaves: Optional[dict] = None) -> Tensor:
    from .hypernet import generate_weights

    cfg = cfg or EntropyConfig(d=hp.arch.z_dim)
    theta = generate_weights(z, hp, mode=mode, leaves=leaves)
    return diversity_from_weights(theta, hp.arch.target.layout, cfg)

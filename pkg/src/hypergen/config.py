"""Training configuration and its ``key = value`` text format.

Every key below may appear in a config file; ``lambda`` maps to ``lam``.
Lines starting with ``#`` and blank lines are ignored, as is anything after
a ``#`` on a value line.

==================  =========  ==================================================
key                 default    meaning
==================  =========  ==================================================
mode                mnist      ``mnist`` or ``toy``
lambda              1000       weight of the accuracy term
z_batch             32         noise samples per step
images_per_z        32         distinct training images per noise sample
steps               2000       optimizer steps
lr                  0.001      Adam learning rate
lr_decay            1.0        multiply lr by this every ``lr_decay_every`` steps
lr_decay_every      0          0 disables decay
beta1/beta2         0.9/0.999  Adam moment decays
adam_eps            1e-8       Adam denominator guard
seed                0          RNG seed
leaky_slope         0.1        negative slope of the hypernetwork leaky-ReLUs
init                fanin      ``fanin``, ``glorot`` or ``zeros``
bn_momentum         0.99       EMA decay of batch-norm running statistics
entropy_d           0          entropy dimension, 0 means dim(z)
eps_min             1e-12      nearest-neighbour distance floor
val_every           200        validation period in steps, 0 disables
val_nets            20         generated nets per validation
val_examples        1000       validation images used (0 = all)
checkpoint_every    0          0 saves only the final checkpoint
log_every           1          CSV log period
l2                  1e-4       toy: l2 coefficient on generator parameters
toy_density         log        toy: ``log`` (-log density) or ``raw`` (-density)
mixture             (shipped)  toy: path of the mixture JSON file
toy_eval_points     400        toy: evenly spaced z values used for evaluation
target_epochs       2          direct target training: epochs
target_batch        32         direct target training: batch size
==================  =========  ==================================================

Toy runs start from :data:`TOY_DEFAULTS` instead, which changes ``lambda``,
``z_batch``, ``steps``, ``lr`` and the decay schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "mnist"
    lam: float = 1e3
    z_batch: int = 32
    images_per_z: int = 32
    steps: int = 2000
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    leaky_slope: float = 0.1
    init: str = "fanin"
    bn_momentum: float = 0.99
    entropy_d: int = 0
    eps_min: float = 1e-12
    val_every: int = 200
    val_nets: int = 20
    val_examples: int = 1000
    checkpoint_every: int = 0
    log_every: int = 1
    l2: float = 1e-4
    toy_density: str = "log"
    mixture: str = ""
    toy_eval_points: int = 400
    target_epochs: int = 2
    target_batch: int = 32
    _set: frozenset = field(default=frozenset(), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.z_batch < 2:
            raise ConfigError("z_batch must be at least 2")
        if self.mode not in ("mnist", "toy"):
            raise ConfigError(f"mode must be mnist or toy, got {self.mode!r}")
        if self.toy_density not in ("log", "raw"):
            raise ConfigError(f"toy_density must be log or raw, got {self.toy_density!r}")
        if self.steps < 0 or self.images_per_z < 1 or not self.lr > 0:
            raise ConfigError("steps >= 0, images_per_z >= 1 and lr > 0 are required")
        if not self.leaky_slope > 0:
            raise ConfigError("leaky_slope must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


_KEY_ALIASES = {"lambda": "lam"}


def _field_types() -> dict:
    return {f.name: f.type for f in fields(TrainConfig) if not f.name.startswith("_")}


def parse_config_text(text: str, source: str = "<string>", base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse ``key = value`` lines; keys not given keep their value in ``base``."""
    types = _field_types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        name = _KEY_ALIASES.get(key, key)
        if name not in types or key in _KEY_ALIASES.values():
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kind = types[name]
        try:
            if kind == "int":
                try:
                    parsed = int(value)
                except ValueError:
                    as_float = float(value)     # allow "2e3"
                    if not as_float.is_integer():
                        raise
                    parsed = int(as_float)
            elif kind == "float":
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: cannot parse {value!r} for {key}") from None
        values[name] = parsed
    try:
        cfg = (base or TrainConfig()).replace(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg._set = frozenset(values)
    return cfg


def parse_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path), base=base)


TOY_DEFAULTS = TrainConfig(mode="toy", lam=1.0, z_batch=128, steps=60000, lr=3e-2, lr_decay=0.5,
                           lr_decay_every=15000, log_every=100)

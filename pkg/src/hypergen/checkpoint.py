"""Binary checkpoints with a readable JSON manifest.

File layout::

    HYPERGEN-CKPT <version> <manifest byte length>\\n
    <manifest: JSON, sorted keys>\\n
    for each array listed in the manifest, in order:
        uint64 little-endian byte count, then the raw little-endian C-order bytes

The manifest records name, shape, dtype and SHA-256 of every array, plus the
mode, architecture descriptor, step, RNG state, config snapshot and free-form
metadata.  ``head -c 4000 file.ckpt`` shows it.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1
MAGIC = "HYPERGEN-CKPT"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    mode: str                      # mnist | toy | target
    arch: dict
    arrays: dict
    step: int = 0
    rng_state: Optional[dict] = None
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _manifest(ck: Checkpoint, order: list) -> dict:
    entries = []
    for name in order:
        a = np.ascontiguousarray(ck.arrays[name])
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str,
                        "sha256": hashlib.sha256(a.astype(a.dtype.newbyteorder("<")).tobytes()).hexdigest()})
    return {"version": ck.version, "mode": ck.mode, "arch": ck.arch, "step": ck.step,
            "rng_state": ck.rng_state, "config": ck.config, "meta": ck.meta, "arrays": entries}


def save_checkpoint(path, ck: Checkpoint) -> None:
    order = sorted(ck.arrays)
    manifest = json.dumps(_manifest(ck, order), sort_keys=True, indent=1).encode()
    parts = [f"{MAGIC} {ck.version} {len(manifest)}\n".encode(), manifest, b"\n"]
    for name in order:
        a = np.ascontiguousarray(ck.arrays[name])
        raw = a.astype(a.dtype.newbyteorder("<")).tobytes()
        parts.append(len(raw).to_bytes(8, "little"))
        parts.append(raw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def expected_shapes(mode: str, arch: dict) -> dict:
    """Array shapes implied by an architecture descriptor (phi arrays only)."""
    from .hypernet import HypernetArch, ToyArch, init_hypernet, init_toy
    from .target_net import TargetArch

    rng = np.random.default_rng(0)
    if mode == "mnist":
        hp = init_hypernet(rng, HypernetArch.from_dict(arch), init="zeros")
        return {f"phi/{k}": v.shape for k, v in hp.params.items()}
    if mode == "toy":
        return {f"toy/{k}": v.shape for k, v in init_toy(rng, ToyArch.from_dict(arch)).items()}
    if mode == "target":
        t = dict(arch)
        t["conv_filters"] = tuple(t["conv_filters"])
        return {"theta": (TargetArch(**t).layout.size,)}
    raise CheckpointError(f"unknown checkpoint mode {mode!r}")


def load_checkpoint(path, dtype=None) -> Checkpoint:
    """Read and verify a checkpoint.

    Float arrays are converted to ``dtype`` (default: the current global
    precision); converting 64-bit data to 32-bit emits a warning.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        magic, version, mlen = raw[:nl].decode().split(" ")
        version, mlen = int(version), int(mlen)
    except ValueError:
        raise CheckpointError(f"{path}: not a checkpoint file") from None
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = nl + 1
    try:
        manifest = json.loads(raw[pos:pos + mlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("version") != version:
        raise CheckpointError(f"{path}: manifest version {manifest.get('version')} disagrees with header")
    pos += mlen + 1

    shapes = expected_shapes(manifest["mode"], manifest["arch"])
    target_dtype = np.dtype(dtype or ad.get_dtype())
    arrays = {}
    for entry in manifest["arrays"]:
        name, shape, dt = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
        if name in shapes and tuple(shapes[name]) != shape:
            raise CheckpointError(f"{path}: array {name!r} has shape {shape}, architecture needs {tuple(shapes[name])}")
        if pos + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated before array {name!r}")
        n = int.from_bytes(raw[pos:pos + 8], "little")
        pos += 8
        if n != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{path}: array {name!r} byte count {n} does not match shape {shape}")
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated inside array {name!r}")
        chunk = raw[pos:pos + n]
        pos += n
        if hashlib.sha256(chunk).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum failure for array {name!r}")
        a = np.frombuffer(chunk, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if a.dtype.kind == "f" and a.dtype != target_dtype:
            if a.dtype.itemsize > target_dtype.itemsize:
                warnings.warn(f"checkpoint array {name!r}: downcasting {a.dtype} to {target_dtype}",
                              stacklevel=2)
            a = a.astype(target_dtype)
        arrays[name] = a
    missing = set(shapes) - set(arrays)
    if missing:
        raise CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(mode=manifest["mode"], arch=manifest["arch"], arrays=arrays, step=manifest["step"],
                      rng_state=manifest["rng_state"], config=manifest["config"], meta=manifest["meta"],
                      version=version)


# ------------------------------------------------------------------ adapters


def hypernet_to_checkpoint(hp, step: int = 0, rng=None, config: Optional[dict] = None,
                           adam=None, meta: Optional[dict] = None) -> Checkpoint:
    arrays = {f"phi/{k}": v for k, v in hp.params.items()}
    for k, s in hp.stats.items():
        if s.populated:
            arrays[f"bn/{k}/mean"] = s.mean
            arrays[f"bn/{k}/var"] = s.var
    if adam is not None:
        arrays.update({f"adam/m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam/v/{k}": v for k, v in adam.v.items()})
    meta = dict(meta or {})
    meta["bn_momentum"] = next(iter(hp.stats.values())).momentum if hp.stats else 0.99
    if adam is not None:
        meta["adam_t"] = adam.t
    return Checkpoint("mnist", hp.arch.to_dict(), arrays, step,
                      None if rng is None else rng.bit_generator.state, dict(config or {}), meta)


def hypernet_from_checkpoint(ck: Checkpoint):
    from .autodiff import RunningStats
    from .hypernet import HypernetArch, HypernetParams

    if ck.mode != "mnist":
        raise CheckpointError(f"expected a hypernetwork checkpoint, got mode {ck.mode!r}")
    arch = HypernetArch.from_dict(ck.arch)
    momentum = ck.meta.get("bn_momentum", 0.99)
    params = {k[4:]: v for k, v in ck.arrays.items() if k.startswith("phi/")}
    stats = {}
    for name in params:
        if name.endswith(".scale"):
            key = name[: -len(".scale")]
            stats[key] = RunningStats(momentum, ck.arrays.get(f"bn/{key}/mean"), ck.arrays.get(f"bn/{key}/var"))
    return HypernetParams(arch, params, stats)


def adam_from_checkpoint(ck: Checkpoint):
    from .trainer import AdamState

    m = {k[len("adam/m/"):]: v for k, v in ck.arrays.items() if k.startswith("adam/m/")}
    v = {k[len("adam/v/"):]: a for k, a in ck.arrays.items() if k.startswith("adam/v/")}
    if not m:
        return None
    return AdamState(m, v, ck.meta.get("adam_t", 0))

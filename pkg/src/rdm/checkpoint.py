"""Binary checkpoint container.

Layout::

    8 bytes    magic b"RDMCKPT1"
    8 bytes    uint64 little-endian JSON header length
    n bytes    UTF-8 JSON header
    payload    concatenated little-endian float64 blobs, offsets given in the header

The header lists every blob as ``{"group", "name", "shape", "offset"}``;
offsets are in bytes from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetFormatError, atomic_write
from .networks import ModelConfig, RDMNetworks
from .numerics import AdamState
from .training import Optimizers

__all__ = ["Checkpoint", "CheckpointFormatError", "save_checkpoint", "load_checkpoint",
           "checkpoint_bytes", "parse_checkpoint"]

MAGIC = b"RDMCKPT1"
FORMAT_VERSION = 1


class CheckpointFormatError(DatasetFormatError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, dict[str, np.ndarray]]  # store -> name -> array
    step: int = 0
    rng_state: dict | None = None
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    adam: dict[str, dict] | None = None  # store -> {lr, beta1, beta2, eps, step, m, v}
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, nets: RDMNetworks, step: int = 0, rng: np.random.Generator | None = None,
                optimizers: Optimizers | None = None, norm=None, meta=None) -> "Checkpoint":
        params = {name: store.to_arrays() for name, store in nets.stores().items()}
        adam = None
        if optimizers is not None:
            adam = {}
            for name, st in optimizers.states().items():
                adam[name] = {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                              "step": st.step, "m": {k: v.copy() for k, v in st.m.items()},
                              "v": {k: v.copy() for k, v in st.v.items()}}
        mean, std = (None, None) if norm is None else norm
        return cls(nets.config, params, step, None if rng is None else rng.bit_generator.state,
                   None if mean is None else np.asarray(mean, dtype=np.float64),
                   None if std is None else np.asarray(std, dtype=np.float64),
                   adam, dict(meta or {}))

    def build_networks(self) -> RDMNetworks:
        nets = RDMNetworks(self.model_config, random_state=0)
        for name, store in nets.stores().items():
            if name not in self.params:
                raise CheckpointFormatError(f"checkpoint lacks parameter group {name!r}")
            try:
                store.load_arrays(self.params[name])
            except (KeyError, ValueError) as exc:
                raise CheckpointFormatError(f"group {name!r}: {exc}") from None
        return nets

    def build_optimizers(self, fallback: Optimizers) -> Optimizers:
        if not self.adam:
            return fallback
        states = {}
        for name, d in self.adam.items():
            states[name] = AdamState(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
                                     {k: v.copy() for k, v in d["m"].items()},
                                     {k: v.copy() for k, v in d["v"].items()})
        return Optimizers(states["flow"], states["denoiser"], states["embedding"])

    def restore_rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        rng = np.random.default_rng()
        try:
            rng.bit_generator.state = self.rng_state
        except (TypeError, ValueError, KeyError) as exc:
            raise CheckpointFormatError(f"invalid rng state: {exc}") from None
        return rng


def _blobs(ckpt: Checkpoint):
    for store in sorted(ckpt.params):
        for name in sorted(ckpt.params[store]):
            yield f"param.{store}", name, ckpt.params[store][name]
    for store in sorted(ckpt.adam or {}):
        for moment in ("m", "v"):
            d = ckpt.adam[store][moment]
            for name in sorted(d):
                yield f"adam.{store}.{moment}", name, d[name]
    if ckpt.norm_mean is not None:
        yield "norm", "mean", ckpt.norm_mean
    if ckpt.norm_std is not None:
        yield "norm", "std", ckpt.norm_std


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for group, name, arr in _blobs(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    adam_scalars = None
    if ckpt.adam is not None:
        adam_scalars = {k: {f: d[f] for f in ("lr", "beta1", "beta2", "eps", "step")}
                        for k, d in ckpt.adam.items()}
    cfg = ckpt.model_config
    header = {
        "version": FORMAT_VERSION,
        "model": cfg.to_dict(),
        "schedule": {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "adam": adam_scalars,
        "meta": ckpt.meta,
        "blobs": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head] + chunks)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 16:
        raise CheckpointFormatError("file too short for checkpoint header", len(raw))
    if raw[:8] != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint", 0)
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + hlen > len(raw):
        raise CheckpointFormatError(f"truncated header: expected {hlen} bytes", len(raw))
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt JSON header: {exc}", 16) from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version: expected {FORMAT_VERSION}, found {header.get('version')}", 16)
    base = 16 + hlen
    try:
        total = int(header["payload_bytes"])
        cfg = ModelConfig(**header["model"])
        entries = header["blobs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"incomplete header: {exc}", 16) from None
    if len(raw) != base + total:
        raise CheckpointFormatError(
            f"payload size mismatch: expected {total} bytes, found {len(raw) - base}", min(len(raw), base + total))

    params: dict[str, dict] = {}
    adam_arrays: dict[str, dict] = {}
    norm: dict[str, np.ndarray] = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + int(e["offset"])
        if start < base or start + 8 * count > len(raw):
            raise CheckpointFormatError(f"blob {e['group']}/{e['name']} out of bounds", start)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
        group = e["group"]
        if group.startswith("param."):
            params.setdefault(group[6:], {})[e["name"]] = arr
        elif group.startswith("adam."):
            _, store, moment = group.split(".")
            adam_arrays.setdefault(store, {"m": {}, "v": {}})[moment][e["name"]] = arr
        elif group == "norm":
            norm[e["name"]] = arr
        else:
            raise CheckpointFormatError(f"unknown blob group {group!r}", start)

    adam = None
    if header.get("adam") is not None:
        adam = {k: {**scalars, **adam_arrays.get(k, {"m": {}, "v": {}})}
                for k, scalars in header["adam"].items()}
    return Checkpoint(cfg, params, int(header.get("step", 0)), header.get("rng_state"),
                      norm.get("mean"), norm.get("std"), adam, header.get("meta") or {})


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())

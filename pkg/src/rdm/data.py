"""Synthetic labelled sequence datasets, normalisation and file I/O.

Container layout (all integers little-endian)::

    16 bytes   magic  b"RDMDATASET\\x00\\x00\\x00\\x00\\x00\\x00"
     8 bytes   uint64 length of the JSON header
     n bytes   UTF-8 JSON header (version, shapes, dtype, stats, params)
    N*F*D*8    float64 sequences, C order
    N*8        int64 labels
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "SyntheticDataset",
    "DatasetFormatError",
    "gen_lissajous",
    "gen_damped_oscillator",
    "normalize",
    "denormalize",
    "train_test_split",
    "save_dataset",
    "load_dataset",
    "export_csv",
    "atomic_write",
]

MAGIC = b"RDMDATASET" + b"\x00" * 6
FORMAT_VERSION = 1
STD_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


@dataclass
class SyntheticDataset:
    sequences: np.ndarray  # (N, F, D)
    labels: np.ndarray  # (N,)
    params: dict = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sequences.ndim != 3:
            raise ValueError(f"sequences must be (N, F, D), got {self.sequences.shape}")
        if self.labels.shape != (self.sequences.shape[0],):
            raise ValueError("need exactly one label per sequence")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.sequences.shape[0]

    @property
    def n_frames(self) -> int:
        return self.sequences.shape[1]

    @property
    def n_features(self) -> int:
        return self.sequences.shape[2]

    @property
    def normalized(self) -> bool:
        return bool(self.params.get("normalized", False))

    def subset(self, index) -> "SyntheticDataset":
        return replace(self, sequences=self.sequences[index], labels=self.labels[index])


def _check_gen_args(n, F, D, n_labels):
    if n < 1 or F < 1 or n_labels < 1:
        raise ValueError("n, F and n_labels must be positive")
    if D < 2 or D % 2:
        raise ValueError(f"feature dimension must be even and >= 2, got D={D}")


def gen_lissajous(n: int = 2048, F: int = 56, D: int = 4, n_labels: int = 4, seed: int = 0,
                  amplitude: float = 1.0, jitter: float = 0.1) -> SyntheticDataset:
    """Labelled Lissajous curves, one (x, y) pair per two feature dims.

    Label ``c`` fixes the frequency ratio ``(c + 1) : (c + 2)`` and a base
    phase; every sample jitters phase and frequency.  Pair ``p`` of sample
    ``k`` is ``A sin(a w t + phase[k, p])`` and ``A sin(b w t + phase[k, p] + pi/2)``
    with ``w = 2 pi / F``.
    """
    _check_gen_args(n, F, D, n_labels)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_labels, size=n)
    pairs = D // 2
    c = labels[:, None].astype(np.float64)
    base_phase = np.pi * c / n_labels + np.pi / 4 * np.arange(pairs)[None, :]
    phase = base_phase + jitter * rng.standard_normal((n, pairs))
    freq_scale = 1.0 + 0.05 * jitter * rng.standard_normal((n, 1))
    a = (c + 1.0) * freq_scale
    b = (c + 2.0) * freq_scale
    w = 2.0 * np.pi / F
    t = np.arange(F, dtype=np.float64)[None, :, None]
    x = amplitude * np.sin(a[:, :, None] * w * t + phase[:, None, :])
    y = amplitude * np.sin(b[:, :, None] * w * t + phase[:, None, :] + np.pi / 2)
    seqs = np.empty((n, F, D))
    seqs[:, :, 0::2] = x
    seqs[:, :, 1::2] = y
    params = {"kind": "lissajous", "seed": seed, "amplitude": amplitude, "jitter": jitter,
              "n_labels": n_labels, "phase": phase.tolist(), "freq_scale": freq_scale[:, 0].tolist()}
    return SyntheticDataset(seqs, labels, params)


def gen_damped_oscillator(n: int = 2048, F: int = 56, D: int = 4, n_labels: int = 4, seed: int = 0,
                          amplitude: float = 1.0, gammas=None, dt: float = 0.1) -> SyntheticDataset:
    """Damped sinusoids ``A exp(-g t) sin(w t + phi)``; label picks the damping ``g``.

    Within a dim pair the second channel is a quarter period ahead of the first.
    """
    _check_gen_args(n, F, D, n_labels)
    if gammas is None:
        gammas = 0.05 + 0.1 * np.arange(n_labels)
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (n_labels,) or np.any(gammas <= 0):
        raise ValueError("need one positive damping rate per label")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_labels, size=n)
    pairs = D // 2
    omega = 1.0 + 0.5 * np.arange(pairs)[None, :] + 0.05 * rng.standard_normal((n, pairs))
    phase = rng.uniform(0, 2 * np.pi, size=(n, pairs))
    t = dt * np.arange(F, dtype=np.float64)[None, :, None]
    env = amplitude * np.exp(-gammas[labels][:, None, None] * t)
    seqs = np.empty((n, F, D))
    seqs[:, :, 0::2] = env * np.sin(omega[:, None, :] * t + phase[:, None, :])
    seqs[:, :, 1::2] = env * np.sin(omega[:, None, :] * t + phase[:, None, :] + np.pi / 2)
    params = {"kind": "damped", "seed": seed, "amplitude": amplitude, "dt": dt,
              "gammas": gammas.tolist(), "n_labels": n_labels}
    return SyntheticDataset(seqs, labels, params)


def compute_stats(sequences: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(sequences).reshape(-1, np.asarray(sequences).shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR)


def normalize(dataset: SyntheticDataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> SyntheticDataset:
    """Per-dimension standardisation; stats come from ``dataset`` unless given.

    Pass the training split's stats when normalising held-out data.
    """
    mean, std = compute_stats(dataset.sequences) if stats is None else stats
    out = (dataset.sequences - mean) / std
    return replace(dataset, sequences=out, mean=np.asarray(mean), std=np.asarray(std),
                   params={**dataset.params, "normalized": True})


def denormalize(dataset: SyntheticDataset) -> SyntheticDataset:
    if dataset.mean is None or dataset.std is None:
        raise ValueError("dataset carries no normalisation stats")
    out = dataset.sequences * dataset.std + dataset.mean
    return replace(dataset, sequences=out, params={**dataset.params, "normalized": False})


def train_test_split(n: int, n_test: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint sorted index sets partitioning ``range(n)``."""
    if not 0 <= n_test < n:
        raise ValueError(f"need 0 <= n_test < n, got n_test={n_test}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# --- file I/O ---------------------------------------------------------------------


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dataset_bytes(dataset: SyntheticDataset) -> bytes:
    N, F, D = dataset.sequences.shape
    header = {
        "version": FORMAT_VERSION,
        "n": N, "frames": F, "features": D,
        "dtype": "<f8", "label_dtype": "<i8",
        "mean": None if dataset.mean is None else np.asarray(dataset.mean).tolist(),
        "std": None if dataset.std is None else np.asarray(dataset.std).tolist(),
        "params": dataset.params,
    }
    head = json.dumps(header, default=_json_default, sort_keys=True).encode("utf-8")
    return b"".join([
        MAGIC, struct.pack("<Q", len(head)), head,
        dataset.sequences.astype("<f8").tobytes(order="C"),
        dataset.labels.astype("<i8").tobytes(order="C"),
    ])


def save_dataset(dataset: SyntheticDataset, path) -> None:
    atomic_write(path, dataset_bytes(dataset))


def parse_dataset(raw: bytes) -> SyntheticDataset:
    if len(raw) < len(MAGIC) + 8:
        raise DatasetFormatError("file too short for dataset header", len(raw))
    if raw[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError("bad magic: not a dataset container", 0)
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise DatasetFormatError(f"truncated header: expected {hlen} bytes", len(raw))
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt JSON header: {exc}", start) from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version: expected {FORMAT_VERSION}, found {header.get('version')}", start)
    try:
        N, F, D = int(header["n"]), int(header["frames"]), int(header["features"])
    except (KeyError, TypeError, ValueError):
        raise DatasetFormatError("header lacks valid shape fields", start) from None
    offset = start + hlen
    n_seq = N * F * D * 8
    expected_end = offset + n_seq + N * 8
    if len(raw) < expected_end:
        raise DatasetFormatError(
            f"truncated payload: expected {expected_end - offset} bytes after header, "
            f"found {len(raw) - offset}", len(raw))
    if len(raw) > expected_end:
        raise DatasetFormatError("trailing bytes after payload", expected_end)
    seqs = np.frombuffer(raw, dtype="<f8", count=N * F * D, offset=offset).reshape(N, F, D).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<i8", count=N, offset=offset + n_seq).astype(np.int64)
    mean = None if header.get("mean") is None else np.asarray(header["mean"], dtype=np.float64)
    std = None if header.get("std") is None else np.asarray(header["std"], dtype=np.float64)
    return SyntheticDataset(seqs, labels, header.get("params") or {}, mean, std)


def load_dataset(path) -> SyntheticDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())


def export_csv(dataset: SyntheticDataset, path=None) -> str:
    """One row per frame: ``seq_id, frame, label, d0 ... d{D-1}``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    D = dataset.n_features
    writer.writerow(["seq_id", "frame", "label"] + [f"d{k}" for k in range(D)])
    for s, (seq, label) in enumerate(zip(dataset.sequences, dataset.labels)):
        for f, frame in enumerate(seq):
            writer.writerow([s, f, int(label)] + [repr(float(v)) for v in frame])
    text = buf.getvalue()
    if path is not None:
        atomic_write(path, text.encode("utf-8"))
    return text

"""Segmentation and the forward process over the (temporal, diffusion) grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import ConditionalFlow
from .numerics import Tensor, add, as_tensor, scale
from .schedule import NoiseSchedule

__all__ = ["SegmentedSequence", "GridPoint", "segment", "diffuse_only", "grid_noisy_sample"]


@dataclass(frozen=True)
class SegmentedSequence:
    segments: np.ndarray  # (L, S, D)
    label: int = 0
    n_frames: int = 0  # frames before padding

    @property
    def L(self) -> int:
        return self.segments.shape[0]

    @property
    def S(self) -> int:
        return self.segments.shape[1]

    @property
    def D(self) -> int:
        return self.segments.shape[2]

    @property
    def n_padded(self) -> int:
        return self.L * self.S - self.n_frames

    def frames(self) -> np.ndarray:
        return self.segments.reshape(self.L * self.S, self.D)


@dataclass(frozen=True)
class GridPoint:
    i: int
    t: int

    def validate(self, L: int, T: int) -> "GridPoint":
        if not 0 <= self.i <= L:
            raise ValueError(f"temporal step i={self.i} outside [0, {L}]")
        if not 0 <= self.t <= T:
            raise ValueError(f"diffusion step t={self.t} outside [0, {T}]")
        return self


def segment_length(n_frames: int, L: int) -> int:
    return -(-n_frames // L)


def segment(sequence, L: int, pad_mode: str = "repeat_last", label: int = 0) -> SegmentedSequence:
    """Split an (F, D) sequence into ``L`` equal segments.

    With ``pad_mode="repeat_last"`` a sequence whose length is not a multiple
    of ``L`` is extended by repeating its final frame; ``"strict"`` rejects it.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2:
        raise ValueError(f"sequence must be (F, D), got shape {seq.shape}")
    F = seq.shape[0]
    if not 1 <= L <= F:
        raise ValueError(f"need 1 <= L <= F, got L={L}, F={F}")
    if pad_mode not in ("repeat_last", "strict"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    S = segment_length(F, L)
    pad = L * S - F
    if pad:
        if pad_mode == "strict":
            raise ValueError(f"F={F} frames do not split into L={L} equal segments")
        seq = np.concatenate([seq, np.repeat(seq[-1:], pad, axis=0)])
    return SegmentedSequence(seq.reshape(L, S, seq.shape[1]), int(label), F)


def segment_batch(sequences, L: int, pad_mode: str = "repeat_last") -> np.ndarray:
    """Vectorised :func:`segment` for (N, F, D) arrays; returns (N, L, S, D)."""
    seqs = np.asarray(sequences, dtype=np.float64)
    N, F, D = seqs.shape
    S = segment_length(F, L)
    pad = L * S - F
    if pad:
        if pad_mode == "strict":
            raise ValueError(f"F={F} frames do not split into L={L} equal segments")
        seqs = np.concatenate([seqs, np.repeat(seqs[:, -1:], pad, axis=1)], axis=1)
    return seqs.reshape(N, L, S, D)


def diffuse_only(x0, t, eps, schedule: NoiseSchedule):
    """Closed-form forward diffusion ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` may be an int or a per-item integer array matching the leading axis.
    Returns a Tensor when ``x0`` is one, otherwise an ndarray.
    """
    x0_t = as_tensor(x0)
    eps_t = as_tensor(eps)
    if x0_t.shape != eps_t.shape:
        raise ValueError(f"diffuse_only: x0 shape {x0_t.shape} != eps shape {eps_t.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"diffusion step outside [0, {schedule.T}]")
    ab = schedule.alpha_bars[t_arr]
    if t_arr.ndim == 0:
        out = add(scale(x0_t, np.sqrt(ab)), scale(eps_t, np.sqrt(1.0 - ab)))
    else:
        shape = (-1,) + (1,) * (x0_t.ndim - 1)
        a = Tensor(np.sqrt(ab).reshape(shape))
        b = Tensor(np.sqrt(1.0 - ab).reshape(shape))
        out = add(x0_t * a, eps_t * b)
    return out if isinstance(x0, Tensor) else out.data


def grid_noisy_sample(x00, i: int, t: int, eps, flow: ConditionalFlow, emb,
                      schedule: NoiseSchedule):
    """Build ``x^i_t``: diffuse the first segment to step ``t``, then flow it ``i`` times.

    Returns ``(x, logdet, trace)``; the trace holds the contexts needed to
    invert the transport.
    """
    if i < 0:
        raise ValueError(f"temporal step i must be >= 0, got {i}")
    noisy = diffuse_only(as_tensor(x00), t, eps, schedule)
    x, logdet, _, trace = flow.apply_n(noisy, emb, i)
    return x, logdet, trace

"""Quality and cost metrics: Fréchet distance on feature Gaussians, round-trip residuals, bench CSV."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .flow import ConditionalFlow
from .numerics import NonFiniteError, Tensor, no_grad
from .sampler import CallCounter, SamplerPlan, segment_cost

__all__ = [
    "GaussianStats",
    "frame_features",
    "frechet_gaussian",
    "sequence_frechet",
    "trajectory_mse",
    "RoundTripReport",
    "flow_roundtrip_residual",
    "BenchRun",
    "BENCH_COLUMNS",
    "bench_report",
]

BENCH_COLUMNS = ("mode", "L", "n_steps", "t_start", "denoiser_calls", "flow_calls", "wall_ms",
                 "frechet", "mse", "speedup_vs_ar", "wall_ms_std")
RESIDUAL_THRESHOLD = 1e-3


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mu.size}")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_features(cls, features) -> "GaussianStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError("need at least two feature rows of shape (n, d)")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False))

    @classmethod
    def from_sequences(cls, sequences, with_diffs: bool = True) -> "GaussianStats":
        return cls.from_features(frame_features(sequences, with_diffs))


def frame_features(sequences, with_diffs: bool = True) -> np.ndarray:
    """Per-frame rows of an (N, F, D) batch, optionally joined with first differences.

    With differences the last frame of each sequence is dropped so that every
    row holds ``[x_f, x_{f+1} - x_f]``.
    """
    seqs = np.asarray(sequences, dtype=np.float64)
    if seqs.ndim != 3:
        raise ValueError(f"expected (N, F, D) sequences, got shape {seqs.shape}")
    N, F, D = seqs.shape
    if not with_diffs or F < 2:
        return seqs.reshape(N * F, D)
    feats = np.concatenate([seqs[:, :-1], np.diff(seqs, axis=1)], axis=-1)
    return feats.reshape(N * (F - 1), 2 * D)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians.

    The cross term ``tr((Σa Σb)^{1/2})`` is computed as ``tr((A Σb A)^{1/2})``
    with ``A = Σa^{1/2}``, which keeps every square root symmetric and makes
    the result exactly symmetric in its arguments up to roundoff.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    sa = _psd_sqrt(a.cov)
    cross = np.trace(_psd_sqrt(sa @ b.cov @ sa))
    diff = a.mean - b.mean
    d2 = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(d2, 0.0)


def sequence_frechet(generated, reference, with_diffs: bool = True) -> float:
    return frechet_gaussian(GaussianStats.from_sequences(generated, with_diffs),
                            GaussianStats.from_sequences(reference, with_diffs))


def trajectory_mse(generated, reference) -> float:
    """Mean squared error between matching arrays, or between per-frame means if batch sizes differ."""
    g, r = np.asarray(generated, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if g.shape[1:] != r.shape[1:]:
        raise ValueError(f"shapes {g.shape} and {r.shape} are not comparable")
    if g.shape[0] != r.shape[0]:
        g, r = g.mean(axis=0), r.mean(axis=0)
    return float(np.mean((g - r) ** 2))


@dataclass
class RoundTripReport:
    residuals: list[float] = field(default_factory=list)  # index n - 1
    stable_depth: int = 0
    threshold: float = RESIDUAL_THRESHOLD

    @property
    def max_residual(self) -> float:
        return max(self.residuals, default=0.0)


def flow_roundtrip_residual(flow: ConditionalFlow, x, emb, n_max: int,
                            threshold: float = RESIDUAL_THRESHOLD) -> RoundTripReport:
    """Max-norm error of ``inverse_n(apply_n(x))`` for ``n = 1 .. n_max``.

    ``stable_depth`` is the largest ``n`` whose residual (and every smaller
    one) stays within ``threshold``.  A non-finite traversal is recorded as an
    infinite residual and ends the sweep.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    report = RoundTripReport(threshold=threshold)
    crossed = False
    with no_grad():
        for n in range(1, n_max + 1):
            try:
                y, _, _, trace = flow.apply_n(Tensor(x), emb, n)
                back, _ = flow.inverse_n(y, n, trace)
                res = float(np.max(np.abs(back.data - x)))
            except (NonFiniteError, FloatingPointError):
                res = float("inf")
            if not np.isfinite(res):
                report.residuals.append(float("inf"))
                break
            report.residuals.append(res)
            if not crossed and res <= threshold:
                report.stable_depth = n
            else:
                crossed = True
    return report


@dataclass
class BenchRun:
    plan: SamplerPlan
    counter: CallCounter
    wall_ms: float
    t_start: int | None = None
    wall_ms_std: float = 0.0
    frechet: float | None = None
    mse: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def bench_report(runs: list[BenchRun], T: int) -> str:
    """CSV text, one row per run, columns ``BENCH_COLUMNS``.

    ``speedup_vs_ar`` is the autoregressive row's denoiser cost divided by
    this row's, at matching ``(L, n_steps)``.  Volume calls count ``L``
    segments each.  Without a baseline the cell is left empty and a warning
    is issued.
    """
    if not runs:
        raise ValueError("bench_report needs at least one run")
    baselines = {}
    for r in runs:
        if r.plan.mode == "autoregressive":
            baselines[(r.plan.L_target, len(r.plan.steps(T)))] = r.counter.denoiser_calls
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    missing = False
    for r in runs:
        n = len(r.plan.steps(T))
        base = baselines.get((r.plan.L_target, n))
        cost = r.counter.denoiser_calls * segment_cost(r.plan)
        if base is None or cost == 0:
            speedup = None
            missing = True
        else:
            speedup = base / cost
        t_start = r.t_start if r.t_start is not None else r.plan.resolve_t_start(T)
        writer.writerow([r.plan.mode, r.plan.L_target, n, t_start, r.counter.denoiser_calls,
                         r.counter.flow_calls, _fmt(float(r.wall_ms)), _fmt(r.frechet), _fmt(r.mse),
                         _fmt(speedup), _fmt(float(r.wall_ms_std))])
    if missing:
        warnings.warn("no autoregressive baseline for some rows; speedup_vs_ar left empty",
                      RuntimeWarning, stacklevel=2)
    return buf.getvalue()

"""Weighted simple loss and the joint flow + denoiser update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import diffuse_only
from .networks import RDMNetworks
from .numerics import (
    AdamState,
    NonFiniteError,
    Tensor,
    adam_step,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    mean,
    mse,
    mul,
    neg,
    no_grad,
    scale,
    slice_,
)
from .schedule import NoiseSchedule

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "Optimizers",
    "TrainingDivergedError",
    "weight_w",
    "simple_loss",
    "draw_grid_points",
    "compute_loss",
    "training_step",
]

W_MODES = ("uniform", "snr")


@dataclass
class TrainConfig:
    lr_flow: float = 1e-4
    lr_denoiser: float = 2e-4
    batch_size: int = 64
    epochs: int = 1
    max_steps: int | None = None
    w_mode: str = "uniform"
    flow_loss_weight: float = 1.0
    sigma_inf: float = 0.01
    replication: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr_flow <= 0 or self.lr_denoiser <= 0:
            raise ValueError("learning rates must be positive")
        if self.w_mode not in W_MODES:
            raise ValueError(f"w_mode must be one of {W_MODES}, got {self.w_mode!r}")
        if self.flow_loss_weight < 0:
            raise ValueError("flow_loss_weight must be >= 0")
        if self.sigma_inf < 0:
            raise ValueError("sigma_inf must be >= 0")
        if self.batch_size < 1 or self.replication < 1:
            raise ValueError("batch_size and replication must be >= 1")


@dataclass
class LossBreakdown:
    diffusion: float
    det_weight: float
    flow: float
    total: float
    step: int = 0

    def as_row(self) -> dict:
        return {"step": self.step, "total": self.total, "diffusion": self.diffusion,
                "flow": self.flow, "det_weight_mean": self.det_weight}


class TrainingDivergedError(FloatingPointError):
    def __init__(self, i: int, t: int, detail: str = ""):
        self.i, self.t = i, t
        msg = f"non-finite loss at grid point (i={i}, t={t})"
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass
class Optimizers:
    flow: AdamState
    denoiser: AdamState
    embedding: AdamState

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Optimizers":
        return cls(AdamState(lr=config.lr_flow), AdamState(lr=config.lr_denoiser),
                   AdamState(lr=config.lr_denoiser))

    def states(self) -> dict[str, AdamState]:
        return {"denoiser": self.denoiser, "embedding": self.embedding, "flow": self.flow}


def weight_w(t, mode: str, schedule: NoiseSchedule):
    """Per-step loss weight: 1, or ``beta^2 / (2 sigma^2 alpha (1 - alpha_bar))``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"weight_w: t must lie in [1, {schedule.T}]")
    if mode == "uniform":
        out = np.ones(t_arr.shape)
    elif mode == "snr":
        beta = schedule.betas[t_arr]
        sigma2 = schedule.posterior_sigmas[t_arr] ** 2
        out = beta * beta / (2.0 * sigma2 * schedule.alphas[t_arr] * (1.0 - schedule.alpha_bars[t_arr]))
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    return float(out) if t_arr.ndim == 0 else out


def simple_loss(x_i0, x_hat, logdet, t, w_mode: str, schedule: NoiseSchedule) -> Tensor:
    """Batch mean of ``w(t) * exp(-logdet) * mse(x_i0, x_hat)``.

    Inputs are (B, S, D) with per-item ``logdet`` and ``t``; a single (S, D)
    segment is treated as a batch of one.
    """
    x_i0, x_hat, logdet = as_tensor(x_i0), as_tensor(x_hat), as_tensor(logdet)
    if x_i0.ndim == 2:
        x_i0, x_hat = x_i0.reshape(1, *x_i0.shape), x_hat.reshape(1, *x_hat.shape)
        logdet = logdet.reshape(1)
    if x_i0.shape != x_hat.shape:
        raise ValueError(f"simple_loss: shapes {x_i0.shape} and {x_hat.shape} differ")
    if not np.isfinite(logdet.data).all():
        raise NonFiniteError("simple_loss", "simple_loss: logdet is not finite")
    w = Tensor(np.broadcast_to(weight_w(t, w_mode, schedule), (x_i0.shape[0],)).copy())
    per_item = mse(x_i0, x_hat, axis=(1, 2))
    det_weight = exp(neg(logdet))
    return mean(mul(mul(w, det_weight), per_item))


def draw_grid_points(rng: np.random.Generator, batch: int, T: int, L: int, segment_shape):
    """Sample ``t ~ U{1..T}``, the origin noise, then ``i ~ U{0..L-1}``."""
    t = rng.integers(1, T + 1, size=batch)
    eps = rng.standard_normal((batch,) + tuple(segment_shape))
    i = rng.integers(0, L, size=batch)
    return t, i, eps


@dataclass
class _LossParts:
    total: Tensor
    diffusion: Tensor
    flow: Tensor
    det_weight: np.ndarray
    t: np.ndarray
    i: np.ndarray


def _loss_parts(nets: RDMNetworks, segs: np.ndarray, labels, t, i, eps,
                config: TrainConfig, rng: np.random.Generator | None) -> _LossParts:
    schedule = nets.schedule
    B = segs.shape[0]
    emb = nets.condition(labels)
    x00 = Tensor(segs[:, 0])
    x_i0 = Tensor(segs[np.arange(B), i])
    inflate = None
    if rng is not None and config.sigma_inf > 0:
        def inflate(x):
            return config.sigma_inf * rng.standard_normal(x.shape)

    u_t = diffuse_only(x00, t, eps, schedule)
    if i.max() == 0:
        x_it, x_prev = u_t, Tensor(np.zeros(x00.shape))
        logdet = Tensor(np.zeros(B))
    else:
        u_prev = diffuse_only(x00, t - 1, eps, schedule)
        stacked, ld = nets.flow.apply_counts(
            concat([u_t, u_prev], axis=0), concat([emb, emb], axis=0),
            np.concatenate([i, np.maximum(i - 1, 0)]), inflate=inflate)
        x_it = slice_(stacked, slice(0, B))
        has_prev = Tensor((i > 0).astype(np.float64)[:, None, None])
        x_prev = mul(slice_(stacked, slice(B, 2 * B)), has_prev)
        logdet = slice_(ld, slice(0, B))

    x_hat = nets.denoiser(x_it, x_prev, t, i, emb)
    diffusion = simple_loss(x_i0, x_hat, logdet, t, config.w_mode, schedule)

    flow_term = Tensor(0.0)
    if config.flow_loss_weight > 0 and i.max() > 0:
        flow_term = _flow_fit(nets, segs, emb, i, inflate)
        total = add(diffusion, scale(flow_term, config.flow_loss_weight))
    else:
        total = diffusion
    return _LossParts(total, diffusion, flow_term, np.exp(-logdet.data), t, i)


def _flow_fit(nets: RDMNetworks, segs, emb, i, inflate) -> Tensor:
    """Batch mean of ``mse(f(x^{i-1}_0), x^i_0)`` along the true history (0 when i = 0)."""
    flow = nets.flow
    B = segs.shape[0]
    ctx = flow.initial_context(emb)
    per_item = Tensor(np.zeros(B))
    for k in range(int(i.max())):
        x_k = Tensor(segs[:, k])
        ctx = flow.advance(ctx, x_k)
        noise = None if inflate is None else inflate(x_k)
        y, _ = flow.forward(x_k, ctx, inflate_noise=noise)
        sel = Tensor((i == k + 1).astype(np.float64))
        per_item = add(per_item, mul(mse(y, Tensor(segs[:, k + 1]), axis=(1, 2)), sel))
    return mean(per_item)


def compute_loss(nets: RDMNetworks, segs, labels, config: TrainConfig, rng: np.random.Generator):
    """Draw grid points from ``rng`` and build the loss graph.

    ``segs`` is (B, L, S, D).  Returns ``(total, LossBreakdown)``.
    """
    segs = np.asarray(segs, dtype=np.float64)
    B, L = segs.shape[:2]
    t, i, eps = draw_grid_points(rng, B, nets.schedule.T, L, segs.shape[2:])
    try:
        parts = _loss_parts(nets, segs, labels, t, i, eps, config, rng)
    except NonFiniteError as exc:
        gi, gt = _locate_failure(nets, segs, labels, t, i, eps, config)
        raise TrainingDivergedError(gi, gt, str(exc)) from exc
    breakdown = LossBreakdown(float(parts.diffusion.data), float(parts.det_weight.mean()),
                              float(parts.flow.data), float(parts.total.data))
    return parts.total, breakdown


def _locate_failure(nets, segs, labels, t, i, eps, config):
    labels = np.asarray(labels)
    with no_grad():
        for b in np.argsort(-i, kind="stable"):
            sl = slice(b, b + 1)
            try:
                _loss_parts(nets, segs[sl], labels[sl], t[sl], i[sl], eps[sl], config, None)
            except NonFiniteError:
                return int(i[b]), int(t[b])
    return int(i.max()), int(t[np.argmax(i)])


def training_step(nets: RDMNetworks, segs, labels, config: TrainConfig,
                  optimizers: Optimizers, rng: np.random.Generator) -> LossBreakdown:
    """One Monte-Carlo loss evaluation followed by an Adam step per parameter group."""
    stores = nets.stores()
    for store in stores.values():
        store.zero_grad()
    total, breakdown = compute_loss(nets, segs, labels, config, rng)
    backward(total)
    states = optimizers.states()
    for name, store in stores.items():
        for _, p in store.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adam_step(store, states[name])
    return breakdown

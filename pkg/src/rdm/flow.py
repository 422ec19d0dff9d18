"""Conditional affine-coupling flow with a recurrent context.

The flow maps one segment (``S`` frames of ``D`` features) to the next
temporal step.  Each frame is transformed independently by a stack of coupling
blocks whose scale and shift networks see the untouched half of the frame and
a per-sequence context vector.  The context is the hidden state of an LSTM
cell that consumes the frame-mean of each segment it is about to transform,
together with the condition embedding.

Because a context depends on the segment it was computed from, inverting a
step needs the context that the forward step used.  :meth:`ConditionalFlow.apply_n`
returns that list of contexts (a *trace*) and :meth:`ConditionalFlow.inverse_n`
replays it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._layers import dense, init_dense
from .numerics import (
    NonFiniteError,
    ParamStore,
    Tensor,
    add,
    as_tensor,
    concat,
    exp,
    hardtanh,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    sigmoid,
    slice_,
    sub,
    take,
    tanh,
    tsum,
)

__all__ = [
    "ConditionalFlow",
    "FlowContext",
    "FlowTrace",
    "FlowInstabilityError",
    "ContextError",
    "inflate_input",
    "logdet_check",
]


class FlowInstabilityError(NonFiniteError):
    """A coupling block produced NaN or infinity."""

    def __init__(self, block: int, direction: str, step: int | None = None):
        self.block = block
        self.direction = direction
        self.step = step
        where = f"block {block}" + ("" if step is None else f" at flow step {step}")
        super().__init__("flow", f"numerical instability in {direction} flow, {where}")


class ContextError(ValueError):
    """The cached contexts cannot reconstruct the requested inversion."""


@dataclass(frozen=True)
class FlowContext:
    """Recurrent state for one flow application.

    ``index`` counts how many segments the state has consumed, so the context
    used by the k-th application (0-based) has ``index == k + 1``.
    """

    h: Tensor
    c: Tensor
    emb: Tensor
    index: int = 0

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]


@dataclass
class FlowTrace:
    contexts: list[FlowContext] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.contexts)

    def extended(self, ctx: FlowContext) -> "FlowTrace":
        return FlowTrace(self.contexts + [ctx])


def inflate_input(x, sigma_inf: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``x`` plus isotropic Gaussian noise of standard deviation ``sigma_inf``."""
    if sigma_inf < 0:
        raise ValueError(f"sigma_inf must be >= 0, got {sigma_inf}")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if sigma_inf == 0:
        return x.copy()
    return x + sigma_inf * rng.standard_normal(x.shape)


class ConditionalFlow:
    """Stack of ``n_blocks`` affine couplings sharing one LSTM context cell.

    Parameters
    ----------
    n_features : int
        Feature width ``D`` of a frame (at least 2).
    context_size : int
        LSTM hidden size ``H``; also the condition-embedding width.
    n_blocks : int
        Number of coupling blocks ``K``.
    coupling_hidden : int
        Hidden width of every scale/shift network.
    clamp : tuple of float
        HardTanh limits applied to the raw log-scale.
    final_init_std : float
        Init std for the last layer of every scale/shift network.  The default
        0 makes a fresh flow the exact identity.
    """

    def __init__(self, n_features: int, context_size: int = 64, n_blocks: int = 6,
                 coupling_hidden: int = 32, clamp: tuple[float, float] = (-0.1, 0.1),
                 final_init_std: float = 0.0, random_state=None):
        if n_features < 2:
            raise ValueError("coupling needs at least 2 features")
        if n_blocks < 1:
            raise ValueError("need at least one coupling block")
        lo, hi = clamp
        if not lo < 0 < hi:
            raise ValueError(f"clamp must straddle 0, got {clamp}")
        self.n_features = n_features
        self.context_size = context_size
        self.n_blocks = n_blocks
        self.coupling_hidden = coupling_hidden
        self.clamp = (float(lo), float(hi))
        rng = np.random.default_rng(random_state)
        self.params = ParamStore()
        D, H, Hc = n_features, context_size, coupling_hidden
        self._split = []
        for k in range(n_blocks):
            pass_idx = np.array([d for d in range(D) if (d + k) % 2 == 0])
            tr_idx = np.array([d for d in range(D) if (d + k) % 2 == 1])
            inv = np.argsort(np.concatenate([pass_idx, tr_idx]))
            self._split.append((pass_idx, tr_idx, inv))
            for net in ("scale", "shift"):
                prefix = f"block{k}.{net}"
                init_dense(self.params, f"{prefix}.in", len(pass_idx), Hc, rng)
                self.params.add(f"{prefix}.ctx.W", rng.standard_normal((H, Hc)) / np.sqrt(H))
                init_dense(self.params, f"{prefix}.out", Hc, len(tr_idx), rng, std=final_init_std)
        init_dense(self.params, "lstm", D + 2 * H, 4 * H, rng)
        bias = self.params["lstm.b"].data
        bias[H:2 * H] = 1.0  # forget gate

    def masks(self) -> list[np.ndarray]:
        """Binary pass-through masks, one per block (1 = conditioning feature)."""
        out = []
        for pass_idx, _, _ in self._split:
            m = np.zeros(self.n_features, dtype=int)
            m[pass_idx] = 1
            out.append(m)
        return out

    def transformed_per_block(self) -> list[int]:
        return [len(tr) for _, tr, _ in self._split]

    # --- context -----------------------------------------------------------

    def initial_context(self, emb) -> FlowContext:
        """Zero recurrent state for a batch with condition embeddings ``emb`` (B, H)."""
        emb = as_tensor(emb)
        if emb.ndim != 2 or emb.shape[1] != self.context_size:
            raise ValueError(f"embedding must have shape (B, {self.context_size}), got {emb.shape}")
        zeros = Tensor(np.zeros((emb.shape[0], self.context_size)))
        return FlowContext(zeros, zeros, emb, 0)

    def advance(self, ctx: FlowContext, x) -> FlowContext:
        """Feed the frame-mean of segment ``x`` (B, S, D) through the LSTM cell."""
        x = as_tensor(x)
        H = self.context_size
        pooled = mean(x, axis=1)
        gates = dense(self.params, "lstm", concat([pooled, ctx.emb, ctx.h], axis=-1))
        i_g = sigmoid(slice_(gates, (slice(None), slice(0, H))))
        f_g = sigmoid(slice_(gates, (slice(None), slice(H, 2 * H))))
        g_g = tanh(slice_(gates, (slice(None), slice(2 * H, 3 * H))))
        o_g = sigmoid(slice_(gates, (slice(None), slice(3 * H, 4 * H))))
        c = add(mul(f_g, ctx.c), mul(i_g, g_g))
        h = mul(o_g, tanh(c))
        return FlowContext(h, c, ctx.emb, ctx.index + 1)

    # --- single step -------------------------------------------------------

    def _scale_shift(self, k: int, cond_in: Tensor, ctx: FlowContext) -> tuple[Tensor, Tensor]:
        B = cond_in.shape[0]
        out = []
        for net in ("scale", "shift"):
            prefix = f"block{k}.{net}"
            ctx_proj = reshape(matmul(ctx.h, self.params[f"{prefix}.ctx.W"]), (B, 1, self.coupling_hidden))
            hidden = tanh(add(dense(self.params, f"{prefix}.in", cond_in), ctx_proj))
            out.append(dense(self.params, f"{prefix}.out", hidden))
        lo, hi = self.clamp
        return hardtanh(out[0], lo, hi), out[1]

    def forward(self, x, ctx: FlowContext, inflate_noise=None) -> tuple[Tensor, Tensor]:
        """One flow application to ``x`` (B, S, D); returns (y, per-item logdet)."""
        x = as_tensor(x)
        self._check_input(x, ctx)
        noise = None if inflate_noise is None else np.asarray(inflate_noise, dtype=np.float64)
        block_logdets = []
        for k, (pass_idx, tr_idx, inv) in enumerate(self._split):
            try:
                xp = take(x, pass_idx, axis=-1)
                xt = take(x, tr_idx, axis=-1)
                cond_in = xp if noise is None else add(xp, noise[..., pass_idx])
                s, m = self._scale_shift(k, cond_in, ctx)
                yt = add(mul(xt, exp(s)), m)
                x = take(concat([xp, yt], axis=-1), inv, axis=-1)
            except NonFiniteError:
                raise FlowInstabilityError(k, "forward", ctx.index - 1) from None
            block_logdets.append(tsum(s, axis=(1, 2)))
        return x, _sum_in_order(block_logdets)

    def inverse(self, y, ctx: FlowContext) -> tuple[Tensor, Tensor]:
        """Exact algebraic inverse of :meth:`forward` under the same context."""
        y = as_tensor(y)
        self._check_input(y, ctx)
        block_logdets = [None] * self.n_blocks
        for k in reversed(range(self.n_blocks)):
            pass_idx, tr_idx, inv = self._split[k]
            try:
                yp = take(y, pass_idx, axis=-1)
                yt = take(y, tr_idx, axis=-1)
                s, m = self._scale_shift(k, yp, ctx)
                xt = mul(sub(yt, m), exp(-s))
                y = take(concat([yp, xt], axis=-1), inv, axis=-1)
            except NonFiniteError:
                raise FlowInstabilityError(k, "inverse", ctx.index - 1) from None
            block_logdets[k] = tsum(s, axis=(1, 2))
        # sum in forward block order so that the two directions agree bitwise
        # whenever the recomputed scales do
        return y, -_sum_in_order(block_logdets)

    def _check_input(self, x: Tensor, ctx: FlowContext) -> None:
        if x.ndim != 3 or x.shape[2] != self.n_features:
            raise ValueError(f"flow input must have shape (B, S, {self.n_features}), got {x.shape}")
        if x.shape[0] != ctx.batch_size:
            raise ValueError(f"batch size {x.shape[0]} does not match context batch {ctx.batch_size}")
        if not np.isfinite(x.data).all():
            raise FlowInstabilityError(0, "input", ctx.index - 1)

    # --- iterated ----------------------------------------------------------

    def apply_n(self, x0, emb, n: int, ctx: FlowContext | None = None, trace: FlowTrace | None = None):
        """Apply the flow ``n`` times, advancing the context before each step.

        Returns ``(x_n, cumulative logdet, final context, trace)``.  When
        ``ctx``/``trace`` are given the traversal continues from them.
        """
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        x = as_tensor(x0)
        ctx = self.initial_context(emb) if ctx is None else ctx
        trace = FlowTrace() if trace is None else FlowTrace(list(trace.contexts))
        logdet = Tensor(np.zeros(x.shape[0]))
        for _ in range(n):
            ctx = self.advance(ctx, x)
            trace.contexts.append(ctx)
            x, ld = self.forward(x, ctx)
            logdet = add(logdet, ld)
        return x, logdet, ctx, trace

    def inverse_n(self, y, n: int, trace: FlowTrace) -> tuple[Tensor, Tensor]:
        """Undo ``n`` applications using the first ``n`` cached contexts."""
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        if len(trace) < n:
            raise ContextError(f"cannot invert {n} flow steps: only {len(trace)} cached contexts")
        x = as_tensor(y)
        logdet = Tensor(np.zeros(x.shape[0]))
        for ctx in reversed(trace.contexts[:n]):
            x, ld = self.inverse(x, ctx)
            logdet = add(logdet, ld)
        return x, logdet

    def apply_counts(self, x0, emb, counts, inflate=None):
        """Batched apply where row ``b`` is flowed exactly ``counts[b]`` times.

        Rows that have reached their count are carried through unchanged via
        exact 0/1 masking.  ``inflate`` is an optional callable returning noise
        for the coupling-network inputs at each step.
        """
        counts = np.asarray(counts, dtype=int)
        x = as_tensor(x0)
        B = x.shape[0]
        ctx = self.initial_context(emb)
        logdet = Tensor(np.zeros(B))
        for k in range(int(counts.max(initial=0))):
            active = (counts > k).astype(np.float64)
            ctx = self.advance(ctx, x)
            noise = None if inflate is None else inflate(x)
            y, ld = self.forward(x, ctx, inflate_noise=noise)
            if active.all():
                x, logdet = y, add(logdet, ld)
            else:
                keep = Tensor((1.0 - active)[:, None, None])
                x = add(mul(y, Tensor(active[:, None, None])), mul(x, keep))
                logdet = add(logdet, mul(ld, Tensor(active)))
        return x, logdet


def _sum_in_order(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def logdet_check(flow: ConditionalFlow, ctx: FlowContext, frame=None, h: float = 1e-6,
                 random_state=None) -> float:
    """Relative error of the analytic log-det against a finite-difference Jacobian.

    Evaluated for a single frame of the first batch item.  Only tractable for
    small ``D``; larger widths are rejected.  The error is divided by
    ``max(|numeric|, 1)`` so that a near-zero log-det is compared absolutely.
    """
    D = flow.n_features
    if D > 6:
        raise ValueError(f"logdet_check supports D <= 6, got D={D}")
    if frame is None:
        frame = np.random.default_rng(random_state).standard_normal(D)
    frame = np.asarray(frame, dtype=np.float64).reshape(D)
    ctx1 = FlowContext(Tensor(ctx.h.data[:1]), Tensor(ctx.c.data[:1]), Tensor(ctx.emb.data[:1]), ctx.index)
    with no_grad():
        _, analytic = flow.forward(frame.reshape(1, 1, D), ctx1)
        jac = np.empty((D, D))
        for d in range(D):
            step = np.zeros(D)
            step[d] = h
            yp, _ = flow.forward((frame + step).reshape(1, 1, D), ctx1)
            ym, _ = flow.forward((frame - step).reshape(1, 1, D), ctx1)
            jac[:, d] = (yp.data - ym.data).reshape(D) / (2 * h)
    sign, numeric = np.linalg.slogdet(jac)
    if sign == 0 or not np.isfinite(numeric):
        raise np.linalg.LinAlgError("finite-difference Jacobian is singular")
    a = float(analytic.data[0])
    # relative above |logdet| = 1, absolute below it (near-identity flows)
    return abs(a - numeric) / max(abs(numeric), 1.0)

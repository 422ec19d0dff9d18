"""Generative routes through the (temporal, diffusion) grid.

All samplers work on plain arrays of shape (B, S, D) per segment and share one
per-segment update: map the segment back to the temporal origin with the
inverse flow, take a reverse diffusion step there, and flow the result
forward again.

Reverse steps are indexed by *position* in the step list returned by
:func:`rdm.schedule.ddim_subschedule` (position 0 is step T).  Segment ``j``
enters at position ``p_j``; with the full schedule that is diffusion step
``t_start - (j - 1)`` for ``j >= 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .denoiser import epsilon_from_x0, previous_placeholder
from .flow import ConditionalFlow, FlowContext, FlowTrace
from .numerics import NonFiniteError, Tensor, no_grad
from .schedule import NoiseSchedule, ddim_subschedule

__all__ = [
    "MODES",
    "SamplerPlan",
    "CallCounter",
    "SampleResult",
    "RolloutResult",
    "PlanningError",
    "SamplingInstabilityError",
    "reverse_step",
    "staircase_sample",
    "disentangled_sample",
    "autoregressive_sample",
    "volume_sample",
    "sample",
    "rollout_beyond",
    "predict_calls",
    "noise_proxy",
]

MODES = ("staircase", "disentangled", "autoregressive", "volume")

Denoise = Callable[..., np.ndarray]


class PlanningError(ValueError):
    """The plan cannot be executed on this schedule."""


class SamplingInstabilityError(FloatingPointError):
    def __init__(self, segment: int, detail: str = ""):
        self.segment = segment
        msg = f"non-finite values while generating segment {segment}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class SamplerPlan:
    """How to traverse the grid.

    ``t_start`` is the diffusion step at which segment 1 is introduced.  It
    may be an int, ``None`` (``T - 3``) or ``"segments"`` (the denoising step
    whose 1-based position equals ``L_target``).  ``n_steps=None`` uses every
    step, which selects ancestral DDPM updates; fewer steps select DDIM.
    """

    mode: str = "staircase"
    t_start: int | str | None = None
    n_steps: int | None = None
    L_target: int = 4
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise PlanningError(f"unknown sampler mode {self.mode!r}; expected one of {MODES}")
        if self.L_target < 1:
            raise PlanningError(f"L_target must be >= 1, got {self.L_target}")
        if self.eta < 0:
            raise PlanningError(f"eta must be >= 0, got {self.eta}")

    def steps(self, T: int) -> list[int]:
        n = T if self.n_steps is None else self.n_steps
        try:
            return ddim_subschedule(T, n)
        except ValueError as exc:
            raise PlanningError(str(exc)) from None

    def resolve_t_start(self, T: int) -> int:
        if self.t_start is None:
            t_start = max(1, T - 3)
        elif self.t_start == "segments":
            steps = self.steps(T)
            t_start = steps[min(self.L_target, len(steps)) - 1]
        else:
            t_start = int(self.t_start)
        if not 1 <= t_start <= T:
            raise PlanningError(f"t_start must lie in [1, {T}], got {t_start}")
        return t_start

    def entry_positions(self, T: int) -> list[int]:
        """Position at which each segment becomes live (staircase order)."""
        steps = self.steps(T)
        if self.L_target == 1:
            return [0]
        t_start = self.resolve_t_start(T)
        p_start = next(p for p, t in enumerate(steps) if t <= t_start)
        last = p_start + self.L_target - 2
        if last > len(steps) - 1:
            raise PlanningError(
                f"t_start={t_start} leaves too few reverse steps to introduce "
                f"{self.L_target} segments over {len(steps)} steps")
        return [0] + [p_start + j - 1 for j in range(1, self.L_target)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CallCounter:
    denoiser_calls: int = 0
    flow_forward_calls: int = 0
    flow_inverse_calls: int = 0

    @property
    def flow_calls(self) -> int:
        return self.flow_forward_calls + self.flow_inverse_calls

    def to_dict(self) -> dict:
        return {"denoiser_calls": self.denoiser_calls, "flow_forward_calls": self.flow_forward_calls,
                "flow_inverse_calls": self.flow_inverse_calls, "flow_calls": self.flow_calls}


@dataclass
class SampleResult:
    segments: np.ndarray  # (B, L_target, S, D)
    counter: CallCounter
    plan: SamplerPlan

    def sequences(self) -> np.ndarray:
        B, L, S, D = self.segments.shape
        return self.segments.reshape(B, L * S, D)


@dataclass
class RolloutResult(SampleResult):
    trained_L: int = 0
    noise_proxy: list[float] = field(default_factory=list)

    @property
    def beyond_horizon(self) -> list[int]:
        return list(range(self.trained_L, self.segments.shape[1]))


# --- single reverse step ------------------------------------------------------


def reverse_step(x_t, t: int, x0_hat, schedule: NoiseSchedule, rng: np.random.Generator | None,
                 eta: float = 0.0, t_prev: int | None = None) -> np.ndarray:
    """One reverse update from step ``t`` given a clean-segment estimate.

    With ``t_prev=None`` this is the ancestral DDPM update with
    ``sigma_t^2 = beta_t`` (noise drawn only for ``t > 1``).  Otherwise it is
    the DDIM update to ``t_prev``; noise is drawn once per call iff ``eta > 0``.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"reverse_step: t must lie in [1, {schedule.T}], got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    ab_t = schedule.alpha_bars[t]
    eps_hat = epsilon_from_x0(x_t, x0_hat, ab_t)
    if t_prev is None:
        beta = schedule.betas[t]
        mean = (x_t - (beta / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(schedule.alphas[t])
        if t > 1:
            return mean + schedule.posterior_sigmas[t] * rng.standard_normal(x_t.shape)
        return mean
    if not 0 <= t_prev < t:
        raise ValueError(f"reverse_step: need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    ab_prev = schedule.alpha_bars[t_prev]
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + direction * eps_hat
    if eta > 0:
        out = out + sigma * rng.standard_normal(x_t.shape)
    return out


# --- flow bookkeeping -----------------------------------------------------------


class _Transport:
    """Counted, gradient-free flow traversals for one sampling run."""

    def __init__(self, flow: ConditionalFlow, emb: np.ndarray, counter: CallCounter):
        self.flow = flow
        self.emb = Tensor(emb)
        self.counter = counter

    def from_origin(self, x0: np.ndarray, n: int) -> tuple[np.ndarray, FlowTrace]:
        with no_grad():
            x, _, _, trace = self.flow.apply_n(x0, self.emb, n)
        self.counter.flow_forward_calls += n
        return x.data, trace

    def to_origin(self, x: np.ndarray, n: int, trace: FlowTrace) -> np.ndarray:
        with no_grad():
            out, _ = self.flow.inverse_n(x, n, trace)
        self.counter.flow_inverse_calls += n
        return out.data

    def one_more(self, x: np.ndarray, trace: FlowTrace) -> tuple[np.ndarray, FlowTrace]:
        """Flow ``x`` one further temporal step, continuing ``trace``."""
        with no_grad():
            ctx: FlowContext = trace.contexts[-1] if len(trace) else self.flow.initial_context(self.emb)
            ctx = self.flow.advance(ctx, x)
            y, _ = self.flow.forward(x, ctx)
        self.counter.flow_forward_calls += 1
        return y.data, trace.extended(ctx)


def _resolve_emb(flow: ConditionalFlow | None, labels, emb) -> np.ndarray:
    B = len(labels)
    if emb is not None:
        return np.asarray(emb.data if isinstance(emb, Tensor) else emb, dtype=np.float64)
    width = flow.context_size if flow is not None else 1
    return np.zeros((B, width))


def _segment_update(j, x_j, trace_j, x_prev, t, t_prev, denoiser, transport, schedule,
                    rng, eta, labels, counter):
    x0_hat = denoiser(x_j, x_prev, t, j, labels)
    counter.denoiser_calls += 1
    origin = transport.to_origin(x_j, j, trace_j)
    origin_hat = transport.to_origin(x0_hat, j, trace_j)
    origin = reverse_step(origin, t, origin_hat, schedule, rng, eta, t_prev)
    return transport.from_origin(origin, j)


def _step_pairs(steps: list[int], ddim: bool):
    for pos, t in enumerate(steps):
        t_prev = (steps[pos + 1] if pos + 1 < len(steps) else 0) if ddim else None
        yield pos, t, t_prev


def _guard(j: int, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise SamplingInstabilityError(j)


# --- samplers -------------------------------------------------------------------


def staircase_sample(denoiser: Denoise, flow: ConditionalFlow, schedule: NoiseSchedule,
                     plan: SamplerPlan, labels, rng: np.random.Generator,
                     segment_shape: tuple[int, int], emb=None) -> SampleResult:
    """Introduce one segment per reverse step and denoise all live segments jointly."""
    steps = plan.steps(schedule.T)
    entry = plan.entry_positions(schedule.T)
    ddim = len(steps) < schedule.T
    labels = np.asarray(labels)
    B = len(labels)
    S, D = segment_shape
    counter = CallCounter()
    transport = _Transport(flow, _resolve_emb(flow, labels, emb), counter)

    states = [rng.standard_normal((B, S, D))]
    traces = [FlowTrace()]
    zeros = previous_placeholder(B, S, D)
    for pos, t, t_prev in _step_pairs(steps, ddim):
        while len(states) < plan.L_target and entry[len(states)] == pos:
            j = len(states)
            try:
                new, trace = transport.one_more(states[j - 1], traces[j - 1])
            except NonFiniteError as exc:
                raise SamplingInstabilityError(j, str(exc)) from None
            states.append(new)
            traces.append(trace)
        for j in range(len(states)):
            x_prev = states[j - 1] if j > 0 else zeros
            try:
                states[j], traces[j] = _segment_update(
                    j, states[j], traces[j], x_prev, t, t_prev, denoiser, transport,
                    schedule, rng, plan.eta, labels, counter)
            except NonFiniteError as exc:
                raise SamplingInstabilityError(j, str(exc)) from None
            _guard(j, states[j])
    return SampleResult(np.stack(states, axis=1), counter, plan)


def disentangled_sample(denoiser: Denoise, flow: ConditionalFlow, schedule: NoiseSchedule,
                        plan: SamplerPlan, labels, rng: np.random.Generator,
                        segment_shape: tuple[int, int], emb=None) -> SampleResult:
    """Fully denoise segment 0, then produce the rest with the flow alone."""
    steps = plan.steps(schedule.T)
    ddim = len(steps) < schedule.T
    labels = np.asarray(labels)
    B = len(labels)
    S, D = segment_shape
    counter = CallCounter()
    transport = _Transport(flow, _resolve_emb(flow, labels, emb), counter)
    zeros = previous_placeholder(B, S, D)
    x = rng.standard_normal((B, S, D))
    for _, t, t_prev in _step_pairs(steps, ddim):
        x0_hat = denoiser(x, zeros, t, 0, labels)
        counter.denoiser_calls += 1
        x = reverse_step(x, t, x0_hat, schedule, rng, plan.eta, t_prev)
    _guard(0, x)
    out, trace = [x], FlowTrace()
    for j in range(1, plan.L_target):
        try:
            x, trace = transport.one_more(x, trace)
        except NonFiniteError as exc:
            raise SamplingInstabilityError(j, str(exc)) from None
        out.append(x)
    return SampleResult(np.stack(out, axis=1), counter, plan)


def autoregressive_sample(denoiser: Denoise, flow: ConditionalFlow, schedule: NoiseSchedule,
                          plan: SamplerPlan, labels, rng: np.random.Generator,
                          segment_shape: tuple[int, int], emb=None) -> SampleResult:
    """Fully denoise each segment before starting the next.

    Segment ``j`` is conditioned on the finished segment ``j - 1`` and uses the
    same origin-space update as the staircase route.
    """
    steps = plan.steps(schedule.T)
    ddim = len(steps) < schedule.T
    labels = np.asarray(labels)
    B = len(labels)
    S, D = segment_shape
    counter = CallCounter()
    transport = _Transport(flow, _resolve_emb(flow, labels, emb), counter)
    prev = previous_placeholder(B, S, D)
    out = []
    for j in range(plan.L_target):
        try:
            x, trace = transport.from_origin(rng.standard_normal((B, S, D)), j)
            for _, t, t_prev in _step_pairs(steps, ddim):
                x, trace = _segment_update(j, x, trace, prev, t, t_prev, denoiser, transport,
                                           schedule, rng, plan.eta, labels, counter)
        except NonFiniteError as exc:
            raise SamplingInstabilityError(j, str(exc)) from None
        _guard(j, x)
        out.append(x)
        prev = x
    return SampleResult(np.stack(out, axis=1), counter, plan)


def volume_sample(denoiser: Denoise, flow: ConditionalFlow | None, schedule: NoiseSchedule,
                  plan: SamplerPlan, labels, rng: np.random.Generator,
                  segment_shape: tuple[int, int], emb=None) -> SampleResult:
    """Denoise every segment in one batched call per step, without the flow.

    Emulates a whole-sequence model: a single network evaluation per reverse
    step whose cost grows with the number of segments.
    """
    steps = plan.steps(schedule.T)
    ddim = len(steps) < schedule.T
    labels = np.asarray(labels)
    B = len(labels)
    S, D = segment_shape
    L = plan.L_target
    counter = CallCounter()
    x = rng.standard_normal((L, B, S, D))
    seg_index = np.repeat(np.arange(L), B)
    tiled_labels = np.tile(labels, L)
    for _, t, t_prev in _step_pairs(steps, ddim):
        prev = np.concatenate([previous_placeholder(B, S, D)[None], x[:-1]])
        x0_hat = denoiser(x.reshape(L * B, S, D), prev.reshape(L * B, S, D), t, seg_index, tiled_labels)
        counter.denoiser_calls += 1
        x = reverse_step(x, t, x0_hat.reshape(L, B, S, D), schedule, rng, plan.eta, t_prev)
    for j in range(L):
        _guard(j, x[j])
    return SampleResult(np.moveaxis(x, 0, 1).copy(), counter, plan)


_SAMPLERS = {
    "staircase": staircase_sample,
    "disentangled": disentangled_sample,
    "autoregressive": autoregressive_sample,
    "volume": volume_sample,
}


def sample(denoiser: Denoise, flow: ConditionalFlow, schedule: NoiseSchedule, plan: SamplerPlan,
           labels, rng: np.random.Generator, segment_shape: tuple[int, int], emb=None) -> SampleResult:
    return _SAMPLERS[plan.mode](denoiser, flow, schedule, plan, labels, rng, segment_shape, emb)


def noise_proxy(segments: np.ndarray) -> list[float]:
    """Mean squared frame-to-frame increment of each segment; (B, L, S, D) input."""
    segments = np.asarray(segments)
    if segments.shape[2] < 2:
        return [0.0] * segments.shape[1]
    inc = np.diff(segments, axis=2)
    return [float(np.mean(inc[:, j] ** 2)) for j in range(segments.shape[1])]


def rollout_beyond(denoiser: Denoise, flow: ConditionalFlow, schedule: NoiseSchedule,
                   plan: SamplerPlan, labels, rng: np.random.Generator,
                   segment_shape: tuple[int, int], trained_L: int, emb=None) -> RolloutResult:
    """Staircase generation past the training horizon.

    New segments keep entering one reverse step apart.  Every segment's noise
    proxy is reported so that drift over long rollouts can be inspected.
    """
    if plan.mode != "staircase":
        raise PlanningError("rollout continues the staircase route; use mode='staircase'")
    if plan.L_target <= trained_L:
        raise PlanningError(f"rollout needs L_target > trained L={trained_L}, got {plan.L_target}")
    res = staircase_sample(denoiser, flow, schedule, plan, labels, rng, segment_shape, emb)
    for j in range(res.segments.shape[1]):
        _guard(j, res.segments[:, j])
    return RolloutResult(res.segments, res.counter, plan, trained_L, noise_proxy(res.segments))


def predict_calls(plan: SamplerPlan, T: int, L: int | None = None) -> CallCounter:
    """Closed-form call counts for ``plan`` on a ``T``-step schedule.

    ``c_j`` below is the number of reverse steps segment ``j`` takes part in.
    Each such step costs one denoiser call, ``2 j`` inverse flow steps (state
    and prediction) and ``j`` forward flow steps.
    """
    if L is not None and L != plan.L_target:
        plan = SamplerPlan(plan.mode, plan.t_start, plan.n_steps, L, plan.eta, plan.seed)
    L = plan.L_target
    n = len(plan.steps(T))
    seg = np.arange(L)
    if plan.mode == "staircase":
        live = n - np.asarray(plan.entry_positions(T))
        weighted = int(np.sum(seg * live))
        return CallCounter(int(live.sum()), weighted + (L - 1), 2 * weighted)
    if plan.mode == "autoregressive":
        j_sum = int(seg.sum())
        return CallCounter(L * n, j_sum * n + j_sum, 2 * j_sum * n)
    if plan.mode == "disentangled":
        return CallCounter(n, L - 1, 0)
    return CallCounter(n, 0, 0)


def segment_cost(plan: SamplerPlan) -> int:
    """Relative cost of one denoiser call; a volume call processes all segments."""
    return plan.L_target if plan.mode == "volume" else 1

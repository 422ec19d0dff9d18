"""Analytic vs finite-difference gradient suites, runnable from the command line."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .networks import ModelConfig, RDMNetworks
from .numerics import ParamStore, grad_check
from .training import TrainConfig, compute_loss

__all__ = ["GradResult", "op_suite", "training_suite", "run_all", "tiny_training_problem"]

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def _op_cases(rng: np.random.Generator) -> dict[str, Callable[[ParamStore], nx.Tensor]]:
    return {
        "matmul": lambda p: nx.tsum(nx.matmul(p["a"], p["b"])),
        "add_broadcast": lambda p: nx.tsum(nx.square(nx.add(p["a"], p["v"]))),
        "mul_div": lambda p: nx.tsum(nx.div(nx.mul(p["a"], p["a"]), nx.add(nx.exp(p["a"]), nx.Tensor(1.0)))),
        "tanh_sigmoid": lambda p: nx.mean(nx.mul(nx.tanh(p["a"]), nx.sigmoid(p["a"]))),
        "hardtanh": lambda p: nx.tsum(nx.hardtanh(nx.scale(p["a"], 0.3), -0.5, 0.5)),
        "concat_slice": lambda p: nx.tsum(nx.square(nx.slice_(nx.concat([p["a"], p["a"]], axis=0), slice(1, 4)))),
        "take_reshape": lambda p: nx.tsum(nx.square(nx.reshape(nx.take(p["b"], np.array([0, 2, 2]), axis=0), (-1,)))),
        "swapaxes_mean": lambda p: nx.mean(nx.square(nx.swapaxes(p["a"], 0, 1)), axis=0).sum(),
        "mse": lambda p: nx.mse(p["a"], nx.Tensor(np.ones((3, 4)))),
    }


def op_suite(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in _op_cases(rng).items():
        store = ParamStore({"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2)),
                            "v": rng.standard_normal(4)})
        used = _used_params(fn, store)
        out.append(GradResult(f"op:{name}", grad_check(lambda: fn(store), used)))
    return out


def _used_params(fn, store: ParamStore):
    # params untouched by ``fn`` get no gradient; skip them
    store.zero_grad()
    nx.backward(fn(store))
    used = [(n, p) for n, p in store.items() if p.grad is not None and np.any(p.grad != 0)]
    store.zero_grad()
    return used


def tiny_training_problem(seed: int = 0, L: int = 2, S: int = 2, D: int = 2, K: int = 2, B: int = 3,
                          T: int = 10, flow_init_std: float = 0.3):
    """Small networks with non-trivial flow weights and a fixed batch."""
    cfg = ModelConfig(n_features=D, segment_length=S, n_segments=L, n_labels=2, T=T,
                      flow_blocks=K, context_size=4, coupling_hidden=3, clamp=0.5,
                      denoiser_width=6, denoiser_depth=2, step_width=4)
    nets = RDMNetworks(cfg, random_state=seed, flow_init_std=flow_init_std)
    rng = np.random.default_rng(seed + 1)
    segs = rng.standard_normal((B, L, S, D))
    labels = rng.integers(0, 2, size=B)
    return nets, segs, labels


def training_suite(seed: int = 0) -> list[GradResult]:
    """Full training loss (diffusion term with exp(-logdet) weight plus flow fit) per parameter group."""
    nets, segs, labels = tiny_training_problem(seed)
    config = TrainConfig(sigma_inf=0.01, flow_loss_weight=1.0)
    # this seed draws both i = 0 and i = 1 rows, so every parameter is reached
    draw_seed = 3

    def loss():
        total, _ = compute_loss(nets, segs, labels, config, np.random.default_rng(draw_seed))
        return total

    params = [(f"{g}.{n}", p) for g, store in nets.stores().items() for n, p in store.items()]
    return [GradResult("training:full_loss", grad_check(loss, params))]


def run_all(seed: int = 0) -> list[GradResult]:
    return op_suite(seed) + training_suite(seed)

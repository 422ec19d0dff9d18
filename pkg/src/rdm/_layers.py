"""Small dense-layer helpers over a ParamStore."""

from __future__ import annotations

import numpy as np

from .numerics import ParamStore, Tensor, add, matmul

# Fan-in scaled normal init; ``std=0`` gives an all-zero layer.


def init_dense(store: ParamStore, prefix: str, n_in: int, n_out: int,
               rng: np.random.Generator, std: float | None = None) -> None:
    if std is None:
        std = 1.0 / np.sqrt(n_in)
    weight = rng.standard_normal((n_in, n_out)) * std if std > 0 else np.zeros((n_in, n_out))
    store.add(f"{prefix}.W", weight)
    store.add(f"{prefix}.b", np.zeros(n_out))


def dense(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return add(matmul(x, store[f"{prefix}.W"]), store[f"{prefix}.b"])

"""Clean-segment predictor conditioned on the previous temporal step."""

from __future__ import annotations

import numpy as np

from ._layers import dense, init_dense
from .numerics import (
    ParamStore,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    matmul,
    reshape,
    scale,
    swapaxes,
    tanh,
    tsum,
)

__all__ = ["encode_step", "previous_placeholder", "Denoiser", "denoise_predict", "epsilon_from_x0"]


def encode_step(t, width: int = 32) -> np.ndarray:
    """Interleaved sin/cos encoding at frequencies ``10000 ** (-2k / width)``.

    Scalar ``t`` gives a ``(width,)`` vector, an array of steps gives
    ``(len(t), width)``.
    """
    if width % 2:
        raise ValueError(f"encoding width must be even, got {width}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("step index must be >= 0")
    freqs = 10000.0 ** (-2.0 * np.arange(width // 2) / width)
    angles = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (width,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def previous_placeholder(batch: int, S: int, D: int) -> np.ndarray:
    """Stand-in for the previous segment at temporal step 0 (all zeros)."""
    return np.zeros((batch, S, D))


def epsilon_from_x0(x_t, x0_hat, alpha_bar: float):
    return (x_t - np.sqrt(alpha_bar) * x0_hat) / np.sqrt(1.0 - alpha_bar)


class Denoiser:
    """Feed-forward network predicting the clean segment.

    Input layout: ``[flatten(x_it), flatten(x_prev), enc(t), enc(i), cond]``.
    With ``attention=True`` the two segments are first mixed by one
    single-head self-attention block over frames (residual).
    """

    def __init__(self, segment_shape: tuple[int, int], cond_width: int, width: int = 128,
                 depth: int = 3, step_width: int = 32, attention: bool = False,
                 attention_width: int = 16, final_init_std: float | None = None,
                 random_state=None):
        if depth < 2:
            raise ValueError("depth counts dense layers and must be >= 2")
        S, D = segment_shape
        self.S, self.D = int(S), int(D)
        self.cond_width = cond_width
        self.width = width
        self.depth = depth
        self.step_width = step_width
        self.attention = attention
        self.attention_width = attention_width
        rng = np.random.default_rng(random_state)
        self.params = ParamStore()
        if attention:
            for name in ("q", "k", "v"):
                init_dense(self.params, f"attn.{name}", 2 * D, attention_width, rng)
            init_dense(self.params, "attn.o", attention_width, 2 * D, rng, std=0.0)
        n_in = 2 * S * D + 2 * step_width + cond_width
        sizes = [n_in] + [width] * (depth - 1) + [S * D]
        for k in range(depth):
            std = final_init_std if k == depth - 1 else None
            init_dense(self.params, f"layer{k}", sizes[k], sizes[k + 1], rng, std=std)

    def _attend(self, tokens: Tensor) -> Tensor:
        q = dense(self.params, "attn.q", tokens)
        k = dense(self.params, "attn.k", tokens)
        v = dense(self.params, "attn.v", tokens)
        scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(self.attention_width))
        # subtracting a constant row max leaves softmax and its gradient unchanged
        shifted = add(scores, Tensor(-scores.data.max(axis=-1, keepdims=True)))
        weights = exp(shifted)
        weights = div(weights, tsum(weights, axis=-1, keepdims=True))
        return add(tokens, dense(self.params, "attn.o", matmul(weights, v)))

    def __call__(self, x_it, x_prev, t, i, cond) -> Tensor:
        x_it, x_prev, cond = as_tensor(x_it), as_tensor(x_prev), as_tensor(cond)
        B = x_it.shape[0]
        expected = (B, self.S, self.D)
        if x_it.shape != expected or x_prev.shape != expected:
            raise ValueError(f"denoiser expects segments of shape {expected}, "
                             f"got {x_it.shape} and {x_prev.shape}")
        if cond.shape != (B, self.cond_width):
            raise ValueError(f"condition must have shape {(B, self.cond_width)}, got {cond.shape}")
        t_enc = Tensor(encode_step(np.broadcast_to(np.asarray(t), (B,)), self.step_width))
        i_enc = Tensor(encode_step(np.broadcast_to(np.asarray(i), (B,)), self.step_width))
        if self.attention:
            mixed = self._attend(concat([x_it, x_prev], axis=-1))
            segs = reshape(mixed, (B, 2 * self.S * self.D))
        else:
            segs = concat([reshape(x_it, (B, -1)), reshape(x_prev, (B, -1))], axis=-1)
        h = concat([segs, t_enc, i_enc, cond], axis=-1)
        for k in range(self.depth - 1):
            h = tanh(dense(self.params, f"layer{k}", h))
        out = dense(self.params, f"layer{self.depth - 1}", h)
        return reshape(out, expected)


def denoise_predict(model: Denoiser, x_it, x_prev, t, i, cond) -> Tensor:
    return model(x_it, x_prev, t, i, cond)

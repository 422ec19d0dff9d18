"""The trainable pieces of a recurrent diffusion model, bundled."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import Denoiser
from .flow import ConditionalFlow
from .numerics import ParamStore, Tensor, no_grad, take
from .schedule import NoiseSchedule, linear_schedule

__all__ = ["ModelConfig", "RDMNetworks"]


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = 4
    segment_length: int = 14
    n_segments: int = 4
    n_labels: int = 4
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    flow_blocks: int = 6
    context_size: int = 64
    coupling_hidden: int = 32
    clamp: float = 0.1
    denoiser_width: int = 128
    denoiser_depth: int = 3
    step_width: int = 32
    attention: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class RDMNetworks:
    """Flow, denoiser and the shared condition-embedding table."""

    def __init__(self, config: ModelConfig, random_state=None, flow_init_std: float = 0.0):
        self.config = config
        rng = np.random.default_rng(random_state)
        seeds = rng.integers(0, 2**32, size=3)
        self.schedule: NoiseSchedule = linear_schedule(config.T, config.beta_start, config.beta_end)
        self.flow = ConditionalFlow(config.n_features, config.context_size, config.flow_blocks,
                                    config.coupling_hidden, (-config.clamp, config.clamp),
                                    final_init_std=flow_init_std, random_state=seeds[0])
        self.denoiser = Denoiser((config.segment_length, config.n_features), config.context_size,
                                 width=config.denoiser_width, depth=config.denoiser_depth,
                                 step_width=config.step_width, attention=config.attention,
                                 random_state=seeds[1])
        self.embedding = ParamStore()
        table = np.random.default_rng(seeds[2]).standard_normal((config.n_labels, config.context_size))
        self.embedding.add("table", 0.1 * table)

    @property
    def segment_shape(self) -> tuple[int, int]:
        return self.config.segment_length, self.config.n_features

    def stores(self) -> dict[str, ParamStore]:
        return {"denoiser": self.denoiser.params, "embedding": self.embedding, "flow": self.flow.params}

    def condition(self, labels) -> Tensor:
        labels = np.asarray(labels, dtype=int).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.n_labels):
            raise ValueError(f"labels must lie in [0, {self.config.n_labels})")
        return take(self.embedding["table"], labels, axis=0)

    def predict(self, x_it, x_prev, t, i, labels) -> np.ndarray:
        """Inference-mode clean-segment prediction on plain arrays."""
        with no_grad():
            return self.denoiser(x_it, x_prev, t, i, self.condition(labels)).data

    __call__ = predict

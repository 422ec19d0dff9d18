"""Estimator front end: fit on (N, F, D) sequences, sample new ones."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .data import STD_FLOOR
from .grid import segment_batch, segment_length
from .metrics import sequence_frechet
from .networks import ModelConfig, RDMNetworks
from .sampler import SampleResult, SamplerPlan, rollout_beyond, sample
from .training import LossBreakdown, Optimizers, TrainConfig, training_step
from .validation import check_generator, check_labels, check_positive_int, check_sequences

__all__ = ["RecurrentDiffusion"]


class RecurrentDiffusion(BaseEstimator):
    """Sequence generator trained jointly as a flow over segments plus a segment denoiser.

    ``fit(X, y)`` splits every sequence into ``n_segments`` segments and runs
    ``max_steps`` Adam updates (or ``epochs`` passes when ``max_steps`` is
    None).  Each step draws its minibatch and grid points from one generator,
    so a checkpoint of that generator's state resumes training exactly.

    Fitted attributes: ``networks_``, ``optimizers_``, ``history_`` (list of
    per-step loss rows), ``n_frames_``, ``n_features_in_``, ``n_labels_``,
    ``mean_`` / ``std_`` (identity when ``normalize=False``), ``step_``.
    """

    def __init__(self, n_segments=4, T=100, beta_start=1e-4, beta_end=0.02,
                 flow_blocks=6, context_size=64, coupling_hidden=32, clamp=0.1,
                 denoiser_width=128, denoiser_depth=3, step_width=32, attention=False,
                 lr_flow=1e-4, lr_denoiser=2e-4, batch_size=64, epochs=1, max_steps=None,
                 w_mode="uniform", flow_loss_weight=1.0, sigma_inf=0.01, replication=1,
                 n_labels=None, normalize=True, flow_init_std=0.0, random_state=0):
        self.n_segments = n_segments
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.flow_blocks = flow_blocks
        self.context_size = context_size
        self.coupling_hidden = coupling_hidden
        self.clamp = clamp
        self.denoiser_width = denoiser_width
        self.denoiser_depth = denoiser_depth
        self.step_width = step_width
        self.attention = attention
        self.lr_flow = lr_flow
        self.lr_denoiser = lr_denoiser
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.w_mode = w_mode
        self.flow_loss_weight = flow_loss_weight
        self.sigma_inf = sigma_inf
        self.replication = replication
        self.n_labels = n_labels
        self.normalize = normalize
        self.flow_init_std = flow_init_std
        self.random_state = random_state

    # --- configuration ---------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr_flow=self.lr_flow, lr_denoiser=self.lr_denoiser,
                           batch_size=self.batch_size, epochs=self.epochs, max_steps=self.max_steps,
                           w_mode=self.w_mode, flow_loss_weight=self.flow_loss_weight,
                           sigma_inf=self.sigma_inf, replication=self.replication,
                           seed=self.random_state if isinstance(self.random_state, int) else 0)

    def _model_config(self, n_frames: int, n_features: int, n_labels: int) -> ModelConfig:
        return ModelConfig(n_features=n_features, segment_length=segment_length(n_frames, self.n_segments),
                           n_segments=self.n_segments, n_labels=n_labels, T=self.T,
                           beta_start=self.beta_start, beta_end=self.beta_end,
                           flow_blocks=self.flow_blocks, context_size=self.context_size,
                           coupling_hidden=self.coupling_hidden, clamp=self.clamp,
                           denoiser_width=self.denoiser_width, denoiser_depth=self.denoiser_depth,
                           step_width=self.step_width, attention=self.attention)

    def _total_steps(self, n: int) -> int:
        if self.max_steps is not None:
            return check_positive_int(self.max_steps, "max_steps", 0)
        per_epoch = math.ceil(n * self.replication / self.batch_size)
        return check_positive_int(self.epochs, "epochs") * per_epoch

    # --- training ----------------------------------------------------------------

    def _prepare(self, X, y):
        X = check_sequences(X, min_frames=self.n_segments)
        check_positive_int(self.n_segments, "n_segments")
        labels = check_labels(y, X.shape[0], self.n_labels)
        return X, labels

    def _set_data(self, X, labels):
        if self.normalize:
            flat = X.reshape(-1, X.shape[-1])
            self.mean_, self.std_ = flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR)
        else:
            self.mean_, self.std_ = np.zeros(X.shape[-1]), np.ones(X.shape[-1])
        self._segs = segment_batch((X - self.mean_) / self.std_, self.n_segments)
        self._labels = labels

    def fit(self, X, y=None, callback: Callable | None = None):
        """Train from scratch.  ``callback(estimator, breakdown)`` runs after every step."""
        X, labels = self._prepare(X, y)
        self.n_frames_, self.n_features_in_ = X.shape[1], X.shape[2]
        self.n_labels_ = int(self.n_labels if self.n_labels is not None else labels.max() + 1)
        self._set_data(X, labels)
        self._train_cfg = self._train_config()
        config = self._model_config(self.n_frames_, self.n_features_in_, self.n_labels_)
        self._rng = check_generator(self.random_state)
        self.networks_ = RDMNetworks(config, random_state=self._rng.integers(2**32),
                                     flow_init_std=self.flow_init_std)
        self.optimizers_ = Optimizers.from_config(self._train_cfg)
        self.history_: list[dict] = []
        self.step_ = 0
        return self.partial_fit(self._total_steps(X.shape[0]), callback=callback)

    def partial_fit(self, n_steps: int, callback: Callable | None = None):
        """Continue training on the data seen by ``fit`` / ``resume``."""
        check_is_fitted(self, "networks_")
        n_steps = check_positive_int(n_steps, "n_steps", 0)
        N = self._segs.shape[0]
        B = min(self._train_cfg.batch_size, N)
        for _ in range(n_steps):
            idx = self._rng.choice(N, size=B, replace=False)
            bd: LossBreakdown = training_step(self.networks_, self._segs[idx], self._labels[idx],
                                              self._train_cfg, self.optimizers_, self._rng)
            self.step_ += 1
            bd.step = self.step_
            self.history_.append(bd.as_row())
            if callback is not None:
                callback(self, bd)
        return self

    # --- persistence -----------------------------------------------------------------

    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        check_is_fitted(self, "networks_")
        params = {k: v for k, v in self.get_params().items()
                  if v is None or isinstance(v, (bool, int, float, str))}
        info = {"n_frames": self.n_frames_, "estimator": params, **(meta or {})}
        rng = getattr(self, "_rng", None)
        return Checkpoint.capture(self.networks_, self.step_, rng, getattr(self, "optimizers_", None),
                                  (self.mean_, self.std_), info)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RecurrentDiffusion":
        """Rebuild a fitted estimator (for sampling, or ``resume`` to keep training)."""
        params = dict(ckpt.meta.get("estimator", {}))
        valid = cls._get_param_names()
        est = cls(**{k: v for k, v in params.items() if k in valid})
        cfg = ckpt.model_config
        est.networks_ = ckpt.build_networks()
        est.n_features_in_ = cfg.n_features
        est.n_labels_ = cfg.n_labels
        est.n_frames_ = int(ckpt.meta.get("n_frames", cfg.segment_length * cfg.n_segments))
        est.mean_ = ckpt.norm_mean if ckpt.norm_mean is not None else np.zeros(cfg.n_features)
        est.std_ = ckpt.norm_std if ckpt.norm_std is not None else np.ones(cfg.n_features)
        est.step_ = ckpt.step
        est.history_ = []
        est._train_cfg = est._train_config()
        est.optimizers_ = ckpt.build_optimizers(Optimizers.from_config(est._train_cfg))
        est._rng = ckpt.restore_rng() or check_generator(est.random_state)
        return est

    def resume(self, X, y=None):
        """Attach training data to an estimator restored from a checkpoint.

        Normalisation stats stay those stored in the checkpoint.
        """
        check_is_fitted(self, "networks_")
        X, labels = self._prepare(X, y)
        check_sequences(X, n_features=self.n_features_in_)
        if X.shape[1] != self.n_frames_:
            raise ValueError(f"checkpoint was trained on {self.n_frames_} frames, got {X.shape[1]}")
        check_labels(labels, X.shape[0], self.n_labels_)
        self._segs = segment_batch((X - self.mean_) / self.std_, self.n_segments)
        self._labels = labels
        return self

    # --- generation ------------------------------------------------------------------------

    def make_plan(self, mode="staircase", n_steps=None, t_start=None, n_segments=None,
                  eta=0.0, seed=0) -> SamplerPlan:
        L = self.networks_.config.n_segments if n_segments is None else n_segments
        return SamplerPlan(mode=mode, t_start=t_start, n_steps=n_steps, L_target=L, eta=eta, seed=seed)

    def sample_segments(self, labels, plan: SamplerPlan, random_state=None) -> SampleResult:
        """Raw sampler output in normalised units, (n, L_target, S, D) segments."""
        check_is_fitted(self, "networks_")
        nets = self.networks_
        labels = check_labels(np.asarray(labels), len(labels), self.n_labels_)
        rng = check_generator(plan.seed if random_state is None else random_state)
        emb = nets.embedding["table"].data[labels]
        if plan.mode == "staircase" and plan.L_target > nets.config.n_segments:
            return rollout_beyond(nets.predict, nets.flow, nets.schedule, plan, labels, rng,
                                  nets.segment_shape, nets.config.n_segments, emb=emb)
        return sample(nets.predict, nets.flow, nets.schedule, plan, labels, rng,
                      nets.segment_shape, emb=emb)

    def sample(self, n_samples: int = 1, labels=None, mode="staircase", n_steps=None,
               t_start=None, n_segments=None, eta=0.0, random_state=None):
        """Generate ``n_samples`` sequences in data units.

        Returns ``(sequences, labels)``.  With the trained number of segments
        the output is trimmed to the training length; longer rollouts keep
        every generated frame.
        """
        check_is_fitted(self, "networks_")
        n_samples = check_positive_int(n_samples, "n_samples")
        rng = check_generator(random_state)
        if labels is None:
            labels = rng.integers(0, self.n_labels_, size=n_samples)
        labels = check_labels(np.asarray(labels), n_samples, self.n_labels_)
        plan = self.make_plan(mode, n_steps, t_start, n_segments, eta)
        result = self.sample_segments(labels, plan, random_state=rng)
        self.last_result_ = result
        return self.to_data_units(result), labels

    def to_data_units(self, result: SampleResult) -> np.ndarray:
        seqs = result.sequences()
        if result.plan.L_target == self.networks_.config.n_segments:
            seqs = seqs[:, :self.n_frames_]
        return seqs * self.std_ + self.mean_

    def score(self, X, y=None, random_state=0) -> float:
        """Negative Fréchet distance between generated and given sequences (higher is better)."""
        X = check_sequences(X, n_features=getattr(self, "n_features_in_", None))
        labels = None if y is None else check_labels(y, X.shape[0], self.n_labels_)
        gen, _ = self.sample(X.shape[0], labels=labels, random_state=random_state)
        F = min(gen.shape[1], X.shape[1])
        return -sequence_frechet(gen[:, :F], X[:, :F])

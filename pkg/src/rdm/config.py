"""Flat ``section.key = value`` run configuration.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.  Every
key must appear in :data:`KEYS`, and command-line ``--set key=value``
overrides are applied after the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = ["KEYS", "RunConfig", "ConfigError", "parse_config_text", "load_config"]


class ConfigError(ValueError):
    """Unknown key, unparsable value, or invalid combination."""


def _opt_int(text: str):
    return None if text.lower() in ("", "none", "auto") else int(text)


def _t_start(text: str):
    low = text.lower()
    if low in ("", "none", "auto"):
        return None
    if low == "segments":
        return "segments"
    return int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str):
    return None if text.lower() in ("", "none") else text


# key -> (parser, default, help)
KEYS: dict[str, tuple] = {
    "data.kind": (str, "lissajous", "synthetic generator: lissajous or damped"),
    "data.path": (_opt_str, None, "dataset container to train on; generated when unset"),
    "data.n_train": (int, 2048, "generated training sequences"),
    "data.n_test": (int, 256, "generated held-out sequences"),
    "data.frames": (int, 56, "frames per generated sequence"),
    "data.features": (int, 4, "features per frame (even)"),
    "data.labels": (int, 4, "number of condition labels"),
    "data.seed": (int, 0, "generator seed"),
    "schedule.T": (int, 100, "diffusion steps"),
    "schedule.beta_start": (float, 1e-4, "first beta of the linear schedule"),
    "schedule.beta_end": (float, 0.02, "last beta of the linear schedule"),
    "model.segments": (int, 4, "segments per sequence (L)"),
    "flow.blocks": (int, 6, "affine coupling blocks per flow step"),
    "flow.context_size": (int, 64, "recurrent context width"),
    "flow.hidden": (int, 32, "coupling network hidden width"),
    "flow.clamp": (float, 0.1, "bound on the per-entry log-scale"),
    "flow.sigma_inf": (float, 0.01, "noise added to coupling inputs during training"),
    "denoiser.width": (int, 128, "hidden width"),
    "denoiser.depth": (int, 3, "dense layers"),
    "denoiser.step_width": (int, 32, "sinusoidal step encoding width"),
    "denoiser.attention": (_bool, False, "single-head attention over frames"),
    "train.lr_flow": (float, 1e-4, "Adam step size for the flow"),
    "train.lr_denoiser": (float, 2e-4, "Adam step size for denoiser and embedding"),
    "train.batch_size": (int, 64, "minibatch size"),
    "train.epochs": (int, 1, "passes over the data when max_steps is unset"),
    "train.max_steps": (_opt_int, 2000, "optimizer steps; overrides epochs"),
    "train.w_mode": (str, "uniform", "loss weight: uniform or snr"),
    "train.flow_loss_weight": (float, 1.0, "weight of the clean-history flow fit term"),
    "train.replication": (int, 1, "data replication factor per epoch"),
    "train.seed": (int, 0, "training seed"),
    "train.checkpoint_every": (int, 0, "also checkpoint every k steps (0: only at the end)"),
    "sampler.mode": (str, "staircase", "staircase, autoregressive, disentangled or volume"),
    "sampler.t_start": (_t_start, None, "entry step of segment 1: int, auto (T-3) or segments"),
    "sampler.n_steps": (_opt_int, None, "reverse steps; fewer than T selects DDIM"),
    "sampler.L_target": (_opt_int, None, "segments to generate; defaults to model.segments"),
    "sampler.eta": (float, 0.0, "DDIM stochasticity"),
    "sampler.seed": (int, 0, "sampling seed"),
    "sampler.n_samples": (int, 64, "sequences to generate"),
    "io.out_dir": (str, "run", "output directory for train"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def __post_init__(self):
        merged = {k: v[1] for k, v in KEYS.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = KEYS[key][0](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        self.explicit.add(key)

    def apply_overrides(self, pairs) -> "RunConfig":
        for pair in pairs or ():
            if "=" not in pair:
                raise ConfigError(f"override must look like key=value, got {pair!r}")
            k, v = pair.split("=", 1)
            self.set(k, v)
        self.validate()
        return self

    def validate(self) -> None:
        v = self.values
        if v["data.kind"] not in ("lissajous", "damped"):
            raise ConfigError(f"data.kind must be lissajous or damped, got {v['data.kind']!r}")
        if v["train.w_mode"] not in ("uniform", "snr"):
            raise ConfigError(f"train.w_mode must be uniform or snr, got {v['train.w_mode']!r}")
        if v["sampler.mode"] not in ("staircase", "autoregressive", "disentangled", "volume"):
            raise ConfigError(f"unknown sampler.mode {v['sampler.mode']!r}")
        for key in ("data.n_train", "data.frames", "data.labels", "schedule.T", "model.segments",
                    "flow.blocks", "denoiser.depth", "train.batch_size", "sampler.n_samples"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["data.features"] < 2 or v["data.features"] % 2:
            raise ConfigError("data.features must be even and >= 2")

    def render(self) -> str:
        """Fully resolved config in the input format, keys sorted."""
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            lines.append(f"{key} = {'none' if val is None else str(val).lower() if isinstance(val, bool) else val}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        try:
            cfg.set(k, v)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path: str | None, overrides=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return cfg.apply_overrides(overrides)

"""Run configuration: a flat key=value file with # comments.

Unknown keys are a hard error so typos fail loudly instead of silently
training with a default.  Every command writes its resolved configuration
beside its outputs, and that file alone is enough to replay the command.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or malformed config lines."""


_CHOICES = {
    "env": ("four_goal", "detour"),
    "execution": ("closed_loop", "receding"),
    "goal_source": ("final", "future"),
    "policy_lr_schedule": ("constant", "cosine"),
}


@dataclass
class RunConfig:
    # experiment
    experiment: str = "run"
    seed: int = 0
    # environment and demonstrations
    env: str = "four_goal"
    demo_count: int = 100
    # windowing
    obs_window: int = 10
    goal_window: int = 0
    goal_source: str = "final"
    goal_future_offset: int = 0
    chunk_len: int = 1
    # action tokenizer
    latent_dim: int = 32
    enc_hidden: int = 128
    num_quantizers: int = 2
    codebook_size: int = 16
    commit_weight: float = 1.0
    ema_decay: float = 0.99
    reset_dead_codes: bool = True
    dead_code_threshold: float = 1.0
    rvq_steps: int = 2000
    rvq_batch: int = 256
    rvq_lr: float = 1e-3
    rvq_weight_decay: float = 0.0
    # policy trunk and heads
    trunk_layers: int = 6
    trunk_heads: int = 6
    embed_dim: int = 120
    focal_gamma: float = 2.0
    secondary_weight: float = 0.1
    offset_weight: float = 1.0
    autoregressive_codes: bool = False
    deadcode_mask: bool = False
    policy_steps: int = 2000
    policy_batch: int = 256
    policy_lr: float = 5.5e-5
    policy_lr_schedule: str = "constant"
    policy_weight_decay: float = 0.0
    # rollout and evaluation
    episodes: int = 100
    execution: str = "closed_loop"
    receding_steps: int = 1
    conditional: bool = False
    temperature: float = 1.0
    # artifact paths
    dataset: str = ""
    tokenizer: str = ""
    policy: str = ""

    def validate(self) -> None:
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}")
        positive = (
            "demo_count", "obs_window", "chunk_len", "latent_dim", "enc_hidden",
            "num_quantizers", "codebook_size", "rvq_steps", "rvq_batch",
            "trunk_layers", "trunk_heads", "embed_dim", "policy_steps",
            "policy_batch", "episodes", "receding_steps",
        )
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        nonnegative = (
            "goal_window", "goal_future_offset", "commit_weight", "focal_gamma",
            "secondary_weight", "offset_weight", "temperature", "rvq_lr",
            "policy_lr", "rvq_weight_decay", "policy_weight_decay",
            "dead_code_threshold", "seed",
        )
        for key in nonnegative:
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must not be negative")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie strictly between 0 and 1")
        if self.embed_dim % self.trunk_heads != 0:
            raise ConfigError("embed_dim must be divisible by trunk_heads")
        if self.receding_steps > self.chunk_len:
            raise ConfigError("receding_steps cannot exceed chunk_len")
        if self.conditional and self.goal_window <= 0:
            raise ConfigError("conditional runs need goal_window > 0")


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        if raw in ("true", "false"):
            return raw == "true"
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config(Path(path).read_text(), base=cfg)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def write_config(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")

"""Run configuration as a flat ``key=value`` text file."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import ModelConfig

SEED_ENV = "TCNET_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    # data
    data_dir: str = "data"
    data_seed: int = 0
    train_episodes: int = 2000
    dev_episodes: int = 200
    train_limit: int = 0  # 0 keeps every training episode
    dev_limit: int = 0
    frame_size: int = 32
    t_min: int = 24
    t_max: int = 48
    vocab_size: int = 10
    flow_source: str = "truth"  # or "estimated" (block matching)
    search_radius: int = 2
    # model
    channels: tuple = (16, 32, 64)
    block_stages: tuple = (2, 3)
    window: int = 2
    horizon: int = 12
    heads: int = 2
    combine: str = "multiply"
    trajectory: bool = True
    correlation: bool = True
    stage_flow: str = "sample"
    hidden: int = 64
    layers: int = 2
    # loss and optimisation
    lambda_l1: float = 1.0
    lr: float = 1e-4
    lr_decay: float = 5.0
    milestones: tuple = (15, 23)
    epochs: int = 30
    weight_decay: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    flip_prob: float = 0.5
    temporal_rescale: float = 0.2
    eval_every: int = 1  # 0 evaluates after the final epoch only
    # output
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.combine not in ("multiply", "sum", "concat"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.flow_source not in ("truth", "estimated"):
            raise ValueError(f"flow_source must be 'truth' or 'estimated', got {self.flow_source!r}")
        if self.stage_flow not in ("sample", "pool"):
            raise ValueError(f"stage_flow must be 'sample' or 'pool', got {self.stage_flow!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.horizon < 1:
            raise ValueError("batch_size and horizon must be >= 1, epochs >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            channels=tuple(self.channels),
            block_stages=tuple(self.block_stages),
            window=self.window,
            horizon=self.horizon,
            heads=self.heads,
            combine=self.combine,
            trajectory=self.trajectory,
            correlation=self.correlation,
            stage_flow=self.stage_flow,
            hidden=self.hidden,
            layers=self.layers,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        return (base or cls()).with_overrides(values)

    def with_overrides(self, values: dict) -> "RunConfig":
        """Apply string (or typed) overrides; unknown keys are rejected."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, value in values.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            default = getattr(RunConfig, key, None)
            changes[key] = _parse(value, type(default)) if isinstance(value, str) else value
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, kind: type):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is tuple:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides, then TCNET_SEED."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path:
        cfg = RunConfig.from_text(Path(path).read_text(), cfg)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if env.get(SEED_ENV):
        cfg = cfg.replace(seed=int(env[SEED_ENV]))
    return cfg


def paper_schedule(cfg: RunConfig) -> RunConfig:
    """Full-length schedule: 80 epochs, learning rate divided by 5 after 40 and 60."""
    return cfg.replace(epochs=80, milestones=(40, 60))

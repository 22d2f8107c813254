"""Run configuration: JSON loading, validation and named profiles.

A config file is a JSON object with optional sections ``model``, ``ldg``,
``loss``, ``optimizer``, ``grid``, ``oracle`` and the top-level keys
``profile``, ``seed``, ``max_attempts`` and ``out_dir``. Missing entries take
the values of the selected profile (``desk`` by default).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LdGParams, LossConfig
from .model import ModelConfig
from .oracle import OracleConfig
from .training import OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    N: int = 33
    delta: float = 0.01
    offset: tuple[float, float] = (0.2, 0.0)
    h_fd: float = 1e-4

    def __post_init__(self):
        self.offset = tuple(float(v) for v in self.offset)
        if self.N < 2:
            raise ValueError("grid N must be at least 2")
        if not 0 < self.delta < 0.5:
            raise ValueError("grid delta must lie in (0, 1/2)")
        if len(self.offset) != 2 or any(abs(v) >= 1 for v in self.offset):
            raise ValueError("grid offset must be two fractions of delta in (-1, 1)")
        if not self.h_fd > 0:
            raise ValueError("h_fd must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    ldg: LdGParams = field(default_factory=LdGParams)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0
    max_attempts: int = 3
    out_dir: str = "runs/default"
    profile: str = "desk"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"]["offset"] = list(self.grid.offset)
        if self.loss.soft_boundary is not None:
            d["loss"]["soft_boundary"] = list(self.loss.soft_boundary)
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, model=replace(self.model, init_seed=seed))


_SECTIONS = {"model": ModelConfig, "ldg": LdGParams, "loss": LossConfig,
             "optimizer": OptimizerConfig, "grid": GridConfig, "oracle": OracleConfig}
_TOP_LEVEL = {"profile", "seed", "max_attempts", "out_dir"}

PROFILES = {
    # paper settings at reduced trunk width
    "desk": {},
    "paper": {"model": {"hidden_width": 4000}},
    # tiny settings for smoke runs and gradient checks
    "smoke": {"model": {"hidden_width": 16, "feature_count": 4},
              "grid": {"N": 7}, "optimizer": {"epochs": 50}, "oracle": {"grid_size": 33}},
}


def _merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def from_dict(raw: dict) -> RunConfig:
    """Validate a raw mapping and resolve it against its profile."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged = _merge(PROFILES[profile], raw)
    sections = {}
    for name, cls in _SECTIONS.items():
        values = merged.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from exc
    seed = merged.get("seed", sections["model"].init_seed)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    max_attempts = merged.get("max_attempts", 3)
    if not isinstance(max_attempts, int) or max_attempts < 1:
        raise ConfigError("max_attempts must be a positive integer")
    model = replace(sections["model"], init_seed=seed)
    oracle = sections["oracle"]
    if "epsilon" not in merged.get("oracle", {}):
        # one epsilon for the whole run unless the oracle is set explicitly
        oracle = replace(oracle, epsilon=sections["ldg"].epsilon)
    elif oracle.epsilon != sections["ldg"].epsilon:
        raise ConfigError("oracle.epsilon differs from ldg.epsilon")
    if model.solution_count < 2 and sections["loss"].beta > 0:
        raise ConfigError("deflation (beta > 0) needs at least two solutions")
    return RunConfig(model=model, ldg=sections["ldg"], loss=sections["loss"],
                     optimizer=sections["optimizer"], grid=sections["grid"], oracle=oracle,
                     seed=seed, max_attempts=max_attempts,
                     out_dir=str(merged.get("out_dir", "runs/default")), profile=profile)


def load_config(path) -> RunConfig:
    """Read a JSON config file; an empty file gives the desk profile."""
    text = Path(path).read_text()
    if not text.strip():
        return from_dict({})
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(raw)


def profile(name: str) -> RunConfig:
    return from_dict({"profile": name})

"""Run configuration (JSON) and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .fno import FnoConfig
from .integrators import TimeGrid
from .lindblad import System, system_from_config
from .training import TrainConfig

OUTPUT_DIR_ENV = "NQPROP_OUTPUT_DIR"
BACKENDS = ("rk4", "expm", "fno")

# FnoConfig fields derived from the system and grid rather than configured
_DERIVED_FNO = ("state_dim", "grid_points")


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    system: object = "fmo7"
    grid: dict = field(default_factory=lambda: {"t_max": 30.0, "n_steps": 50})
    dataset: dict = field(default_factory=lambda: {"n_train": 200, "n_val": 200})
    fno: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    backend: str = "rk4"
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        _reject_unknown("grid", self.grid, ("t_max", "n_steps"))
        _reject_unknown("dataset", self.dataset, ("n_train", "n_val"))
        fno_keys = [f.name for f in fields(FnoConfig) if f.name not in _DERIVED_FNO]
        _reject_unknown("fno", self.fno, fno_keys)
        _reject_unknown("train", self.train, [f.name for f in fields(TrainConfig)])
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        # normalize sections to full, ordered dicts so emit/parse round-trips
        self.grid = TimeGrid(**self.grid).to_dict()
        self.dataset = {"n_train": int(self.dataset["n_train"]), "n_val": int(self.dataset["n_val"])}
        defaults = {k: v for k, v in asdict(FnoConfig()).items() if k not in _DERIVED_FNO}
        self.fno = {**defaults, **self.fno}
        tc = asdict(TrainConfig(**self.train))
        tc["adam_betas"] = list(tc["adam_betas"])
        self.train = tc
        self.build_system()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown("config", d, [f.name for f in fields(cls)])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def build_system(self) -> System:
        try:
            return system_from_config(self.system)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid system: {exc}") from exc

    def time_grid(self) -> TimeGrid:
        return TimeGrid(**self.grid)

    def fno_config(self) -> FnoConfig:
        sys_ = self.build_system()
        return FnoConfig(**self.fno, state_dim=sys_.dim**2, grid_points=self.time_grid().n_points)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)


def default_output_dir(config: RunConfig | None = None) -> Path:
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(config.output_dir if config else "runs")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, config: RunConfig, command: str, inputs, outputs, started: float) -> None:
    """Write the run manifest atomically (temp file then rename)."""
    manifest = {
        "command": command,
        "config_sha256": config.digest(),
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_seconds": time.time() - started,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(path)

"""Run configuration with a lossless JSON file form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

__all__ = ["GameConfig", "DictionaryConfig", "TrainingGridConfig", "BasisConfig",
           "QuadratureConfig", "MCPConfig", "AlternationConfig", "RunConfig"]


@dataclass
class GameConfig:
    v_A: float = 1.0
    T: float = 1.0
    running_weight: float = 0.1


@dataclass
class DictionaryConfig:
    n_rff: int = 100
    variance: float = 100.0
    control_lifting: str = "lifted"
    holdout: float = 0.2
    rcond: float = 1e-10


@dataclass
class TrainingGridConfig:
    n_r: int = 21
    n_alpha: int = 21
    n_u: int = 9
    n_heading: int = 16


@dataclass
class BasisConfig:
    n_centroids: int = 5
    n_eval: int = 25
    neighbour_value: float = 0.85


@dataclass
class QuadratureConfig:
    m: int = 4
    delta: Optional[float] = None
    h: Optional[float] = None
    N: Optional[int] = None
    target: float = 1e-6


@dataclass
class MCPConfig:
    tol: float = 1e-6
    max_iter: int = 200


@dataclass
class AlternationConfig:
    rounds: int = 30
    perturbation: float = 1e-3
    stall_window: int = 3
    stall_tol: float = 1e-3
    stall_measure: str = "pointwise"
    max_iter: int = 100


_SECTIONS = {
    "game": GameConfig,
    "dictionary": DictionaryConfig,
    "training_grid": TrainingGridConfig,
    "basis": BasisConfig,
    "quadrature": QuadratureConfig,
    "mcp": MCPConfig,
    "alternation": AlternationConfig,
}


@dataclass
class RunConfig:
    """Every knob of a run.

    ``RunConfig.from_dict(cfg.to_dict()) == cfg`` holds for every valid
    configuration; unknown keys are rejected.
    """

    game: GameConfig = field(default_factory=GameConfig)
    dt: float = 0.01
    dictionary: DictionaryConfig = field(default_factory=DictionaryConfig)
    training_grid: TrainingGridConfig = field(default_factory=TrainingGridConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)
    mcp: MCPConfig = field(default_factory=MCPConfig)
    alternation: AlternationConfig = field(default_factory=AlternationConfig)
    out_dir: str = "out"
    seed: int = 0
    workers: int = 1

    @property
    def n_steps(self) -> int:
        return int(round(self.game.T / self.dt))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kwargs = {}
        for k, v in d.items():
            if k in _SECTIONS:
                sec = _SECTIONS[k]
                if not isinstance(v, dict):
                    raise ConfigError(f"section {k!r} must be a mapping")
                names = {f.name for f in dataclasses.fields(sec)}
                bad = set(v) - names
                if bad:
                    raise ConfigError(f"unknown keys in {k!r}: {sorted(bad)}")
                kwargs[k] = sec(**v)
            else:
                kwargs[k] = v
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dt <= 0 or self.game.T <= 0:
            raise ConfigError("dt and T must be positive")
        if abs(self.n_steps * self.dt - self.game.T) > 1e-9 * self.game.T:
            raise ConfigError("T must be an integer multiple of dt")
        if self.game.v_A <= 0:
            raise ConfigError("v_A must be positive")
        if not 0.0 <= self.dictionary.holdout < 1.0:
            raise ConfigError("holdout fraction must lie in [0, 1)")
        if self.dictionary.control_lifting not in ("lifted", "unlifted", "identity"):
            raise ConfigError(f"unknown control lifting {self.dictionary.control_lifting!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

"""Experiment configuration stored as plain ``section.key = value`` lines."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from .ensemble import CqlConfig
from .envs import gridworld
from .hybrid import RatioConfig
from .mdp import TabularMdp
from .selector import SelectorConfig

STRATEGIES = ("mf-hrl-igm", "lowest", "highest", "uniform")
CELL_FIELDS = {"traps"}


@dataclass
class EnvConfig:
    size: int = 5
    slip: float = 0.1
    gamma: float = 0.95
    horizon: int = 30
    start: Tuple[int, int] = (0, 0)
    goal: Tuple[int, int] = (4, 4)
    traps: List[Tuple[int, int]] = field(default_factory=list)

    def build(self) -> TabularMdp:
        return gridworld(self.size, self.slip, self.goal, self.start, self.traps,
                         self.gamma, self.horizon)


@dataclass
class FamilyConfig:
    factors: List[float] = field(default_factory=lambda: [2.75, 2.0, 1.25, 1.0])
    costs: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])


@dataclass
class RunConfig:
    budget: float = 2000.0
    budget_max: float = 2000.0
    ensemble_size: int = 3
    episodes_per_round: int = 1
    offline_size: int = 310
    behavior_weight: float = 0.5  # behaviour = w * pi* + (1 - w) * uniform
    exploration: float = 0.1
    strategy: str = "mf-hrl-igm"
    seeds: List[int] = field(default_factory=lambda: list(range(20)))
    output: str = "results"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.ensemble_size < 2 or self.episodes_per_round < 1:
            raise ValueError("need ensemble_size >= 2 and episodes_per_round >= 1")
        if not 0 <= self.exploration < 1:
            raise ValueError("exploration must lie in [0, 1)")


def _online_default() -> CqlConfig:
    return CqlConfig(alpha_c=1.0, learning_rate=0.05, epochs=20, target_refresh=10)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    family: FamilyConfig = field(default_factory=FamilyConfig)
    run: RunConfig = field(default_factory=RunConfig)
    offline: CqlConfig = field(default_factory=CqlConfig)
    online: CqlConfig = field(default_factory=_online_default)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    ratio: RatioConfig = field(default_factory=RatioConfig)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields overridden, e.g. ``replace(run={"budget": 500})``."""
        kv = self.to_kv()
        for sec, values in sections.items():
            for key, val in values.items():
                kv[f"{sec}.{key}"] = _format(val)
        return ExperimentConfig.from_kv(kv)

    def to_kv(self) -> Dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            for sf in dataclasses.fields(section):
                out[f"{f.name}.{sf.name}"] = _format(getattr(section, sf.name))
        return out

    @classmethod
    def from_kv(cls, kv: Dict[str, str]) -> "ExperimentConfig":
        defaults = cls()
        sections = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        grouped: Dict[str, Dict[str, str]] = {}
        for key, value in kv.items():
            sec, _, name = key.partition(".")
            if sec not in known or not name:
                raise KeyError(f"unknown config key {key!r}")
            grouped.setdefault(sec, {})[name] = value
        for sec, f in known.items():
            default = getattr(defaults, sec)
            fields = {sf.name: sf for sf in dataclasses.fields(default)}
            values = {}
            for name, raw in grouped.get(sec, {}).items():
                if name not in fields:
                    raise KeyError(f"unknown config key {sec}.{name!r}")
                values[name] = _parse(raw, getattr(default, name), cells=name in CELL_FIELDS)
            sections[sec] = dataclasses.replace(default, **values)
        return cls(**sections)


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(str(x) for x in value)
    if isinstance(value, list):
        if value and isinstance(value[0], (list, tuple)):
            return "; ".join(" ".join(str(x) for x in cell) for cell in value)
        return ", ".join(str(x) for x in value)
    return str(value)


def _parse(raw: str, like, cells: bool = False):
    raw = raw.strip()
    if cells:
        return [tuple(int(x) for x in cell.split()) for cell in raw.split(";") if cell.strip()]
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(int(x) for x in raw.split())
    if isinstance(like, list):
        if not raw:
            return []
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if like and isinstance(like[0], int):
            return [int(x) for x in items]
        return [float(x) for x in items]
    return raw


def read_kv(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, kv: Dict[str, str]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in kv.items()))


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_kv(read_kv(path))


def save_config(cfg: ExperimentConfig, path) -> None:
    write_kv(path, cfg.to_kv())

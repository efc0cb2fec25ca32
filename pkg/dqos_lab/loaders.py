"""
Experiment configuration: JSON loading and the settings tree.

Keys starting with ``_`` are comments and are ignored at every level.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

from dqos_lab.predictor import TrainConfig
from dqos_lab.simcore import SimConfig
from dqos_lab.telemetry import CollectSettings
from dqos_lab.traffic import TrafficSettings

log = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = "dqos_lab/config.json"


class ConfigError(ValueError):
    """Invalid configuration; the message carries ``path:line:col`` or the dotted key."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None, column: int | None = None):
        self.path = path
        self.line = line
        self.column = column
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}:{column}"
        super().__init__(f"{where}: {message}")


# ---- Sections not owned by another module ---- #
@dataclass
class BaselineSettings:
    duration_s: float = 600.0
    forced_miss_frames: int = 20
    histogram_bin_ms: float = 5.0

    def __post_init__(self):
        if self.duration_s <= 0 or self.forced_miss_frames < 1 or self.histogram_bin_ms <= 0:
            raise ValueError("duration_s, forced_miss_frames and histogram_bin_ms must be positive")


@dataclass
class AttackSettings:
    target_switch: str | None = None
    mean_pct: float | None = None
    bands: tuple[float, ...] = (1.0, 2.0, 3.0)
    increment_p: float = 0.05
    decrement_q: float = 0.01
    max_iterations: int | None = None
    interval_s: float = 10.0
    window_s: float = 5.0
    duration_s: float = 600.0
    warmup_s: float = 60.0
    persistence: int = 3

    def __post_init__(self):
        self.bands = tuple(float(b) for b in self.bands)
        if not self.bands or any(b <= 0 for b in self.bands):
            raise ValueError("bands must be a non-empty list of positive percentages")
        if self.interval_s <= 0 or self.window_s <= 0 or self.duration_s < self.interval_s:
            raise ValueError("interval_s, window_s must be > 0 and duration_s >= interval_s")
        if self.warmup_s < self.window_s:
            raise ValueError("warmup_s must cover at least one sampling window")
        if self.persistence < 1:
            raise ValueError("persistence must be >= 1")


@dataclass
class EvalSettings:
    duration_s: float = 1000.0
    interval_s: float = 10.0
    min_drop_pct: float = 3.0
    max_drop_pct: float = 10.0
    max_draws: int = 50
    noisy_inputs: bool = False

    def __post_init__(self):
        if not 0 <= self.min_drop_pct <= self.max_drop_pct:
            raise ValueError("drop regime must satisfy 0 <= min_drop_pct <= max_drop_pct")
        if self.max_draws < 1:
            raise ValueError("max_draws must be >= 1")
        if self.duration_s < self.interval_s or self.interval_s <= 0:
            raise ValueError("duration_s must cover at least one interval")


_SECTIONS: dict[str, type] = {
    "sim": SimConfig,
    "traffic": TrafficSettings,
    "baseline": BaselineSettings,
    "collect": CollectSettings,
    "train": TrainConfig,
    "attack": AttackSettings,
    "evaluation": EvalSettings,
}


@dataclass
class ExperimentConfig:
    topology: str = "default"
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    traffic: TrafficSettings = field(default_factory=TrafficSettings)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)
    collect: CollectSettings = field(default_factory=CollectSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            seed=seed,
            sim=dataclasses.replace(self.sim, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


# ---- Loading ---- #
def _resolve_inside_cwd(config_path: str) -> str:
    # SECURITY: reject paths that escape the working directory (CWE-22).
    base_dir = os.path.realpath(os.getcwd())
    resolved = os.path.realpath(config_path)
    try:
        if os.path.commonpath([base_dir, resolved]) != base_dir:
            raise ValueError("Path traversal detected")
    except ValueError:
        raise ValueError("Path traversal detected") from None
    return resolved


def _strip_comments(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _strip_comments(v) for k, v in value.items() if not k.startswith("_")}
    if isinstance(value, list):
        return [_strip_comments(v) for v in value]
    return value


def load_config(config_path: str = DEFAULT_CONFIG_PATH) -> dict[str, Any]:
    """Read a JSON config inside the working directory, comments removed."""
    resolved = _resolve_inside_cwd(config_path)
    with open(resolved, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, config_path, exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", config_path)
    return _strip_comments(data)


def _build_section(name: str, cls: type, data: Any, path: str | None) -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {name!r} must be an object", path)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}", path)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name}: {exc}", path) from None


def config_from_dict(data: Mapping[str, Any], path: str | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig; missing keys keep their defaults."""
    unknown = set(data) - {"topology", "seed", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}", path)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer", path)
    topology = data.get("topology", "default")
    if not isinstance(topology, str):
        raise ConfigError("topology must be 'default', 'same-site', 'multi-site' or a file path", path)
    sections = {name: _build_section(name, cls, data.get(name, {}), path) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(topology=topology, seed=seed, **sections).with_seed(seed)


def load_experiment_config(config_path: str | None = None) -> ExperimentConfig:
    if config_path is None:
        return ExperimentConfig()
    config = config_from_dict(load_config(config_path), config_path)
    log.info("Loaded config %s (hash %s)", config_path, config_hash(config))
    return config


def _jsonable(value: Any) -> Any:
    if isinstance(value, (frozenset, set)):
        return sorted(str(getattr(v, "value", v)) for v in value)
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, float) and value == float("inf"):
        return None
    return value


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    return _jsonable(dataclasses.asdict(config))


def config_hash(config: ExperimentConfig) -> str:
    """Short stable digest of the effective configuration."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

"""Run configuration: one INI file with a flat section per module.

Command-line flags override file values; the merged result can be written
back out so a run is reproducible from (config, data) alone.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import UsageError


@dataclass
class PathsConfig:
    data_root: str = "."
    out: str = "out"


@dataclass
class ModelSection:
    preset: str = "vgg_tiny"
    input_size: Optional[int] = None


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    epochs: int = 40
    batch_size: int = 16
    freeze_blocks: Optional[int] = None
    optimizer: str = "adam"


@dataclass
class ExplainSection:
    layer_id: Optional[int] = None
    class_id: Optional[int] = None
    alpha: float = 0.5


@dataclass
class FiberquantSection:
    h_lo: float = 150.0
    h_hi: float = 270.0
    s_min: float = 0.15
    v_min: float = 0.10
    sigma: float = 2.0


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    fiberquant: FiberquantSection = field(default_factory=FiberquantSection)

    SECTIONS = ("paths", "model", "train", "explain", "fiberquant")

    def to_ini(self, path) -> Path:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            cp[name] = {k: "" if v is None else str(v) for k, v in asdict(getattr(self, name)).items()}
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            cp.write(fh)
        return path

    def override(self, values: Mapping[str, Any]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides in place, skipping ``None``."""
        for key, value in values.items():
            if value is None:
                continue
            if key == "seed":
                self.seed = int(value)
                continue
            section, _, name = key.partition(".")
            target = getattr(self, section, None) if section in self.SECTIONS else None
            if target is None or name not in _field_types(type(target)):
                raise UsageError(f"unknown configuration key {key!r}")
            setattr(target, name, value)
        return self


def _field_types(cls) -> Dict[str, Any]:
    return {f.name: f.type for f in fields(cls)}


def _coerce(key: str, raw: str, default: Any, annotation: str):
    raw = raw.strip()
    if raw == "" and "Optional" in str(annotation):
        return None
    kind = type(default) if default is not None else (int if "int" in str(annotation) else str)
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path) -> RunConfig:
    """Read an INI file; unknown sections or keys are errors naming ``section.key``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    cfg = RunConfig()
    for section in cp.sections():
        if section == "run":
            for key, raw in cp[section].items():
                if key != "seed":
                    raise UsageError(f"unknown configuration key 'run.{key}'")
                cfg.seed = _coerce("run.seed", raw, 0, "int")
            continue
        if section not in RunConfig.SECTIONS:
            raise UsageError(f"unknown configuration section [{section}]")
        target = getattr(cfg, section)
        types = _field_types(type(target))
        for key, raw in cp[section].items():
            if key not in types:
                raise UsageError(f"unknown configuration key '{section}.{key}'")
            setattr(target, key, _coerce(f"{section}.{key}", raw, getattr(target, key), types[key]))
    return cfg

"""YAML run configuration: sections mirror the dataclasses they populate.

Every section is optional. Keys not listed in a section's dataclass are
rejected with a :class:`ConfigError` naming ``section.key``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .dataio import PreprocessConfig
from .objectives import LossWeights
from .phantom import PhantomSpec
from .repro import METHOD_ORDER, ExperimentConfig, default_dsa_spec, default_fundus_spec
from .training import SplitFractions, TrainConfig
from .vesselness import FrangiParams


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class DataSection:
    dsa_dir: str | None = None
    drive_dir: str | None = None
    n_dsa: int = 100
    n_fundus: int = 40
    image_size: int = 256


@dataclass(frozen=True)
class EvalSection:
    checkpoint: str | None = None
    threshold: float = 0.5
    figure: bool = True
    figure_rows: int = 4
    figure_tile: int = 128


@dataclass(frozen=True)
class ReproSection:
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[str, ...] = METHOD_ORDER


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_images: int = 100
    data: DataSection = DataSection()
    phantom: PhantomSpec = field(default_factory=default_dsa_spec)
    fundus_phantom: PhantomSpec = field(default_factory=default_fundus_spec)
    preprocess: PreprocessConfig = PreprocessConfig()
    train: TrainConfig = field(default_factory=lambda: ExperimentConfig().train)
    eval: EvalSection = EvalSection()
    repro: ReproSection = ReproSection()

    def experiment(self) -> ExperimentConfig:
        d = self.data
        return ExperimentConfig(
            n_dsa=d.n_dsa,
            n_fundus=d.n_fundus,
            drive_dir=d.drive_dir,
            image_size=d.image_size,
            dsa=self.phantom,
            fundus=self.fundus_phantom,
            preprocess=self.preprocess,
            train=self.train,
            methods=tuple(self.repro.methods),
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_TUPLE_FIELDS = {"width_range", "contrast_range", "scales", "adam_betas", "seeds", "methods"}
_NESTED = {
    "weights": LossWeights,
    "split": SplitFractions,
    "frangi": FrangiParams,
}


def _merge(base, data, where: str):
    """Return ``base`` (a dataclass instance) with the entries of ``data`` applied."""
    if data is None:
        return base
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    fields = {f.name for f in dataclasses.fields(base)}
    kw = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {where}.{key}")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            value = _merge(current, value, f"{where}.{key}")
        elif key in _TUPLE_FIELDS and value is not None:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{key} must be a list")
            value = tuple(value)
        kw[key] = value
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_config(path: Path | str | None) -> tuple[RunConfig, str]:
    """Parse a YAML file into a :class:`RunConfig`; returns ``(config, sha256 of the text)``."""
    if path is None:
        return RunConfig(), hashlib.sha256(b"").hexdigest()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return parse_config(data), hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {key}")
    scalars = {k: data[k] for k in ("seed", "n_images") if k in data}
    sections = {}
    for key in known - set(scalars):
        if key in data:
            sections[key] = _merge(getattr(cfg, key), data[key], key)
    try:
        return replace(cfg, **scalars, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

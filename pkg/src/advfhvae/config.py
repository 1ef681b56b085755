"""Flat key=value run configuration with a typed schema.

The config file is line-oriented ``key = value`` text; unknown keys are
rejected. CLI ``--set key=value`` overrides win over file values. The
resolved snapshot is written into every run directory before work starts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .losses import LossFlags, LossWeights
from .model import ModelConfig, PriorConfig
from .trainer import TrainingConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


@dataclass
class RunSettings:
    """Everything a training run needs, flattenable to key=value lines."""

    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {}
        m = asdict(self.model)
        priors = m.pop("priors")
        flat.update(m)
        flat.update(priors)
        t = asdict(self.training)
        weights = t.pop("weights")
        flg = t.pop("flags")
        flat.update(t)
        flat.update(weights)
        flat.update(flg)
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, object]) -> "RunSettings":
        flat = dict(flat)

        def take(dc):
            kwargs = {}
            for f in fields(dc):
                if f.name in flat:
                    kwargs[f.name] = flat.pop(f.name)
            return dc(**kwargs)

        priors = take(PriorConfig)
        weights = take(LossWeights)
        flags = take(LossFlags)
        model_kwargs = {f.name: flat.pop(f.name) for f in fields(ModelConfig)
                        if f.name in flat}
        train_kwargs = {f.name: flat.pop(f.name) for f in fields(TrainingConfig)
                        if f.name in flat}
        if flat:
            raise ConfigurationError(f"unknown config keys: {sorted(flat)}")
        return cls(
            model=ModelConfig(**model_kwargs, priors=priors),
            training=TrainingConfig(**train_kwargs, weights=weights, flags=flags),
        )


def _schema_types() -> dict[str, type]:
    types = {}
    for dc in (ModelConfig, PriorConfig, TrainingConfig, LossWeights, LossFlags):
        for f in fields(dc):
            if f.name in ("priors", "weights", "flags"):
                continue
            types[f.name] = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type).strip(), str)
    return types


SCHEMA = _schema_types()


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key {key!r}")
    typ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(raw)
            return _BOOL[raw.lower()]
        return typ(raw)
    except ValueError as exc:
        raise ConfigurationError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from exc


def read_config_file(path) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def write_config_file(settings: RunSettings, path) -> None:
    flat = settings.to_flat()
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in sorted(flat.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_settings(config_file=None, overrides: list[str] = ()) -> RunSettings:
    """Defaults <- config file <- key=value overrides."""
    flat = RunSettings().to_flat()
    if config_file is not None:
        flat.update(read_config_file(config_file))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        flat[key.strip()] = parse_value(key.strip(), raw)
    return RunSettings.from_flat(flat)

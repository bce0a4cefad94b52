"""
Run configuration: flat key=value files merged over a preset, flags on top.

Config files use the same syntax as a .env file and are read with
python-dotenv, e.g.

    preset=desk
    mode=conv_kg
    epochs=120
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from dotenv import dotenv_values

from kgaugment.errors import ConfigError

MODES = ("plain", "vanilla_kg", "conv_kg")
CONV_ENCODERS = ("planned", "identity")
NORMS = ("L1", "L2")

TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    mode: str = "conv_kg"
    fraction: float = 1.0
    fractions: str = "0.5,0.7,1.0"
    workers: int = 1

    # knowledge-graph embedding
    kg_dim: int = 16
    transe_margin: float = 1.0
    transe_norm: str = "L1"
    transe_epochs: int = 200
    transe_batch_size: int = 64
    transe_learning_rate: float = 0.01
    transe_holdout: float = 0.0
    word_vectors: str = ""

    # clustering and the cluster encoder
    clusters: int = 20
    cluster_iterations: int = 50
    cluster_restarts: int = 5
    conv_encoder: str = "planned"
    relu_after_pool: bool = False

    # text model and training
    word_dim: int = 16
    hidden_dim: int = 24
    seq_len: int = 16
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.01
    pretrain_epochs: int = 20
    shared_encoder: bool = False
    finetune_kg: bool = False

    def merged(self, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        updates: dict[str, Any] = {}
        for raw_key, raw_value in values.items():
            key = raw_key.strip().lower().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown configuration key {raw_key!r}")
            if raw_value is None:
                raise ConfigError(f"configuration key {raw_key!r} has no value")
            updates[key] = _coerce(key, known[key].type, raw_value)
        config = dataclasses.replace(self, **updates)
        config.validate()
        return config

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.transe_norm not in NORMS:
            raise ConfigError(f"transe_norm must be one of {NORMS}, got {self.transe_norm!r}")
        if self.conv_encoder not in CONV_ENCODERS:
            raise ConfigError(
                f"conv_encoder must be one of {CONV_ENCODERS}, got {self.conv_encoder!r}"
            )
        if self.transe_margin <= 0:
            raise ConfigError(f"transe_margin must be positive, got {self.transe_margin}")
        if not 0.0 <= self.transe_holdout < 1.0:
            raise ConfigError(f"transe_holdout must be in [0, 1), got {self.transe_holdout}")
        for name in (
            "kg_dim", "clusters", "word_dim", "hidden_dim", "seq_len", "batch_size",
            "transe_batch_size", "cluster_iterations", "cluster_restarts", "workers",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "pretrain_epochs", "transe_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        self.fraction_list()

    def fraction_list(self) -> list[float]:
        try:
            values = [float(part) for part in self.fractions.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"fractions must be comma-separated numbers: {self.fractions!r}") from exc
        if not values or any(not 0.0 < v <= 1.0 for v in values):
            raise ConfigError(f"fractions must lie in (0, 1]: {self.fractions!r}")
        return values

    def as_manifest(self) -> dict[str, str]:
        return {f.name: _render(getattr(self, f.name)) for f in sorted(fields(self), key=lambda f: f.name)}


FULL_OVERRIDES = {
    "batch_size": 256,
    "learning_rate": 0.05,
    "word_dim": 300,
    "seq_len": 300,
    "hidden_dim": 200,
    "kg_dim": 50,
    "clusters": 20,
    "epochs": 20,
}

PRESETS: dict[str, RunConfig] = {
    "desk": RunConfig(),
    "full": dataclasses.replace(RunConfig(preset="full"), **FULL_OVERRIDES),
}


def _coerce(key: str, type_name: Any, value: Any) -> Any:
    kind = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", str(type_name))
    text = str(value).strip()
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"configuration key {key!r}: cannot read {text!r} as {kind}") from exc
    return text


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def read_config_file(path: str | Path) -> dict[str, str | None]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    return dict(dotenv_values(path, encoding="utf-8"))


def load_run_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    """Preset defaults, then the config file, then overrides (flag wins)."""
    values: dict[str, Any] = {}
    if path:
        values.update(read_config_file(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    preset = str(values.get("preset", "desk")).strip().lower()
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    values["preset"] = preset
    return PRESETS[preset].merged(values)


def write_manifest(path: str | Path, entries: Mapping[str, Any]) -> None:
    """Flat key=value run manifest, keys sorted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={_render(entries[key])}" for key in sorted(entries)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, str]:
    return {k: v or "" for k, v in read_config_file(path).items()}

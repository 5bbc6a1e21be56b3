"""Flat ``key = value`` run configuration with a typed key registry."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from eend.datagen import SimConfig, SimulationError
from eend.metrics import DecodeConfig
from eend.model import VARIANTS, ConfigError, ModelConfig
from eend.trainer import TrainConfig

PRESETS = ("toy", "paper")


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | bool | str | taps
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    help: str = ""


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_open(v):
    return 0.0 < v < 1.0


_CHECKS: dict[str, tuple[Callable, str]] = {
    "model.variant": (lambda v: v in VARIANTS, f"one of {', '.join(VARIANTS)}"),
    "model.dtype": (lambda v: v in ("float32", "float64"), "float32 or float64"),
    "model.dropout": (lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    "model.mixing_ratio": (_non_negative, ">= 0"),
    "model.seed": (_non_negative, ">= 0"),
    "train.epochs": (_non_negative, ">= 0"),
    "train.max_steps": (_non_negative, ">= 0"),
    "train.keep_checkpoints": (_non_negative, ">= 0"),
    "train.beta1": (_unit_open, "in (0, 1)"),
    "train.beta2": (_unit_open, "in (0, 1)"),
    "train.seed": (_non_negative, ">= 0"),
    "sim.num_speakers": (lambda v: v == 2, "== 2"),
    "sim.overlap_ratio_target": (lambda v: 0.0 <= v <= 0.5, "in [0, 0.5]"),
    "sim.seed": (_non_negative, ">= 0"),
    "sim.num_conversations": (_non_negative, ">= 0"),
    "decode.threshold": (_unit_open, "in (0, 1)"),
    "decode.median_frames": (lambda v: v >= 1 and v % 2 == 1, "odd and >= 1"),
    "decode.collar": (_non_negative, ">= 0"),
}

_HELP = {
    "model.tap_layers": "comma-separated 1-based layers, or 'all'",
    "model.mixing_ratio": "weight of the averaged intermediate losses",
    "train.max_steps": "stop after this many steps (0 = no limit)",
    "train.keep_checkpoints": "epoch checkpoints kept on disk (0 = all)",
    "sim.num_conversations": "conversations written by 'simulate'",
}


def _kind_of(f: dataclasses.Field) -> str:
    t = str(f.type)
    if f.name == "tap_layers":
        return "taps"
    for kind in ("bool", "int", "float", "str"):
        if t == kind:
            return kind
    raise TypeError(f"no config kind for field {f.name}: {t}")


def _build_registry() -> dict[str, Key]:
    reg: dict[str, Key] = {}
    for prefix, cls in (("model", ModelConfig), ("train", TrainConfig), ("sim", SimConfig),
                        ("decode", DecodeConfig)):
        for f in dataclasses.fields(cls):
            name = f"{prefix}.{f.name}"
            kind = _kind_of(f)
            check, rule = _CHECKS.get(name, (None, ""))
            if check is None and kind in ("int", "float"):
                check, rule = _positive, "> 0"
            reg[name] = Key(name, kind, f.default, check, rule, _HELP.get(name, ""))
    reg["sim.num_conversations"] = Key(
        "sim.num_conversations", "int", 20, *_CHECKS["sim.num_conversations"],
        _HELP["sim.num_conversations"])
    return reg


REGISTRY = _build_registry()


def format_value(key: Key, value) -> str:
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind == "taps":
        return "all" if value is None else ",".join(str(v) for v in value)
    return str(value)


def parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                value = True
            elif low in ("false", "no", "0", "off"):
                value = False
            else:
                raise ValueError
        elif key.kind == "int":
            value = int(text)
        elif key.kind == "float":
            value = float(text)
        elif key.kind == "taps":
            value = None if text.lower() == "all" else tuple(
                int(t) for t in text.split(",") if t.strip())
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{key.name}: cannot read {text!r} as {key.kind}") from None
    if key.check is not None and not key.check(value):
        raise ConfigError(f"{key.name}: {value!r} out of range (must be {key.rule})")
    return value


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in REGISTRY:
            raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {name!r}")
        values[name] = parse_value(REGISTRY[name], value)
    return values


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    return resources.files("eend.presets").joinpath(f"{name}.conf").read_text()


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    num_conversations: int = 20

    @classmethod
    def from_values(cls, values: dict[str, Any]) -> "RunConfig":
        merged = {name: key.default for name, key in REGISTRY.items()}
        for name, value in values.items():
            if name not in REGISTRY:
                raise ConfigError(f"unknown config key {name!r}")
            merged[name] = value

        def section(prefix):
            return {n.split(".", 1)[1]: v for n, v in merged.items()
                    if n.startswith(prefix + ".") and n != "sim.num_conversations"}

        try:
            return cls(ModelConfig(**section("model")), TrainConfig(**section("train")),
                       SimConfig(**section("sim")), DecodeConfig(**section("decode")),
                       merged["sim.num_conversations"])
        except (ValueError, SimulationError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def values(self) -> dict[str, Any]:
        out = {}
        for prefix, obj in (("model", self.model), ("train", self.train), ("sim", self.sim),
                            ("decode", self.decode)):
            for f in dataclasses.fields(obj):
                out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
        out["sim.num_conversations"] = self.num_conversations
        return out

    def to_text(self) -> str:
        vals = self.values()
        return "".join(f"{n} = {format_value(REGISTRY[n], vals[n])}\n" for n in sorted(vals))


def load_config(path=None, preset: str | None = None,
                overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the preset, then the file, then ``overrides`` (raw strings)."""
    values: dict[str, Any] = {}
    if preset is not None:
        values.update(parse_text(preset_text(preset), f"preset:{preset}"))
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    for name, text in (overrides or {}).items():
        if name not in REGISTRY:
            raise ConfigError(f"unknown config key {name!r}")
        values[name] = parse_value(REGISTRY[name], text)
    return RunConfig.from_values(values)


def describe_keys() -> str:
    """One line per registered key: name, type, default and range."""
    lines = []
    for name in sorted(REGISTRY):
        key = REGISTRY[name]
        extra = f" ({key.rule})" if key.rule else ""
        note = f"  {key.help}" if key.help else ""
        lines.append(f"  {name:<30} {key.kind:<6} default={format_value(key, key.default)}{extra}{note}")
    return "\n".join(lines)

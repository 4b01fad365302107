"""Flat ``key = value`` run configuration shared by every command.

One key per line, ``#`` starts a comment, blank lines are ignored. Every key
has a default (see ``RunConfig.defaults_text()``); an unknown key or a line
that does not parse raises ConfigFileError carrying the line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ModelConfig
from .synthcxr import SynthConfig
from .tensor import ConfigError
from .trainer import TrainConfig


class ConfigFileError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class PretrainConfig:
    epochs: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    patches: int = 2000
    batch_size: int = 32


# key -> (section, field name); sections are the dataclasses in RunConfig
KEYS: dict[str, tuple[str, str]] = {
    "seed": ("run", "seed"),
    "val_fraction": ("run", "val_fraction"),
    "image_side": ("model", "image_side"),
    "g": ("model", "g"),
    "scale": ("model", "scale"),
    "pad_value": ("model", "pad_value"),
    "channels": ("model", "channels"),
    "kernel": ("model", "kernel"),
    "d_loc": ("model", "d_loc"),
    "d_b": ("model", "d_b"),
    "d_h": ("model", "d_h"),
    "n_classes": ("model", "n_classes"),
    "n_glimpses": ("model", "n_glimpses"),
    "sigma": ("model", "sigma"),
    "detach_locator": ("model", "detach_locator"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "momentum": ("train", "momentum"),
    "locator_lr": ("train", "locator_lr"),
    "baseline_lr": ("train", "baseline_lr"),
    "baseline_weight": ("train", "baseline_weight"),
    "clip_norm": ("train", "clip_norm"),
    "chunk": ("train", "chunk"),
    "repeats": ("train", "repeats"),
    "eval_mode": ("train", "eval_mode"),
    "heatmap_cell": ("train", "heatmap_cell"),
    "threads": ("train", "threads"),
    "policy": ("train", "policy"),
    "task": ("synth", "task"),
    "noise": ("synth", "noise"),
    "clutter": ("synth", "clutter"),
    "ctr_threshold": ("synth", "ctr_threshold"),
    "ctr_margin": ("synth", "ctr_margin"),
    "ctr_spread": ("synth", "ctr_spread"),
    "thorax_width": ("synth", "thorax_width"),
    "band_rows": ("synth", "band_rows"),
    "band_cols": ("synth", "band_cols"),
    "decoys": ("synth", "decoys"),
    "implant_half": ("synth", "implant_half"),
    "pretrain_epochs": ("pretrain", "epochs"),
    "pretrain_lr": ("pretrain", "lr"),
    "pretrain_momentum": ("pretrain", "momentum"),
    "pretrain_patches": ("pretrain", "patches"),
    "pretrain_batch": ("pretrain", "batch_size"),
}


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated values")
        return tuple(type(d)(p) for d, p in zip(default, parts))
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    seed: int = 0
    val_fraction: float = 0.2
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], lines: dict[str, int] | None = None) -> "RunConfig":
        lines = lines or {}
        base = cls()
        values: dict[str, dict] = {"run": {}, "model": {}, "train": {}, "synth": {}, "pretrain": {}}
        for key, raw in pairs.items():
            if key not in KEYS:
                raise ConfigFileError(f"unknown key {key!r}", lines.get(key))
            section, name = KEYS[key]
            default = getattr(base if section == "run" else getattr(base, section), name)
            try:
                values[section][name] = _parse_value(raw, default)
            except ValueError as exc:
                raise ConfigFileError(f"bad value for {key!r}: {exc}", lines.get(key)) from None
        return cls._assemble(values)

    @classmethod
    def _assemble(cls, values: dict[str, dict]) -> "RunConfig":
        run = values["run"]
        seed = run.get("seed", 0)
        try:
            model = ModelConfig(**values["model"])
            synth = SynthConfig(**{**values["synth"], "side": model.image_side, "seed": seed})
            train = TrainConfig(**{**values["train"], "n_glimpses": model.n_glimpses, "seed": seed})
            pretrain = PretrainConfig(**values["pretrain"])
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(str(exc)) from None
        frac = run.get("val_fraction", 0.2)
        if not 0.0 <= frac < 1.0:
            raise ConfigFileError("val_fraction must lie in [0, 1)")
        return cls(seed=seed, val_fraction=frac, model=model, train=train, synth=synth, pretrain=pretrain)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs: dict[str, str] = {}
        lines: dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigFileError(f"expected 'key = value', got {line.strip()!r}", lineno)
            key, raw = (s.strip() for s in body.split("=", 1))
            if not key or not raw:
                raise ConfigFileError(f"empty key or value in {line.strip()!r}", lineno)
            if key not in KEYS:
                raise ConfigFileError(f"unknown key {key!r}", lineno)
            if key in pairs:
                raise ConfigFileError(f"duplicate key {key!r}", lineno)
            pairs[key] = raw
            lines[key] = lineno
        return cls.from_pairs(pairs, lines)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def get(self, key: str):
        section, name = KEYS[key]
        return getattr(self if section == "run" else getattr(self, section), name)

    def to_text(self) -> str:
        return "".join(f"{key} = {_format_value(self.get(key))}\n" for key in KEYS)

    @classmethod
    def defaults_text(cls) -> str:
        return cls().to_text()


def replace(cfg: RunConfig, **overrides) -> RunConfig:
    pairs = {key: _format_value(cfg.get(key)) for key in KEYS}
    pairs.update({k: _format_value(v) for k, v in overrides.items()})
    return RunConfig.from_pairs(pairs)

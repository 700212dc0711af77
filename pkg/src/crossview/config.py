"""Hyperparameter records, the two shipped presets, and JSON config resolution."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    word_dim: int = 300
    char_emb_dim: int = 50
    char_filter_widths: tuple = (2, 3, 4)
    char_filters: int = 300
    lstm1_size: int = 1024
    lstm2_size: int = 512
    projection_size: int = 512
    dropout_labeled: float = 0.5
    dropout_unlabeled: float = 0.8
    num_tags: int = 0
    train_embeddings: bool = True

    def validate(self):
        dims = dict(word_dim=self.word_dim, char_emb_dim=self.char_emb_dim,
                    char_filters=self.char_filters, lstm1_size=self.lstm1_size,
                    lstm2_size=self.lstm2_size, projection_size=self.projection_size)
        bad = [k for k, v in dims.items() if int(v) <= 0]
        if not self.char_filter_widths or any(int(w) <= 0 for w in self.char_filter_widths):
            bad.append("char_filter_widths")
        for k in ("dropout_labeled", "dropout_unlabeled"):
            if not 0 <= getattr(self, k) < 1:
                bad.append(k)
        if bad:
            raise ConfigError(f"invalid encoder settings: {', '.join(bad)}")
        self.char_filter_widths = tuple(int(w) for w in self.char_filter_widths)
        return self

    @property
    def token_dim(self) -> int:
        return self.word_dim + len(self.char_filter_widths) * self.char_filters


@dataclass
class TrainConfig:
    max_steps: int = 400_000
    batch_size_labeled: int = 64
    batch_size_unlabeled: int = 64
    eval_every_steps: int = 30_000
    patience_evals: int = 5
    min_delta_f1: float = 0.05
    seed: int = 0
    mode: str = "cvt"
    unlabeled_per_labeled: int = 1
    base_lr: float = 0.5
    momentum: float = 0.9
    decay: float = 5e-5
    clip_norm: Optional[float] = 5.0
    ema_decay: Optional[float] = None
    prefetch: int = 0
    dtype: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        bad = []
        if self.max_steps <= 0:
            bad.append("max_steps")
        if self.patience_evals < 1:
            bad.append("patience_evals")
        if self.eval_every_steps < 1:
            bad.append("eval_every_steps")
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 1:
            bad.append("batch_size")
        if self.mode not in ("cvt", "supervised_only"):
            bad.append("mode")
        if self.unlabeled_per_labeled < 1:
            bad.append("unlabeled_per_labeled")
        if self.decay < 0:
            bad.append("decay")
        if self.dtype not in ("float32", "float64"):
            bad.append("dtype")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            bad.append("ema_decay")
        if bad:
            raise ConfigError(f"invalid training settings: {', '.join(bad)}")
        self.encoder.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["char_filter_widths"] = list(self.encoder.char_filter_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        enc = EncoderConfig(**_checked(EncoderConfig, d.pop("encoder", {}), "encoder."))
        return cls(encoder=enc, **_checked(cls, d, "")).validate()


def _checked(klass, d: dict, prefix: str) -> dict:
    names = {f.name for f in dataclasses.fields(klass)} - {"encoder"}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(prefix + k for k in unknown))
    return d


PRESETS = {
    "paper": dict(
        max_steps=400_000, batch_size_labeled=64, batch_size_unlabeled=64,
        eval_every_steps=30_000, patience_evals=5, min_delta_f1=0.05,
        base_lr=0.5, dtype="float32",
        encoder=dict(word_dim=300, char_emb_dim=50, char_filter_widths=[2, 3, 4],
                     char_filters=300, lstm1_size=1024, lstm2_size=512, projection_size=512,
                     dropout_labeled=0.5, dropout_unlabeled=0.8),
    ),
    "desk": dict(
        max_steps=2000, batch_size_labeled=64, batch_size_unlabeled=64,
        eval_every_steps=1000, patience_evals=5, min_delta_f1=0.05,
        base_lr=0.5, dtype="float32",
        encoder=dict(word_dim=50, char_emb_dim=16, char_filter_widths=[2, 3, 4],
                     char_filters=25, lstm1_size=64, lstm2_size=64, projection_size=64,
                     dropout_labeled=0.5, dropout_unlabeled=0.8),
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    return TrainConfig.from_dict(merge(d, overrides))


def merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b=value`` -> {"a": {"b": value}}; value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


# keys in a run config file that are not training hyperparameters
RUN_KEYS = ("preset", "labeled_path", "unlabeled_path", "val_path", "embeddings_path",
            "output_dir", "max_unlabeled", "min_count", "val_fraction")


@dataclass
class RunConfig:
    train: TrainConfig
    preset: str = "desk"
    labeled_path: Optional[str] = None
    unlabeled_path: Optional[str] = None
    val_path: Optional[str] = None
    embeddings_path: Optional[str] = None
    output_dir: str = "run"
    max_unlabeled: Optional[int] = None
    min_count: int = 1
    val_fraction: float = 0.1

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in RUN_KEYS}
        d.update(self.train.to_dict())
        return d


def resolve_run_config(path: Optional[str] = None, overrides=(), seed: Optional[int] = None) -> RunConfig:
    """defaults < preset < config file < --set overrides < --seed."""
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for o in overrides:
        user = merge(user, parse_override(o))
    if seed is not None:
        user["seed"] = seed
    name = user.pop("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    run = {k: user.pop(k) for k in RUN_KEYS if k in user}
    train = TrainConfig.from_dict(merge(json.loads(json.dumps(PRESETS[name])), user))
    return RunConfig(train=train, preset=name, **run)

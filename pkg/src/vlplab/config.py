"""Training configuration, presets and the ``key = value`` config file format.

Files are INI-style: top-level training keys under ``[train]`` and the
nested groups under ``[model]``, ``[sinkhorn]``, ``[text]`` and ``[image]``.
Tuples are comma separated, ``none`` means unset.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field, replace

from .imageaug import ImageAugConfig
from .model import ModelConfig
from .sinkhorn import SinkhornConfig
from .textaug import TextAugConfig

METHODS = ("CLIP", "SiamLIP", "BYOLIP", "BarLIP", "SwALIP", "SwALIP-modified")
RECIPES = ("base", "improved")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class TrainConfig:
    method: str = "CLIP"
    recipe: str = "improved"
    num_augs: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    label_smoothing: float = 0.1
    lr: float = 3e-3
    final_lr: float = 1e-5
    warmup_epochs: float = 1.0
    epochs: int = 60
    batch_size: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    dropout_prob: float = 0.0
    momentum: float = 0.99
    lam_bt: float = 5e-3
    swalip_lambda: float = 0.5
    swav_temperature: float = 0.1
    n_prototypes: int = 32
    eval_every: int = 10
    log_timing: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    text: TextAugConfig = field(default_factory=TextAugConfig)
    image: ImageAugConfig = field(default_factory=ImageAugConfig)

    @property
    def improved(self) -> bool:
        return self.recipe == "improved"

    @property
    def n_strong(self) -> int:
        return self.num_augs if self.improved else 0


SECTIONS = {"model": ModelConfig, "sinkhorn": SinkhornConfig, "text": TextAugConfig, "image": ImageAugConfig}

# Model keys that are derived from the method/recipe and never read from files.
DERIVED_MODEL_KEYS = ("strong_projectors", "predictors", "n_prototypes", "momentum", "text_dropout", "image_size")

PRESETS: dict[str, dict[str, dict[str, object]]] = {
    "desk": {},
    "cc3m-like": {"train": {"dropout_prob": 0.2, "weight_decay": 0.5}},
    "yfcc-like": {"train": {"dropout_prob": 0.0}, "text": {"stopword_prob": 0.9}},
    "paper": {
        "train": {"epochs": 32, "batch_size": 4096, "lr": 3e-3},
        "model": {"patch_size": 16, "encoder_hidden": 2048, "embed_dim": 1024,
                  "proj_hidden": 4096, "proj_dim": 256},
        "image": {"out_size": 224},
    },
}


def validate(cfg: TrainConfig) -> TrainConfig:
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}", "method")
    if cfg.recipe not in RECIPES:
        raise ConfigError("recipe must be 'base' or 'improved'", "recipe")
    if cfg.num_augs < 1:
        raise ConfigError("num_augs must be at least 1", "num_augs")
    if cfg.method == "SwALIP-modified" and (cfg.recipe != "improved" or cfg.num_augs < 2):
        raise ConfigError("SwALIP-modified requires multiple views: recipe=improved and num_augs >= 2 "
                          "(its swapped assignments come from two correlated strong views)", "method")
    if not 0.0 <= cfg.label_smoothing < 1.0:
        raise ConfigError("label_smoothing must lie in [0, 1)", "label_smoothing")
    if not (0.0 <= cfg.alpha <= 1.0 and 0.0 <= cfg.beta <= 1.0):
        raise ConfigError("alpha and beta must lie in [0, 1]", "alpha")
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be at least 2", "batch_size")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be at least 1", "epochs")
    if not 0.0 <= cfg.dropout_prob < 1.0:
        raise ConfigError("dropout_prob must lie in [0, 1)", "dropout_prob")
    if cfg.method == "SwALIP" and cfg.n_prototypes < 1:
        raise ConfigError("SwALIP needs n_prototypes >= 1", "n_prototypes")
    return cfg


def model_config(cfg: TrainConfig) -> ModelConfig:
    """Model layout implied by method and recipe."""
    return replace(
        cfg.model,
        image_size=cfg.image.out_size,
        strong_projectors=cfg.improved,
        predictors=cfg.method in ("SiamLIP", "BYOLIP"),
        momentum=cfg.method == "BYOLIP",
        n_prototypes=cfg.n_prototypes if cfg.method == "SwALIP" else 0,
        text_dropout=cfg.dropout_prob,
    )


# ---------------------------------------------------------------------------
# Value conversion


def _hint(cls, name):
    return typing.get_type_hints(cls)[name]


def _parse_value(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            if text.lower() == "none":
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse_value(text, inner, key)
        if origin is tuple:
            parts = [p for p in text.split(",") if p.strip()]
            return tuple(_parse_value(p, args[0], key) for p in parts)
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for key {key}", key) from None
    raise ConfigError(f"unsupported type for key {key}", key)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, dict[str, str | object]]) -> TrainConfig:
    """Apply ``{section: {key: value}}``; string values are parsed by field type."""
    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {}
    for section, values in overrides.items():
        cls = TrainConfig if section == "train" else SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section [{section}]", section)
        names = {f.name for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in names or (section == "train" and key in SECTIONS) or \
                    (section == "model" and key in DERIVED_MODEL_KEYS):
                raise ConfigError(f"unknown config key {section}.{key}", key)
            value = _parse_value(raw, _hint(cls, key), key) if isinstance(raw, str) else raw
            (top if section == "train" else nested.setdefault(section, {}))[key] = value
    for section, values in nested.items():
        top[section] = replace(getattr(cfg, section), **values)
    return replace(cfg, **top)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"unparseable config: {err}") from None
    overrides = {s: dict(parser.items(s)) for s in parser.sections()}
    return apply_overrides(base or TrainConfig(), overrides)


def with_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "preset")
    return apply_overrides(cfg, PRESETS[name])


def to_config_text(cfg: TrainConfig) -> str:
    out = io.StringIO()
    out.write("[train]\n")
    for f in dataclasses.fields(TrainConfig):
        if f.name not in SECTIONS:
            out.write(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n")
    for section in SECTIONS:
        out.write(f"\n[{section}]\n")
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            if section == "model" and f.name in DERIVED_MODEL_KEYS:
                continue
            out.write(f"{f.name} = {_format_value(getattr(sub, f.name))}\n")
    return out.getvalue()


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(to_config_text(cfg).encode("utf-8")).hexdigest()

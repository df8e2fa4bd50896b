"""Layered run configuration: built-in defaults, then a key-value config
file, then CLI flag overrides. The fully resolved set is echoed into every
run directory as sorted `key = value` lines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .preprocess import PreprocessConfig

MODES = ("semipl", "sspl_unsup", "supervised_only")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 2e-3
    ssl_head_lr: float = 2e-3
    steps: int = 400
    seed: int = 0
    mode: str = "semipl"
    pcm_enabled: bool = True
    labeled_fraction: float = 1.0
    checkpoint_every: int = 0  # 0: final checkpoint only
    sup_weight: float = 1.0
    class_loss_weight: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0 or self.ssl_head_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'")
        if not (0.0 <= self.labeled_fraction <= 1.0):
            raise ConfigError("labeled_fraction must be in [0, 1]")
        if self.mode == "supervised_only" and self.labeled_fraction == 0.0:
            raise ConfigError("supervised_only training needs labeled_fraction > 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        return self


def method_label(mode: str) -> str:
    return {
        "semipl": "SemiPL(Semi-supervised)",
        "sspl_unsup": "SSPL(Unsupervised)",
        "supervised_only": "Supervised(Full)",
    }[mode]


def format_lr(lr: float) -> str:
    """Compact scientific form, e.g. 5e-5 instead of 5e-05."""
    s = f"{lr:g}"
    if "e" in s:
        mant, exp = s.split("e")
        return f"{mant}e{int(exp)}"
    return s


# Config-file key -> (dataclass, field name). `aug.*` keys address the
# augmentation recipe inside the preprocess config.
_KEYMAP: dict[str, tuple[str, str]] = {}


def _register(prefix: str, cls, names: dict[str, str]) -> None:
    for key, field_name in names.items():
        _KEYMAP[key] = (prefix, field_name)


_register(
    "train",
    TrainConfig,
    {f.name: f.name for f in fields(TrainConfig)},
)
_register(
    "pre",
    PreprocessConfig,
    {
        "sample_rate": "sample_rate",
        "n_mels": "n_mels",
        "win_ms": "win_ms",
        "hop_ms": "hop_ms",
        "log_eps": "log_eps",
        "n_fft": "n_fft",
        "img_mean": "img_mean",
        "img_std": "img_std",
        "aug.enabled": "aug_enabled",
        "aug.crop_min_area": "crop_min_area",
        "aug.flip_p": "flip_p",
        "aug.jitter": "jitter",
    },
)
_register(
    "model",
    ModelConfig,
    {
        "vis_channels": "vis_channels",
        "aud_channels": "aud_channels",
        "embed_dim": "embed_dim",
        "pcm_iters": "pcm_iters",
        "heatmap_res": "heatmap_res",
        "use_class_labels": "use_class_labels",
        "attn_tau": "attn_tau",
        "attn_temp": "attn_temp",
    },
)

def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_file(path: Path) -> dict:
    """`key = value` lines; `#` comments; values parsed as JSON when possible."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in _KEYMAP:
            raise ConfigError(f"{path}:{line_no}: unknown config key '{key}'")
        values[key] = _coerce(raw)
    return values


@dataclass
class RunConfigs:
    train: TrainConfig
    model: ModelConfig
    pre: PreprocessConfig

    def echo(self) -> str:
        """Sorted `key = value` lines covering the fully resolved config."""
        lines = []
        for key, (prefix, field_name) in _KEYMAP.items():
            obj = {"train": self.train, "pre": self.pre, "model": self.model}[prefix]
            lines.append(f"{key} = {json.dumps(getattr(obj, field_name))}")
        # pcm_enabled lives on both the train knob and the model; echo the model's
        lines.append(f"model.pcm_enabled = {json.dumps(self.model.pcm_enabled)}")
        return "\n".join(sorted(lines)) + "\n"


def build_configs(
    config_file: Path | None = None, overrides: dict | None = None
) -> RunConfigs:
    """Defaults <- config file <- CLI overrides, then validate the result.

    The train-level `pcm_enabled` / `use_class_labels` knobs are forwarded
    into the model configuration so one flag controls the input format.
    """
    values: dict = {}
    if config_file is not None:
        values.update(parse_config_file(config_file))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = val

    groups: dict[str, dict] = {"train": {}, "pre": {}, "model": {}}
    for key, val in values.items():
        prefix, field_name = _KEYMAP[key]
        groups[prefix][field_name] = val

    def _tupled(d: dict, *names: str) -> dict:
        return {
            k: tuple(v) if k in names and isinstance(v, list) else v
            for k, v in d.items()
        }

    try:
        train = TrainConfig(**groups["train"])
        pre = PreprocessConfig(**_tupled(groups["pre"], "img_mean", "img_std"))
        model = ModelConfig(
            **_tupled(groups["model"], "vis_channels", "aud_channels", "heatmap_res")
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    model = replace(model, pcm_enabled=train.pcm_enabled)
    train.validate()
    pre.validate()
    # n_classes is data-dependent; defer full model validation when labels are on
    if not model.use_class_labels:
        model.validate()
    return RunConfigs(train=train, model=model, pre=pre)

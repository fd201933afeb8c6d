"""Model/training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

FE_VARIANTS = ("none", "semantic", "visual", "multimodal")
SES_MODES = ("none", "sequential_pe", "ses")
MASK_MODES = ("none", "semantic", "visual_random", "visual_clue")
PRECISIONS = ("f32", "f64")


@dataclass
class TrainConfig:
    # architecture
    d_model: int = 64
    max_len: int = 10
    iterations: int = 3
    heads: int = 4
    blocks: int = 2
    lm_blocks: int = 2
    ffn: int = 128
    img_h: int = 16
    img_w: int = 64
    channels: int = 1
    stem_width: int = 16
    backbone_widths: tuple[int, ...] = (32, 32, 64, 64)
    unet_channels: int = 32
    vision_transformer: bool = True
    fe_variant: str = "multimodal"
    ses_mode: str = "ses"
    mask_mode: str = "visual_clue"
    mask_k: int = 0
    keep_prob: float = 0.1
    random_mask_p: float = 0.04
    share_chargen_pos: bool = False
    lm_diag_mask: bool = True
    modality_embedding: bool = False
    # optimisation
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_epoch: int = -1
    lr_decay_factor: float = 0.1
    epochs: int = 30
    grad_clip: float = 5.0
    train_augment: float = 0.5
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.validate()

    # derived quantities
    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def feat_h(self) -> int:
        return self.img_h // 4

    @property
    def feat_w(self) -> int:
        return self.img_w // 4

    @property
    def num_visual(self) -> int:
        return self.feat_h * self.feat_w

    @property
    def effective_k(self) -> int:
        if self.mask_k > 0:
            return self.mask_k
        return max(1, math.ceil(self.random_mask_p * self.num_visual))

    @property
    def effective_decay_epoch(self) -> int:
        if self.lr_decay_epoch >= 0:
            return self.lr_decay_epoch
        return int(round(0.6 * self.epochs))

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError(f"iterations (M) must be >= 1, got {self.iterations}")
        if self.fe_variant not in FE_VARIANTS:
            raise ConfigError(f"fe_variant must be one of {FE_VARIANTS}, got {self.fe_variant!r}")
        if self.ses_mode not in SES_MODES:
            raise ConfigError(f"ses_mode must be one of {SES_MODES}, got {self.ses_mode!r}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.img_h % 4 or self.img_w % 4:
            raise ConfigError(f"input {self.img_h}x{self.img_w} not divisible by 4")
        if self.d_model % 4:
            raise ConfigError(f"d_model {self.d_model} must be divisible by 4 for the 2-D position encoding")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if len(self.backbone_widths) != 4 or self.backbone_widths[-1] != self.d_model:
            raise ConfigError("backbone_widths needs 4 entries ending in d_model")
        if self.max_len < 2:
            raise ConfigError("max_len (T) must be >= 2")
        if not 0.0 <= self.random_mask_p <= 1.0 or not 0.0 <= self.keep_prob <= 1.0:
            raise ConfigError("masking probabilities must lie in [0, 1]")
        if not 1 <= self.effective_k <= self.num_visual:
            raise ConfigError(f"mask_k must lie in [1, {self.num_visual}]")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        for name in ("blocks", "lm_blocks", "heads", "ffn", "batch_size", "unet_channels", "stem_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.train_augment <= 1.0:
            raise ConfigError("train_augment must lie in [0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def paper_config(**overrides) -> TrainConfig:
    """Full-size setting: D=512, T=25, 8 heads, 4 LM blocks, 32x128 RGB input."""
    base = dict(
        d_model=512, max_len=25, iterations=3, heads=8, blocks=2, lm_blocks=4, ffn=2048,
        img_h=32, img_w=128, channels=3, stem_width=64, backbone_widths=(128, 256, 512, 512),
        unet_channels=64, batch_size=384, lr=1e-4, lr_decay_epoch=6, epochs=10,
    )
    base.update(overrides)
    return TrainConfig(**base)


def baseline_of(cfg: TrainConfig) -> TrainConfig:
    """The fusion-disabled counterpart of ``cfg`` (no FE, no spatial encoding, no masking)."""
    return cfg.replace(fe_variant="none", ses_mode="none", mask_mode="none")


# -- text format -------------------------------------------------------------------

_SECTIONS = {
    "model": ("d_model", "max_len", "iterations", "heads", "blocks", "lm_blocks", "ffn",
              "stem_width", "backbone_widths", "unet_channels", "vision_transformer",
              "share_chargen_pos", "lm_diag_mask", "modality_embedding"),
    "fusion": ("fe_variant", "ses_mode", "mask_mode", "mask_k", "keep_prob", "random_mask_p"),
    "input": ("img_h", "img_w", "channels"),
    "train": ("batch_size", "lr", "lr_decay_epoch", "lr_decay_factor", "epochs", "grad_clip", "train_augment",
              "seed", "precision"),
}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``[section]`` / ``key = value`` text on top of ``base`` (desk defaults)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    values = (base or TrainConfig()).to_dict()
    defaults = TrainConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key not in values:
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw, getattr(defaults, key))
    return TrainConfig.from_dict(values)


def load_config(path: str | Path) -> TrainConfig:
    """Read a config file. A ``preset = paper`` line selects the paper-scale base."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    base = None
    body = []
    for line in text.splitlines():
        key, _, val = line.partition("=")
        if key.strip() != "preset":
            body.append(line)
            continue
        preset = val.split("#")[0].strip()
        if preset == "paper":
            base = paper_config()
        elif preset != "desk":
            raise ConfigError(f"unknown preset {preset!r}")
    return parse_config_text("\n".join(body), base)


def dump_config(cfg: TrainConfig) -> str:
    values = cfg.to_dict()
    out = []
    for section, keys in _SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            val = values[key]
            if isinstance(val, list):
                val = ", ".join(str(v) for v in val)
            out.append(f"{key} = {val}")
        out.append("")
    return "\n".join(out)


assert {k for keys in _SECTIONS.values() for k in keys} == {f.name for f in dataclasses.fields(TrainConfig)}

"""Closed-form trainable-parameter counts computed from a config alone.

Nothing here builds a model, so the numbers serve as an independent check on
the module tree and allow paper-scale counts without allocating weights.
"""

from __future__ import annotations

from .config import TrainConfig
from .data import NUM_CLASSES


def linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def conv(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_in * c_out * k * k + (c_out if bias else 0)


def layer_norm(d: int) -> int:
    return 2 * d


def attention(d: int) -> int:
    return 4 * linear(d, d)


def feed_forward(d: int, hidden: int) -> int:
    return linear(d, hidden) + linear(hidden, d)


def encoder_block(d: int, ffn: int) -> int:
    return 2 * layer_norm(d) + attention(d) + feed_forward(d, ffn)


def cross_block(d: int, ffn: int) -> int:
    # separate norms for queries and for the key/value memory
    return 3 * layer_norm(d) + attention(d) + feed_forward(d, ffn)


def backbone(cfg: TrainConfig) -> int:
    strides = (2, 1, 2, 1)
    widths = (cfg.stem_width,) + tuple(cfg.backbone_widths)
    total = conv(cfg.channels, cfg.stem_width, 3)
    for i, s in enumerate(strides):
        c_in, c_out = widths[i], widths[i + 1]
        total += conv(c_in, c_out, 3) + conv(c_out, c_out, 3)
        if s != 1 or c_in != c_out:
            total += conv(c_in, c_out, 1)
    return total


def vision_encoder(cfg: TrainConfig) -> int:
    total = backbone(cfg)
    if cfg.vision_transformer:
        total += cfg.blocks * encoder_block(cfg.d_model, cfg.ffn) + layer_norm(cfg.d_model)
    return total


def mini_unet(d: int, c: int) -> int:
    return conv(d, c, 3) + 2 * conv(c, c, 3) + conv(2 * c, c, 3) + conv(c, d, 1)


def seed_decoder(cfg: TrainConfig, own_positions: bool = True) -> int:
    d = cfg.d_model
    pos = cfg.max_len * d if own_positions else 0
    return pos + mini_unet(d, cfg.unet_channels) + linear(d, NUM_CLASSES, bias=False)


def language_model(cfg: TrainConfig) -> int:
    # position queries are shared with the seed decoder and counted there
    d = cfg.d_model
    return linear(NUM_CLASSES, d, bias=False) + cfg.lm_blocks * cross_block(d, cfg.ffn) + layer_norm(d)


def feature_enhancement(cfg: TrainConfig) -> int:
    d = cfg.d_model
    if cfg.fe_variant == "none":
        return 0
    if cfg.fe_variant == "multimodal":
        extra = 2 * d if cfg.modality_embedding else 0
        return cfg.blocks * encoder_block(d, cfg.ffn) + layer_norm(d) + extra
    return cfg.blocks * cross_block(d, cfg.ffn) + layer_norm(d)


def breakdown(cfg: TrainConfig) -> dict[str, int]:
    """Per-component counts; their sum is the model total."""
    d, C = cfg.d_model, NUM_CLASSES
    parts = {
        "vision": vision_encoder(cfg),
        "seed_decoder": seed_decoder(cfg),
        "language_model": language_model(cfg),
        "semantic_head": linear(d, C),
        "feature_enhancement": feature_enhancement(cfg),
        "character_generator": (seed_decoder(cfg, own_positions=not cfg.share_chargen_pos)
                                if cfg.fe_variant != "none" else 0),
        "semantic_mm_head": linear(d, C),
        "gate": 2 * d * d,
        "fused_head": linear(d, C),
        "mask_tokens": d * ((cfg.mask_mode in ("visual_random", "visual_clue")) + (cfg.mask_mode == "semantic")),
    }
    return parts


def count_parameters(cfg: TrainConfig) -> int:
    return sum(breakdown(cfg).values())


def overhead_ratio(cfg: TrainConfig) -> float:
    """count(cfg) / count(same config with fusion disabled)."""
    from .config import baseline_of

    return count_parameters(cfg) / count_parameters(baseline_of(cfg))

"""Visual feature extractor: residual conv backbone, 2-D sinusoidal positions, Transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import TrainConfig
from .errors import ConfigError
from .nn import Conv2d, EncoderBlock, LayerNorm, Module
from .tensor import Tensor

BACKBONE_STRIDES = (2, 1, 2, 1)


@dataclass(frozen=True)
class SpatialPositionEmbedding:
    grid: np.ndarray  # h x w x d

    @property
    def flat(self) -> np.ndarray:
        """Row-major ``(h*w) x d`` view."""
        h, w, d = self.grid.shape
        return self.grid.reshape(h * w, d)


def sinusoidal_2d_pe(h: int, w: int, d: int) -> SpatialPositionEmbedding:
    """First ``d/2`` channels encode the row, the rest the column.

    Within each half, channels alternate ``sin(p * f_k), cos(p * f_k)`` with
    ``f_k = 10000 ** (-2k / (d/2))``.
    """
    if d % 4:
        raise ConfigError(f"2-D position encoding needs d divisible by 4, got {d}")
    half = d // 2
    freqs = 10000.0 ** (-np.arange(0, half, 2, dtype=np.float64) / half)

    def encode_1d(n):
        ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
        out = np.empty((n, half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = encode_1d(h)
    cols = encode_1d(w)
    grid = np.concatenate(
        [np.broadcast_to(rows[:, None, :], (h, w, half)), np.broadcast_to(cols[None, :, :], (h, w, half))],
        axis=-1,
    )
    return SpatialPositionEmbedding(np.ascontiguousarray(grid))


def flatten_features(fmap: Tensor) -> Tensor:
    """``B x D x h x w`` -> ``B x (h*w) x D`` in row-major spatial order."""
    B, D, h, w = fmap.shape
    return fmap.reshape(B, D, h * w).transpose(0, 2, 1)


def unflatten_features(flat: Tensor, h: int, w: int) -> Tensor:
    B, N, D = flat.shape
    return flat.transpose(0, 2, 1).reshape(B, D, h, w)


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, gain=0.5, dtype=dtype)
        self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride, dtype=dtype) if (stride != 1 or c_in != c_out) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.proj is None else self.proj(x)
        return F.relu(h + skip)


class ConvBackbone(Module):
    """Stem conv plus four residual blocks; two of them stride 2 (4x downsampling)."""

    def __init__(self, cfg: TrainConfig, rng):
        dt = cfg.dtype
        self.stem = Conv2d(cfg.channels, cfg.stem_width, 3, rng, dtype=dt)
        widths = (cfg.stem_width,) + tuple(cfg.backbone_widths)
        self.blocks = [ResidualBlock(widths[i], widths[i + 1], BACKBONE_STRIDES[i], rng, dt)
                       for i in range(4)]

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.stem(x))
        for blk in self.blocks:
            h = blk(h)
        return h


def images_to_tensor(images, dtype) -> Tensor:
    """``B x H x W x C`` array -> ``B x C x H x W`` constant tensor."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[..., None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


class VisionEncoder(Module):
    """V = Transformer(backbone(X) + P^V), returned flattened as ``B x (hw) x D``."""

    def __init__(self, cfg: TrainConfig, rng):
        if cfg.img_h % 4 or cfg.img_w % 4:
            raise ConfigError(f"input {cfg.img_h}x{cfg.img_w} not divisible by 4")
        self.cfg = cfg
        self.backbone = ConvBackbone(cfg, rng)
        self.use_transformer = cfg.vision_transformer
        self.use_position = True
        self.transformer = [EncoderBlock(cfg.d_model, cfg.heads, cfg.ffn, rng, cfg.dtype)
                            for _ in range(cfg.blocks)] if cfg.vision_transformer else []
        self.norm = LayerNorm(cfg.d_model, dtype=cfg.dtype) if cfg.vision_transformer else None
        pe = sinusoidal_2d_pe(cfg.feat_h, cfg.feat_w, cfg.d_model)
        self._pos = pe
        self._pos_chw = Tensor(pe.grid.transpose(2, 0, 1).astype(cfg.dtype))

    @property
    def position_embedding(self) -> SpatialPositionEmbedding:
        return self._pos

    def conv_features(self, images) -> Tensor:
        x = images_to_tensor(images, self.cfg.dtype)
        if x.shape[2] != self.cfg.img_h or x.shape[3] != self.cfg.img_w:
            raise ConfigError(f"model built for {self.cfg.img_h}x{self.cfg.img_w}, got {x.shape[2]}x{x.shape[3]}")
        return self.backbone(x)

    def forward(self, images) -> Tensor:
        fmap = self.conv_features(images)
        if self.use_position:
            fmap = fmap + self._pos_chw
        v = flatten_features(fmap)
        if self.use_transformer:
            for blk in self.transformer:
                v = blk(v)
            v = self.norm(v)
        return v

    encode = forward

    def attention_maps(self) -> list[np.ndarray]:
        return [blk.attn.last_attn for blk in self.transformer]

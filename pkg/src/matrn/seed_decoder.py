"""Position-query attention decoder (seed text generator / character generator)."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Module, trunc_normal
from .tensor import Parameter, Tensor
from .vision import flatten_features, unflatten_features


class MiniUNet(Module):
    """One down/up level with a skip connection; keeps the spatial size and width ``D``."""

    def __init__(self, d: int, channels: int, rng, dtype=np.float32):
        self.enc = Conv2d(d, channels, 3, rng, dtype=dtype)
        self.down = Conv2d(channels, channels, 3, rng, stride=2, dtype=dtype)
        self.mid = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.fuse = Conv2d(2 * channels, channels, 3, rng, dtype=dtype)
        self.out = Conv2d(channels, d, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, zero_skip: bool = False) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ConfigError(f"mini U-Net needs even feature-map sides, got {x.shape[2:]}")
        skip = F.relu(self.enc(x))
        h = F.relu(self.mid(F.relu(self.down(skip))))
        up = F.upsample_nearest2d(h, 2)
        if zero_skip:
            skip = skip * 0.0
        h = F.relu(self.fuse(F.concat([skip, up], axis=1)))
        return self.out(h)


def attention_map(pos_queries: Tensor, keys: Tensor) -> Tensor:
    """softmax(P K^T / sqrt(D)) over the visual axis: ``B x T x N``."""
    D = keys.shape[-1]
    if pos_queries.shape[-1] != D:
        raise DimensionError(f"query width {pos_queries.shape[-1]} != key width {D}")
    scores = F.matmul(pos_queries, keys.transpose(0, 2, 1)) * (1.0 / math.sqrt(D))
    return F.softmax(scores, axis=-1)


def aggregate(attn: Tensor, visual: Tensor) -> Tensor:
    """E = A V~."""
    return F.matmul(attn, visual)


def classify(seq: Tensor, weight: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(logits, probabilities)`` for ``seq @ weight``."""
    logits = F.matmul(seq, weight)
    return logits, F.softmax(logits, axis=-1)


class SeedDecoder(Module):
    """Attention over visual features with learned position queries ``P^S``.

    ``pos`` may be shared with another module (the language model); otherwise
    a fresh ``T x D`` parameter is created.
    """

    def __init__(self, d: int, max_len: int, num_classes: int, unet_channels: int, rng,
                 pos: Parameter | None = None, dtype=np.float32):
        self.pos = pos if pos is not None else Parameter(trunc_normal(rng, (max_len, d), 0.02, dtype))
        self.unet = MiniUNet(d, unet_channels, rng, dtype)
        bound = math.sqrt(6.0 / (d + num_classes))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(d, num_classes)).astype(dtype))

    def keys(self, visual: Tensor, h: int, w: int, zero_skip: bool = False) -> Tensor:
        return flatten_features(self.unet(unflatten_features(visual, h, w), zero_skip=zero_skip))

    def forward(self, visual: Tensor, h: int, w: int) -> tuple[Tensor, Tensor, Tensor]:
        """``visual``: ``B x (h*w) x D`` -> ``(E, logits, A)``."""
        attn = attention_map(self.pos, self.keys(visual, h, w))
        seq = aggregate(attn, visual)
        logits = F.matmul(seq, self.weight)
        return seq, logits, attn


def greedy_decode(logits, pad: int = 36) -> list[list[int]]:
    """Argmax per position, truncated at the first pad prediction."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    best = arr.argmax(axis=-1)
    out = []
    for row in np.atleast_2d(best):
        seq = []
        for idx in row.tolist():
            if idx == pad:
                break
            seq.append(idx)
        out.append(seq)
    return out

"""Bidirectional cloze-style language model over (soft) character distributions.

Queries start from the position embeddings ``P^S``; keys/values are a linear
embedding of the input distributions plus a fixed 1-D sinusoidal position
code. Each block is cross-attention + feed-forward with no self-attention, and
position ``i`` is barred from key ``i`` in every block, so the feature at ``i``
never sees the character it is meant to re-estimate.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import functional as F
from .errors import InputError
from .nn import CrossBlock, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor


def diagonal_attention_mask(T: int) -> np.ndarray:
    """Allowed-pairs matrix: everything except query ``i`` -> key ``i``."""
    if T < 2:
        warnings.warn("diagonal mask with T=1 allows no keys at all", RuntimeWarning, stacklevel=2)
    return ~np.eye(T, dtype=bool)


def sinusoidal_1d(n: int, d: int) -> np.ndarray:
    freqs = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang[:, : d // 2])
    return out


class LanguageModel(Module):
    def __init__(self, d: int, max_len: int, num_classes: int, heads: int, ffn: int, blocks: int,
                 pos: Parameter, rng, diag_mask: bool = True, dtype=np.float32):
        self.pos = pos
        self.embed = Linear(num_classes, d, rng, bias=False, dtype=dtype)
        self.blocks = [CrossBlock(d, heads, ffn, rng, dtype) for _ in range(blocks)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.diag_mask = diag_mask and max_len >= 2
        self._key_pos = Tensor(sinusoidal_1d(max_len, d).astype(dtype))
        self._allowed = diagonal_attention_mask(max_len) if self.diag_mask else None

    def forward(self, probs: Tensor) -> Tensor:
        """``B x T x C`` distributions -> semantic features ``B x T x D``."""
        rows = probs.data.sum(axis=-1)
        if np.any(np.abs(rows - 1.0) > 1e-3) or np.any(probs.data < -1e-6):
            raise InputError("language model input rows must be probability distributions")
        # gradient stops here: the LM never trains its producer
        memory = self.embed(probs.detach()) + self._key_pos
        B, T, _ = probs.shape
        x = F.add(Tensor(np.zeros((B, 1, 1), dtype=self.pos.dtype)), self.pos)
        for blk in self.blocks:
            x = blk(x, memory, self._allowed)
        return self.norm(x)

    def attention_maps(self) -> list[np.ndarray]:
        return [blk.attn.last_attn for blk in self.blocks]


def one_hot(indices: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    return np.eye(num_classes, dtype=dtype)[indices]


def corrupt_word(word: str, rng: np.random.Generator, symbols: str, lexicon: set[str] | None = None) -> str:
    """Substitute one random character, avoiding results that are themselves lexicon words."""
    for _ in range(100):
        pos = int(rng.integers(len(word)))
        ch = symbols[int(rng.integers(len(symbols)))]
        if ch == word[pos]:
            continue
        out = word[:pos] + ch + word[pos + 1:]
        if lexicon is None or out not in lexicon:
            return out
    return word

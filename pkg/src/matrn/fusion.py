"""Cross-modal fusion: spatial encoding of semantics, feature enhancement,
feature masking and the gated output fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError, UsageError
from .language_model import sinusoidal_1d
from .nn import CrossBlock, EncoderBlock, LayerNorm, Module, trunc_normal
from .tensor import Parameter, Tensor


def ses(semantic: Tensor, attn: Tensor, pos_flat) -> Tensor:
    """S_align = S + A P~V. Parameter-free; ``pos_flat`` is ``(hw) x D``."""
    pos = pos_flat if isinstance(pos_flat, Tensor) else Tensor(np.asarray(pos_flat, dtype=semantic.dtype))
    if attn.shape[-1] != pos.shape[0] or semantic.shape[-1] != pos.shape[-1]:
        raise DimensionError(f"ses: attention {attn.shape}, positions {pos.shape}, semantics {semantic.shape}")
    return semantic + F.matmul(attn, pos)


def sequential_pe(semantic: Tensor) -> Tensor:
    """Plain 1-D sinusoidal position code added to the semantic features."""
    T, D = semantic.shape[-2:]
    return semantic + Tensor(sinusoidal_1d(T, D).astype(semantic.dtype))


class FeatureEnhancement(Module):
    """Two-stream Transformer stage in one of four flavours.

    * ``multimodal`` - self-attention over ``[V; S]``; outputs are split by position.
    * ``semantic``   - semantic queries attend to visual keys; V passes through.
    * ``visual``     - visual queries attend to semantic keys; S passes through.
    * ``none``       - identity.
    """

    def __init__(self, variant: str, d: int, heads: int, ffn: int, blocks: int, rng,
                 modality_embedding: bool = False, dtype=np.float32):
        self.variant = variant
        if variant == "multimodal":
            self.blocks = [EncoderBlock(d, heads, ffn, rng, dtype) for _ in range(blocks)]
            self.norm = LayerNorm(d, dtype=dtype)
        elif variant in ("semantic", "visual"):
            self.blocks = [CrossBlock(d, heads, ffn, rng, dtype) for _ in range(blocks)]
            self.norm = LayerNorm(d, dtype=dtype)
        elif variant == "none":
            self.blocks = []
            self.norm = None
        else:
            raise ConfigError(f"unknown FE variant {variant!r}")
        self.type_embed = (Parameter(trunc_normal(rng, (2, d), 0.02, dtype))
                           if modality_embedding and variant == "multimodal" else None)

    def forward(self, visual: Tensor, semantic: Tensor,
                allowed: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        if self.variant == "none":
            return visual, semantic
        if self.variant == "semantic":
            s = semantic
            for blk in self.blocks:
                s = blk(s, visual, allowed)
            return visual, self.norm(s)
        if self.variant == "visual":
            v = visual
            for blk in self.blocks:
                v = blk(v, semantic, allowed)
            return self.norm(v), semantic
        n_vis = visual.shape[1]
        if self.type_embed is not None:
            visual = visual + self.type_embed[0]
            semantic = semantic + self.type_embed[1]
        x = F.concat([visual, semantic], axis=1)
        for blk in self.blocks:
            x = blk(x, allowed)
        x = self.norm(x)
        return x[:, :n_vis], x[:, n_vis:]

    def attention_maps(self) -> list[np.ndarray]:
        return [blk.attn.last_attn for blk in self.blocks]

    def modality_attention(self, n_visual: int) -> dict[str, float]:
        """Mean attention mass that each modality's queries put on the other modality's keys.

        Averaged over batch, heads, queries and FE blocks. Only defined for the
        multi-modal variant.
        """
        if self.variant != "multimodal" or not self.blocks or self.blocks[0].attn.last_attn is None:
            return {}
        sem_to_vis, vis_to_sem = [], []
        for attn in self.attention_maps():
            sem_to_vis.append(attn[:, :, n_visual:, :n_visual].sum(axis=-1).mean())
            vis_to_sem.append(attn[:, :, :n_visual, n_visual:].sum(axis=-1).mean())
        return {"semantic_queries_on_visual": float(np.mean(sem_to_vis)),
                "visual_queries_on_semantic": float(np.mean(vis_to_sem))}


def modality_isolation_mask(n_visual: int, n_semantic: int) -> np.ndarray:
    """Debug mask: visual queries see only visual keys; semantic queries see everything."""
    n = n_visual + n_semantic
    allowed = np.ones((n, n), dtype=bool)
    allowed[:n_visual, n_visual:] = False
    return allowed


# -- masking -----------------------------------------------------------------------

@dataclass
class MaskEvent:
    position: int
    indices: np.ndarray
    applied: bool


def top_k_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    return np.argsort(-row, kind="stable")[:k]


def sample_visual_clue_mask(attn: np.ndarray, k: int, rng: np.random.Generator, true_lengths,
                            keep_prob: float = 0.1) -> tuple[np.ndarray, list[MaskEvent]]:
    """Row mask hiding the top-``k`` visual features of one random character per image."""
    attn = np.asarray(attn)
    B, T, N = attn.shape
    if not 1 <= k <= N:
        raise ConfigError(f"mask K={k} outside [1, {N}]")
    lengths = np.asarray(true_lengths).reshape(-1)
    row_mask = np.zeros((B, N), dtype=bool)
    events = []
    for b in range(B):
        L = int(min(lengths[b], T))
        if L < 1:
            raise UsageError("visual clue masking needs true_length >= 1")
        pos = int(rng.integers(0, L))
        idx = top_k_indices(attn[b, pos], k)
        applied = bool(rng.random() >= keep_prob)
        if applied:
            row_mask[b, idx] = True
        events.append(MaskEvent(pos, idx, applied))
    return row_mask, events


def visual_clue_mask(visual: Tensor, attn, k: int, rng: np.random.Generator, true_lengths,
                     token: Tensor, training: bool = True,
                     keep_prob: float = 0.1) -> tuple[Tensor, list[MaskEvent]]:
    """Replace the visual rows most attended by one random character with ``token``."""
    if not training:
        raise UsageError("visual clue masking is a training-only operation")
    attn_arr = attn.data if isinstance(attn, Tensor) else attn
    row_mask, events = sample_visual_clue_mask(attn_arr, k, rng, true_lengths, keep_prob)
    return F.replace_rows(visual, row_mask, token), events


def random_row_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"masking probability {p} outside [0, 1]")
    return rng.random(shape) < p


def random_feature_mask(features: Tensor, p: float, rng: np.random.Generator, token: Tensor,
                        training: bool = True) -> tuple[Tensor, np.ndarray]:
    """Each feature row is independently replaced by ``token`` with probability ``p``."""
    if not training:
        raise UsageError("random feature masking is a training-only operation")
    row_mask = random_row_mask(features.shape[:-1], p, rng)
    return F.replace_rows(features, row_mask, token), row_mask


# -- output fusion -----------------------------------------------------------------

def gated_fusion(visual_seq: Tensor, semantic_seq: Tensor, weight: Tensor) -> tuple[Tensor, Tensor]:
    """G = sigmoid([E; S] W); F = G * E + (1 - G) * S. Returns ``(F, G)``."""
    if visual_seq.shape != semantic_seq.shape:
        raise DimensionError(f"gated_fusion: {visual_seq.shape} vs {semantic_seq.shape}")
    d = visual_seq.shape[-1]
    if weight.shape != (2 * d, d):
        raise DimensionError(f"gated_fusion: weight {weight.shape}, expected {(2 * d, d)}")
    gate = F.sigmoid(F.matmul(F.concat([visual_seq, semantic_seq], axis=-1), weight))
    fused = gate * visual_seq + (1.0 - gate) * semantic_seq
    return fused, gate

"""The full recogniser and its iterative refinement loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .config import TrainConfig
from .data import NUM_CLASSES, PAD_INDEX
from .errors import ConfigError, UsageError
from .fusion import FeatureEnhancement, MaskEvent, gated_fusion, random_row_mask, \
    sample_visual_clue_mask, ses, sequential_pe
from .language_model import LanguageModel
from .nn import Linear, Module, trunc_normal
from .seed_decoder import SeedDecoder, greedy_decode
from .tensor import Parameter, Tensor
from .vision import VisionEncoder


@dataclass
class FeatureBundle:
    """Everything produced by one refinement iteration (all tensors batch-first)."""

    visual: Tensor          # V~ as fed to FE (masked in training)
    seed_seq: Tensor        # E^V
    lm_input: Tensor        # Y fed to the LM
    semantic: Tensor        # S
    semantic_aligned: Tensor  # S^Align
    visual_mm: Tensor       # V^M
    semantic_mm: Tensor     # S^M
    visual_mm_seq: Tensor   # E^{V^M}
    fused: Tensor           # F
    gate: Tensor            # G
    attn: Tensor            # A^{V-S}
    logits: dict[str, Tensor] = field(default_factory=dict)


HEADS = ("seed", "semantic", "semantic_mm", "visual_mm", "fused")


@dataclass
class ForwardResult:
    bundles: list[FeatureBundle]
    seed_logits: Tensor
    attn: Tensor
    mask_events: list[MaskEvent] = field(default_factory=list)

    @property
    def final_logits(self) -> Tensor:
        return self.bundles[-1].logits["fused"]


class MATRN(Module):
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        d, T, C, dt = cfg.d_model, cfg.max_len, NUM_CLASSES, cfg.dtype
        self.vision = VisionEncoder(cfg, rng)
        self.seed = SeedDecoder(d, T, C, cfg.unet_channels, rng, dtype=dt)
        self.lm = LanguageModel(d, T, C, cfg.heads, cfg.ffn, cfg.lm_blocks, self.seed.pos, rng,
                                diag_mask=cfg.lm_diag_mask, dtype=dt)
        self.semantic_head = Linear(d, C, rng, dtype=dt)
        self.fe = FeatureEnhancement(cfg.fe_variant, d, cfg.heads, cfg.ffn, cfg.blocks, rng,
                                     modality_embedding=cfg.modality_embedding, dtype=dt)
        if cfg.fe_variant != "none":
            shared = self.seed.pos if cfg.share_chargen_pos else None
            self.chargen = SeedDecoder(d, T, C, cfg.unet_channels, rng, pos=shared, dtype=dt)
        else:
            self.chargen = None
        self.semantic_mm_head = Linear(d, C, rng, dtype=dt)
        bound = math.sqrt(6.0 / (3 * d))
        self.gate_weight = Parameter(rng.uniform(-bound, bound, size=(2 * d, d)).astype(dt))
        self.fused_head = Linear(d, C, rng, dtype=dt)
        self.visual_mask_token = (Parameter(trunc_normal(rng, (d,), 0.02, dt))
                                  if cfg.mask_mode in ("visual_random", "visual_clue") else None)
        self.semantic_mask_token = (Parameter(trunc_normal(rng, (d,), 0.02, dt))
                                    if cfg.mask_mode == "semantic" else None)
        self._pos_flat = Tensor(self.vision.position_embedding.flat.astype(dt))
        self._mask_rng = np.random.default_rng([cfg.seed, 99])
        self.mask_calls = 0

    def reseed_masks(self, seed) -> None:
        self._mask_rng = np.random.default_rng(seed)

    def _align(self, semantic: Tensor, attn: Tensor) -> Tensor:
        mode = self.cfg.ses_mode
        if mode == "ses":
            return ses(semantic, attn, self._pos_flat)
        if mode == "sequential_pe":
            return sequential_pe(semantic)
        return semantic

    def forward(self, images, lengths=None, iterations: int | None = None) -> ForwardResult:
        """Run the vision side once, then ``M`` LM/FE/fusion refinement rounds.

        ``lengths`` (true label lengths) is needed for visual-clue masking in
        training mode. Masks are drawn once and shared by all rounds.
        """
        cfg = self.cfg
        M = cfg.iterations if iterations is None else iterations
        if M < 1:
            raise ConfigError(f"iterations must be >= 1, got {M}")
        h, w = cfg.feat_h, cfg.feat_w
        visual = self.vision(images)
        seed_seq, seed_logits, attn = self.seed(visual, h, w)
        B = visual.shape[0]

        events: list[MaskEvent] = []
        fe_visual = visual
        sem_rows = None
        if self.training and cfg.mask_mode != "none":
            if cfg.mask_mode == "visual_clue":
                if lengths is None:
                    raise UsageError("visual clue masking needs label lengths")
                self.mask_calls += 1
                rows, events = sample_visual_clue_mask(attn.data, cfg.effective_k, self._mask_rng,
                                                       lengths, cfg.keep_prob)
                fe_visual = F.replace_rows(visual, rows, self.visual_mask_token)
            elif cfg.mask_mode == "visual_random":
                rows = random_row_mask((B, visual.shape[1]), cfg.random_mask_p, self._mask_rng)
                fe_visual = F.replace_rows(visual, rows, self.visual_mask_token)
            else:
                sem_rows = random_row_mask((B, cfg.max_len), cfg.random_mask_p, self._mask_rng)

        lm_input = F.softmax(seed_logits.detach(), axis=-1)
        bundles = []
        for _ in range(M):
            semantic = self.lm(lm_input)
            aligned = self._align(semantic, attn)
            if sem_rows is not None:
                aligned = F.replace_rows(aligned, sem_rows, self.semantic_mask_token)
            visual_mm, semantic_mm = self.fe(fe_visual, aligned)
            if self.chargen is not None:
                visual_mm_seq, vm_logits, _ = self.chargen(visual_mm, h, w)
            else:
                visual_mm_seq, vm_logits = seed_seq, seed_logits
            fused, gate = gated_fusion(visual_mm_seq, semantic_mm, self.gate_weight)
            fused_logits = self.fused_head(fused)
            bundles.append(FeatureBundle(
                visual=fe_visual, seed_seq=seed_seq, lm_input=lm_input, semantic=semantic,
                semantic_aligned=aligned, visual_mm=visual_mm, semantic_mm=semantic_mm,
                visual_mm_seq=visual_mm_seq, fused=fused, gate=gate, attn=attn,
                logits={"seed": seed_logits, "semantic": self.semantic_head(semantic),
                        "semantic_mm": self.semantic_mm_head(semantic_mm),
                        "visual_mm": vm_logits, "fused": fused_logits},
            ))
            lm_input = F.softmax(fused_logits.detach(), axis=-1)
        return ForwardResult(bundles, seed_logits, attn, events)

    forward_iterations = forward

    def predict(self, images) -> list[str]:
        from .data import decode
        from .tensor import no_grad

        was = self.training
        self.eval()
        try:
            with no_grad():
                logits = self.forward(images).final_logits
        finally:
            self.train(was)
        return [decode(seq + [PAD_INDEX]) for seq in greedy_decode(logits, PAD_INDEX)]


def loss_terms(bundles: list[FeatureBundle], targets: np.ndarray) -> list[tuple[str, Tensor]]:
    """``1 + 4M`` cross-entropy terms: the seed head, then four heads per iteration."""
    if not bundles:
        raise UsageError("no iterations to score")
    terms = []
    for key in HEADS:
        if key not in bundles[0].logits:
            raise UsageError(f"missing logits for head {key!r}")
    terms.append(("seed", F.cross_entropy(bundles[0].logits["seed"], targets)))
    for i, b in enumerate(bundles, start=1):
        for key in HEADS[1:]:
            if key not in b.logits:
                raise UsageError(f"missing logits for head {key!r} at iteration {i}")
            terms.append((f"{key}_{i}", F.cross_entropy(b.logits[key], targets)))
    return terms


def combine_terms(terms: list[tuple[str, Tensor]], iterations: int) -> Tensor:
    """L = L_seed + (1/M) * sum over iterations of the four per-iteration terms."""
    total = terms[0][1]
    rest = None
    for _, t in terms[1:]:
        rest = t if rest is None else rest + t
    return total + rest * (1.0 / iterations)


def total_loss(bundles: list[FeatureBundle], targets: np.ndarray) -> tuple[Tensor, list[tuple[str, Tensor]]]:
    terms = loss_terms(bundles, targets)
    return combine_terms(terms, len(bundles)), terms

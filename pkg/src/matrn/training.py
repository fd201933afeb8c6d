"""Training loop, evaluation, metrics records and standalone LM pretraining."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import functional as F
from .config import TrainConfig
from .data import CHARSET, NUM_CLASSES, PAD_INDEX, Dataset, augment_pixels, decode, encode_batch
from .errors import UsageError
from .language_model import LanguageModel, corrupt_word, one_hot
from .model import MATRN, total_loss
from .nn import Linear, Module, trunc_normal
from .optim import Adam, clip_grad_norm, step_decay_lr
from .seed_decoder import greedy_decode
from .tensor import Parameter, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    word_accuracy: float
    losses: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0
    parameter_count: int = 0
    head_accuracy: dict[str, float] = field(default_factory=dict)
    attention: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def word_accuracy(predictions, labels) -> float:
    """Exact full-string match, case-insensitive."""
    if len(labels) == 0:
        raise UsageError("word accuracy of an empty set")
    hits = sum(p.lower() == t.lower() for p, t in zip(predictions, labels))
    return hits / len(labels)


def decode_word(logits) -> str:
    """Greedy string for one ``T x C`` logit matrix."""
    seq = greedy_decode(np.asarray(logits.data if hasattr(logits, "data") else logits)[None], PAD_INDEX)[0]
    return decode(seq + [PAD_INDEX])


def _decode_all(logits: np.ndarray) -> list[str]:
    return [decode(seq + [PAD_INDEX]) for seq in greedy_decode(logits, PAD_INDEX)]


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(model: MATRN, images: np.ndarray, labels: list[str], batch_size: int = 64,
             epoch: int = -1, split: str = "val") -> MetricsRecord:
    """Word accuracy of the final fused head (plus every other head) without touching weights."""
    if len(labels) == 0:
        raise UsageError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    t0 = time.perf_counter()
    preds: dict[str, list[str]] = {}
    attn_stats: list[dict[str, float]] = []
    try:
        with no_grad():
            for idx in iterate_batches(len(labels), batch_size):
                res = model(images[idx])
                heads = {"seed": res.seed_logits, "fused": res.final_logits,
                         "semantic": res.bundles[-1].logits["semantic"],
                         "semantic_mm": res.bundles[-1].logits["semantic_mm"],
                         "visual_mm": res.bundles[-1].logits["visual_mm"]}
                for key, lg in heads.items():
                    preds.setdefault(key, []).extend(_decode_all(lg.data))
                stats = model.fe.modality_attention(model.cfg.num_visual)
                if stats:
                    attn_stats.append(stats)
    finally:
        model.train(was_training)
    head_acc = {k: word_accuracy(v, labels) for k, v in preds.items()}
    attention = {k: float(np.mean([s[k] for s in attn_stats])) for k in attn_stats[0]} if attn_stats else {}
    return MetricsRecord(epoch=epoch, split=split, word_accuracy=head_acc["fused"],
                         wall_clock=time.perf_counter() - t0, parameter_count=model.num_parameters(),
                         head_accuracy=head_acc, attention=attention)


def train_step(model: MATRN, opt: Adam, images: np.ndarray, labels: list[str]) -> dict[str, float]:
    targets, lengths = encode_batch(labels, model.cfg.max_len)
    opt.zero_grad()
    res = model(images, lengths)
    loss, terms = total_loss(res.bundles, targets)
    backward(loss)
    if model.cfg.grad_clip > 0:
        clip_grad_norm(opt.params, model.cfg.grad_clip)
    opt.step()
    out = {name: t.item() for name, t in terms}
    out["total"] = loss.item()
    return out


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    optimizer: Adam
    shuffle_rng: np.random.Generator
    augment_rng: np.random.Generator
    epoch: int = 0

    def extra(self, model: MATRN) -> dict:
        return {"epoch": self.epoch, "shuffle_rng": self.shuffle_rng.bit_generator.state,
                "augment_rng": self.augment_rng.bit_generator.state,
                "mask_rng": model._mask_rng.bit_generator.state, "mask_calls": model.mask_calls}


def new_train_state(model: MATRN) -> TrainState:
    cfg = model.cfg
    model.reseed_masks([cfg.seed, 2])
    return TrainState(Adam(model.parameters(), lr=cfg.lr), np.random.default_rng([cfg.seed, 1]),
                      np.random.default_rng([cfg.seed, 3]))


def restore_train_state(model: MATRN, extra: dict, optim_state: dict) -> TrainState:
    state = new_train_state(model)
    if optim_state:
        state.optimizer.load_state_dict(optim_state)
    if "shuffle_rng" in extra:
        state.shuffle_rng.bit_generator.state = extra["shuffle_rng"]
    if "augment_rng" in extra:
        state.augment_rng.bit_generator.state = extra["augment_rng"]
    if "mask_rng" in extra:
        model._mask_rng.bit_generator.state = extra["mask_rng"]
    model.mask_calls = int(extra.get("mask_calls", 0))
    state.epoch = int(extra.get("epoch", 0))
    return state


def fit(model: MATRN, dataset: Dataset, epochs: int | None = None,
        on_record: Callable[[MetricsRecord], None] | None = None,
        eval_every: int = 1, target_accuracy: float | None = None,
        state: TrainState | None = None,
        on_epoch_end: Callable[[TrainState], None] | None = None) -> list[MetricsRecord]:
    """Train until ``epochs`` total epochs (default ``cfg.epochs``) have run, evaluating on val.

    ``state`` continues an earlier run; otherwise a fresh one is seeded from
    ``cfg.seed``. Stops early once val word accuracy reaches
    ``target_accuracy`` if that is given.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    if state is None:
        state = new_train_state(model)
    opt = state.optimizer
    tr_images, tr_labels = dataset.split("train")
    va_images, va_labels = dataset.split("val")
    history: list[MetricsRecord] = []
    n_params = model.num_parameters()
    model.train()
    decay_epoch = cfg.lr_decay_epoch if cfg.lr_decay_epoch >= 0 else int(round(0.6 * epochs))
    while state.epoch < epochs:
        epoch = state.epoch
        opt.lr = step_decay_lr(cfg.lr, epoch, decay_epoch, cfg.lr_decay_factor)
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        steps = 0
        for idx in iterate_batches(len(tr_labels), cfg.batch_size, state.shuffle_rng):
            batch = tr_images[idx]
            if cfg.train_augment > 0:
                batch = np.stack([augment_pixels(img, state.augment_rng, cfg.train_augment) for img in batch])
            losses = train_step(model, opt, batch, [tr_labels[i] for i in idx])
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        state.epoch += 1
        rec = MetricsRecord(epoch=epoch, split="train", word_accuracy=float("nan"),
                            losses={k: v / max(steps, 1) for k, v in sums.items()},
                            wall_clock=time.perf_counter() - t0, parameter_count=n_params)
        history.append(rec)
        if on_record:
            on_record(rec)
        stop = False
        if len(va_labels) and ((epoch + 1) % eval_every == 0 or state.epoch == epochs):
            val = evaluate(model, va_images, va_labels, epoch=epoch)
            history.append(val)
            if on_record:
                on_record(val)
            log.info("epoch %d loss %.4f val acc %.4f", epoch, rec.losses.get("total", 0.0), val.word_accuracy)
            stop = target_accuracy is not None and val.word_accuracy >= target_accuracy
        if on_epoch_end:
            on_epoch_end(state)
        if stop:
            break
    return history


def jsonl_writer(stream: TextIO) -> Callable[[MetricsRecord], None]:
    def write(rec: MetricsRecord) -> None:
        stream.write(rec.to_json() + "\n")
        stream.flush()

    return write


def overfit_single_word(cfg: TrainConfig, word: str, steps: int = 200, batch: int = 8,
                        style_seed: int = 0) -> tuple[int | None, list[float]]:
    """Train on copies of one rendered word; return the first step whose seed head reads it correctly."""
    from .data import augment, render_word, resize

    model = MATRN(cfg)
    rng = np.random.default_rng(style_seed)
    imgs = np.stack([resize(augment(render_word(word, style_seed + i, cfg.channels), rng, 0.3).pixels,
                            cfg.img_h, cfg.img_w) for i in range(batch)])
    labels = [word] * batch
    opt = Adam(model.parameters(), lr=cfg.lr)
    losses = []
    for step in range(1, steps + 1):
        losses.append(train_step(model, opt, imgs, labels)["total"])
        if step % 10 == 0:
            model.eval()
            with no_grad():
                seed_logits = model(imgs).seed_logits.data
            model.train()
            if all(p == word for p in _decode_all(seed_logits)):
                return step, losses
    return None, losses


# -- standalone language-model pretraining ------------------------------------------

class LMCorrector(Module):
    """Language model plus a linear classifier: a spelling corrector over the charset.

    Like the recogniser's refinement loop, the corrector can run several
    passes, each one reading the softmax of the previous pass.
    """

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator, passes: int = 1):
        if passes < 1:
            raise UsageError(f"passes must be >= 1, got {passes}")
        d = cfg.d_model
        self.pos = Parameter(trunc_normal(rng, (cfg.max_len, d), 0.02, cfg.dtype))
        self.lm = LanguageModel(d, cfg.max_len, NUM_CLASSES, cfg.heads, cfg.ffn, cfg.lm_blocks,
                                self.pos, rng, diag_mask=cfg.lm_diag_mask, dtype=cfg.dtype)
        self.head = Linear(d, NUM_CLASSES, rng, dtype=cfg.dtype)
        self.max_len = cfg.max_len
        self.passes = passes

    def forward(self, probs):
        return self.head(self.lm(probs))

    def refine(self, probs, passes: int | None = None) -> list:
        """Logits of every pass; pass ``k+1`` reads the detached softmax of pass ``k``."""
        out = []
        for _ in range(self.passes if passes is None else passes):
            logits = self.forward(probs)
            out.append(logits)
            probs = F.softmax(logits.detach(), axis=-1)
        return out

    def correct(self, words: list[str], passes: int | None = None) -> list[str]:
        idx, _ = encode_batch(words, self.max_len)
        with no_grad():
            logits = self.refine(_as_probs(idx, self.pos.dtype), passes)[-1]
        return _decode_all(logits.data)


def _as_probs(idx: np.ndarray, dtype, smooth: float = 0.0):
    from .tensor import Tensor

    p = one_hot(idx, NUM_CLASSES, dtype=np.float64)
    if smooth:
        p = p * (1.0 - smooth) + smooth / NUM_CLASSES
    return Tensor(p.astype(dtype))


def pretrain_lm(cfg: TrainConfig, lexicon: list[str], steps: int = 3000, batch: int = 64,
                lr: float = 2e-3, corrupt_prob: float = 0.9, seed: int = 0,
                passes: int = 3) -> LMCorrector:
    """Train an :class:`LMCorrector` to map single-substitution corruptions back to lexicon words.

    With ``passes > 1`` every pass gets its own cross-entropy term and the
    terms are averaged.
    """
    rng = np.random.default_rng([seed, 5])
    model = LMCorrector(cfg, rng, passes=passes)
    opt = Adam(model.parameters(), lr=lr)
    vocab = set(lexicon)
    for step in range(steps):
        opt.lr = lr if step < int(0.7 * steps) else lr * 0.1
        words = [lexicon[i] for i in rng.integers(0, len(lexicon), size=batch)]
        noisy = [corrupt_word(w, rng, CHARSET.symbols, vocab) if rng.random() < corrupt_prob else w
                 for w in words]
        targets, _ = encode_batch(words, cfg.max_len)
        inputs, _ = encode_batch(noisy, cfg.max_len)
        opt.zero_grad()
        terms = [F.cross_entropy(lg, targets) for lg in model.refine(_as_probs(inputs, cfg.dtype, smooth=0.1))]
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        backward(loss * (1.0 / len(terms)))
        opt.step()
    return model


def lm_correction_rate(model: LMCorrector, lexicon: list[str], trials: int, seed: int) -> float:
    """Fraction of fresh single-character corruptions mapped back to the original word."""
    rng = np.random.default_rng([seed, 6])
    vocab = set(lexicon)
    words = [lexicon[i] for i in rng.integers(0, len(lexicon), size=trials)]
    noisy = [corrupt_word(w, rng, CHARSET.symbols, vocab) for w in words]
    return word_accuracy(model.correct(noisy), words)

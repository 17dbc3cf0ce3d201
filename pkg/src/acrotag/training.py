"""Augmented-loss training loop, positive-token masking, MLM pretraining.

The per-document objective is

    mean(L) + lambda_max * max(L) + lambda_mask * sum(L at masked positions)

where L holds the per-token gold-label losses.  Masked positions are
positive-label tokens replaced by [MASK] at ``mask_rate``, which keeps
the model from leaning on the surface form alone.  Batches average the
per-document losses; updates use decoupled weight decay with adaptive
moments, global-norm gradient clipping, and a linear warmup/decay
learning-rate schedule.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import Dataset, Document
from .model import (LossBreakdown, Model, ForwardTrace, gradients, mlm_loss,
                    predict_spans, tagger_param_keys, mlm_param_keys,
                    token_loss_vector)
from .scoring import Metrics, score
from .tagging import LabelSequence, O, spans_to_bio
from .tokenizer import MASK, TokenSequence, Tokenizer

log = logging.getLogger(__name__)

MAX_SEQ_LEN = 512
MLM_MASK_RATE = 0.15


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_max: float = 2.0
    lambda_mask: float = 1.0
    mask_rate: float = 0.1
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int | None = None  # None: 10% of total steps
    max_grad_norm: float = 1.0
    weight_decay: float = 0.01
    epochs: int = 20
    seed: int = 0
    freeze_char_emb: bool = False
    first_occurrence_only: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if self.lambda_max < 0 or self.lambda_mask < 0:
            raise ValueError("loss weights must be >= 0")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class PretrainConfig:
    mask_rate: float = MLM_MASK_RATE
    batch_size: int = 8
    learning_rate: float = 1e-2
    warmup_steps: int | None = None
    max_grad_norm: float = 1.0
    weight_decay: float = 0.01
    epochs: int = 6
    seed: int = 0


@dataclass
class Ablations:
    no_max_loss: bool = False
    no_mask_loss: bool = False
    no_char: bool = False      # applied when building the ModelConfig
    no_mlm_init: bool = False  # applied when deciding on init transfer


def token_losses(trace: ForwardTrace, labels: LabelSequence) -> np.ndarray:
    """Per-token gold-label losses (probabilities floored at 1e-12)."""
    return token_loss_vector(trace, labels)


def augmented_loss(losses: np.ndarray, masked_positions, cfg: TrainConfig) -> float:
    """mean + lambda_max * max + lambda_mask * masked-position sum."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return 0.0
    masked = sorted(masked_positions)
    if masked and not (0 <= masked[0] <= masked[-1] < losses.size):
        raise ValueError("masked position out of range")
    total = float(losses.mean()) + cfg.lambda_max * float(losses.max())
    if masked:
        total += cfg.lambda_mask * float(losses[masked].sum())
    return total


def mask_positives(ts: TokenSequence, labels: LabelSequence, rate: float,
                   rng: np.random.Generator, mask_id: int
                   ) -> tuple[TokenSequence, set[int]]:
    """Independently replace each positive-label token by [MASK] with
    probability ``rate``.  O tokens are never touched.  Masked tokens get
    the all-pad character row."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    tokens = list(ts.tokens)
    ids = list(ts.ids)
    char_rows = list(ts.char_rows)
    masked: set[int] = set()
    char_len = len(char_rows[0]) if char_rows else 0
    for i, label in enumerate(labels.labels):
        if label == O:
            continue
        if rate >= 1.0 or (rate > 0.0 and rng.random() < rate):
            tokens[i] = MASK
            ids[i] = mask_id
            char_rows[i] = [0] * char_len
            masked.add(i)
    return TokenSequence(tokens=tokens, ids=ids, offsets=ts.offsets,
                         char_rows=char_rows), masked


def learning_rate_at(step: int, total_steps: int, warmup_steps: int,
                     base_lr: float) -> float:
    """Linear rise over the warmup, then linear decay to zero.  ``step``
    is 1-based."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    return base_lr * max(0, total_steps - step) / (total_steps - warmup_steps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most
    ``max_norm``.  Returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class AdamW:
    """Adaptive-moment update with decoupled weight decay over a fixed
    subset of parameters."""

    def __init__(self, model: Model, trainable: list[str], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.trainable = [k for k in model.params if k in set(trainable)]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(model.params[k]) for k in self.trainable}
        self.v = {k: np.zeros_like(model.params[k]) for k in self.trainable}
        self.t = 0

    def step(self, model: Model, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in self.trainable:
            g = grads[key]
            p = model.params[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= lr * (update + self.weight_decay * p)


@dataclass
class EncodedDoc:
    doc: Document
    ts: TokenSequence
    labels: LabelSequence


def encode_dataset(ds: Dataset, tokenizer: Tokenizer,
                   first_occurrence_only: bool = False,
                   max_len: int = MAX_SEQ_LEN) -> list[EncodedDoc]:
    """Tokenize and label every document, truncating to ``max_len`` tokens."""
    out = []
    truncated = 0
    for doc in ds.documents:
        ts = tokenizer.encode(doc.text)
        if len(ts) > max_len:
            truncated += 1
            ts = TokenSequence(tokens=ts.tokens[:max_len], ids=ts.ids[:max_len],
                               offsets=ts.offsets[:max_len],
                               char_rows=ts.char_rows[:max_len])
        labels = spans_to_bio(doc, ts, tokenizer.vocab, first_occurrence_only)
        out.append(EncodedDoc(doc=doc, ts=ts, labels=labels))
    if truncated:
        log.warning("truncated %d document(s) to %d tokens", truncated, max_len)
    return out


def evaluate(model: Model, encoded: list[EncodedDoc], golds: Dataset) -> Metrics:
    preds = {e.doc.id: predict_spans(model, e.ts) for e in encoded}
    return score(preds, golds)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_ce: float
    dev: Metrics


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_f1: float
    best_epoch: int
    wall_seconds: float


def _batches(n: int, batch_size: int, order: np.ndarray):
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _accumulate(total: dict[str, np.ndarray] | None, grads: dict[str, np.ndarray]):
    if total is None:
        return grads
    for k, g in grads.items():
        total[k] += g
    return total


def train(model: Model, train_ds: Dataset, dev_ds: Dataset, tokenizer: Tokenizer,
          cfg: TrainConfig, ablations: Ablations | None = None,
          target_f1: float | None = None) -> TrainResult:
    """Train the tagger, keeping the best-dev-F1 checkpoint.

    Ablation flags zero the max/mask loss weights (the char pathway and
    MLM-init ablations are applied by the caller when constructing the
    model).  ``target_f1`` stops after the first epoch whose best dev F1
    reaches it.
    """
    cfg.validate()
    if len(train_ds) == 0:
        raise TrainingError("empty training set")
    ablations = ablations or Ablations()
    lam_max = 0.0 if ablations.no_max_loss else cfg.lambda_max
    lam_mask = 0.0 if ablations.no_mask_loss else cfg.lambda_mask
    eff_cfg = replace(cfg, lambda_max=lam_max, lambda_mask=lam_mask)

    rng = np.random.default_rng(cfg.seed)
    encoded = encode_dataset(train_ds, tokenizer, cfg.first_occurrence_only)
    dev_encoded = encode_dataset(dev_ds, tokenizer, cfg.first_occurrence_only)
    n = len(encoded)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = (cfg.warmup_steps if cfg.warmup_steps is not None
              else max(1, total_steps // 10))

    trainable = tagger_param_keys(model.config)
    if cfg.freeze_char_emb:
        trainable = [k for k in trainable if k != "char_emb"]
    opt = AdamW(model, trainable, weight_decay=cfg.weight_decay)
    mask_id = tokenizer.vocab.mask_id

    history: list[EpochRecord] = []
    best_f1, best_epoch = -1.0, 0
    best_model = model.copy()
    step = 0
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum = ce_sum = 0.0
        for batch in _batches(n, cfg.batch_size, order):
            step += 1
            batch_grads = None
            for doc_idx in batch:
                e = encoded[doc_idx]
                masked_ts, masked = mask_positives(e.ts, e.labels, eff_cfg.mask_rate,
                                                   rng, mask_id)
                breakdown, grads = gradients(model, masked_ts, e.labels, masked,
                                             lam_max, lam_mask)
                if not math.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss {breakdown.total} at epoch {epoch} "
                        f"step {step} doc {e.doc.id!r}")
                loss_sum += breakdown.total
                ce_sum += breakdown.cross_entropy
                batch_grads = _accumulate(batch_grads, grads)
            inv = 1.0 / len(batch)
            for g in batch_grads.values():
                g *= inv
            clip_global_norm(batch_grads, cfg.max_grad_norm)
            opt.step(model, batch_grads,
                     learning_rate_at(step, total_steps, warmup, cfg.learning_rate))
        dev_metrics = evaluate(model, dev_encoded, dev_ds)
        record = EpochRecord(epoch=epoch, train_loss=loss_sum / n,
                             train_ce=ce_sum / n, dev=dev_metrics)
        history.append(record)
        f1 = dev_metrics.combined.f1
        if f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            best_model = model.copy()
        log.info("epoch %d: loss %.4f ce %.4f dev F1 %.4f", epoch,
                 record.train_loss, record.train_ce, f1)
        if target_f1 is not None and best_f1 >= target_f1:
            break
    return TrainResult(model=best_model, history=history, best_f1=best_f1,
                       best_epoch=best_epoch,
                       wall_seconds=time.perf_counter() - started)


def mask_for_mlm(ts: TokenSequence, rate: float, rng: np.random.Generator,
                 tokenizer: Tokenizer) -> tuple[TokenSequence, list[int], list[int]]:
    """Select ~``rate`` of the positions for the MLM objective: of those,
    80% become [MASK], 10% a random non-special piece, 10% stay unchanged.
    At least one position is always selected."""
    k = len(ts)
    if k == 0:
        raise ValueError("cannot mask an empty sequence")
    vocab = tokenizer.vocab
    specials = {vocab.pad_id, vocab.unk_id, vocab.mask_id}
    regular = [i for i in range(len(vocab)) if i not in specials]
    selected = [i for i in range(k) if rng.random() < rate]
    if not selected:
        selected = [int(rng.integers(k))]
    ids = list(ts.ids)
    targets = [ids[i] for i in selected]
    for i in selected:
        u = rng.random()
        if u < 0.8:
            ids[i] = vocab.mask_id
        elif u < 0.9 and regular:
            ids[i] = regular[int(rng.integers(len(regular)))]
    masked_ts = TokenSequence(tokens=ts.tokens, ids=ids, offsets=ts.offsets,
                              char_rows=ts.char_rows)
    return masked_ts, selected, targets


def pretrain_mlm(model: Model, texts: list[str], tokenizer: Tokenizer,
                 cfg: PretrainConfig) -> list[float]:
    """Masked-token pretraining over raw sentences; updates the token
    embeddings, the context encoder and the MLM head in place.  Returns
    the mean per-epoch loss, index 0 being an untrained baseline pass."""
    sequences = [ts for ts in (tokenizer.encode(t) for t in texts) if len(ts)]
    if not sequences:
        raise TrainingError("no non-empty sentences to pretrain on")
    for i, ts in enumerate(sequences):
        if len(ts) > MAX_SEQ_LEN:
            sequences[i] = TokenSequence(tokens=ts.tokens[:MAX_SEQ_LEN],
                                         ids=ts.ids[:MAX_SEQ_LEN],
                                         offsets=ts.offsets[:MAX_SEQ_LEN],
                                         char_rows=ts.char_rows[:MAX_SEQ_LEN])
    rng = np.random.default_rng(cfg.seed)
    n = len(sequences)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = (cfg.warmup_steps if cfg.warmup_steps is not None
              else max(1, total_steps // 10))
    opt = AdamW(model, mlm_param_keys(model.config),
                weight_decay=cfg.weight_decay)

    # untrained baseline loss over the whole corpus, fixed masking
    probe_rng = np.random.default_rng(cfg.seed + 1)
    history = [_mlm_epoch_loss(model, sequences, tokenizer, cfg, probe_rng)]
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for batch in _batches(n, cfg.batch_size, order):
            step += 1
            batch_grads = None
            batch_loss = 0.0
            for idx in batch:
                masked_ts, positions, targets = mask_for_mlm(
                    sequences[idx], cfg.mask_rate, rng, tokenizer)
                loss, grads = mlm_loss(model, masked_ts, positions, targets)
                if not math.isfinite(loss):
                    raise TrainingError(f"non-finite MLM loss at step {step}")
                batch_loss += loss
                batch_grads = _accumulate(batch_grads, grads)
            inv = 1.0 / len(batch)
            for g in batch_grads.values():
                g *= inv
            clip_global_norm(batch_grads, cfg.max_grad_norm)
            opt.step(model, batch_grads,
                     learning_rate_at(step, total_steps, warmup, cfg.learning_rate))
            loss_sum += batch_loss
        history.append(loss_sum / n)
    return history


def _mlm_epoch_loss(model: Model, sequences, tokenizer: Tokenizer,
                    cfg: PretrainConfig, rng: np.random.Generator) -> float:
    total = 0.0
    for ts in sequences:
        masked_ts, positions, targets = mask_for_mlm(ts, cfg.mask_rate, rng,
                                                     tokenizer)
        loss, _ = mlm_loss(model, masked_ts, positions, targets)
        total += loss
    return total / len(sequences)

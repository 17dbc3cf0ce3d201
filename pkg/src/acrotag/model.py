"""Char-aware token tagger: forward pass, analytic gradients, checkpoints.

Per token the network concatenates two views:

  * a contextual vector from a stack of window-mixing layers over the
    token embeddings, ``tanh(W_l x_prev + W_s x_self + W_r x_next + b)``
    with zero vectors at the sequence boundaries;
  * a character feature vector: one convolution filter bank over the
    token's character embeddings, max-pooled over positions.

The concatenation feeds a linear+softmax classifier over the 5 BIO
labels.  A separate linear head over the contextual vector gives
subword-vocabulary logits for masked-token pretraining.

All gradients are exact and hand-derived; everything is float64 unless
the model is explicitly converted.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tagging import LabelSequence, N_LABELS, bio_to_spans
from .tokenizer import CharVocab, SubwordVocab, TokenSequence, Tokenizer

PROB_FLOOR = 1e-12


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    subword_vocab_size: int
    char_vocab_size: int
    d_tok: int = 64
    d_char: int = 16
    n_filters: int = 64
    filter_size: int = 4
    char_len: int = 16
    encoder_layers: int = 2
    n_labels: int = N_LABELS
    seed: int = 0

    def validate(self) -> None:
        positive = {
            "subword_vocab_size": self.subword_vocab_size,
            "char_vocab_size": self.char_vocab_size,
            "d_tok": self.d_tok,
            "d_char": self.d_char,
            "filter_size": self.filter_size,
            "char_len": self.char_len,
            "encoder_layers": self.encoder_layers,
            "n_labels": self.n_labels,
        }
        for name, value in positive.items():
            if value < 1:
                raise ModelError(f"{name} must be >= 1, got {value}")
        if self.n_filters < 0:
            raise ModelError(f"n_filters must be >= 0, got {self.n_filters}")
        if self.filter_size > self.char_len:
            raise ModelError(
                f"filter_size {self.filter_size} exceeds char_len {self.char_len}")

    @property
    def conv_positions(self) -> int:
        return self.char_len - self.filter_size + 1

    @property
    def h_width(self) -> int:
        return self.d_tok + self.n_filters


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.config,
                     {k: v.astype(dtype) for k, v in self.params.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class ForwardTrace:
    context: np.ndarray    # (k, d_tok) contextual token vectors
    char_feats: np.ndarray  # (k, n_filters) max-pooled char features
    combined: np.ndarray   # (k, d_tok + n_filters)
    probs: np.ndarray      # (k, n_labels) label distributions
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.probs.shape[0]


def encoder_param_keys(encoder_layers: int) -> list[str]:
    keys = ["tok_emb"]
    for l in range(encoder_layers):
        keys += [f"enc{l}_wl", f"enc{l}_ws", f"enc{l}_wr", f"enc{l}_b"]
    return keys


def mlm_param_keys(cfg: ModelConfig) -> list[str]:
    """Parameters touched by masked-token pretraining."""
    return encoder_param_keys(cfg.encoder_layers) + ["mlm_w", "mlm_b"]


def tagger_param_keys(cfg: ModelConfig) -> list[str]:
    """Parameters on the tagging path (everything but the MLM head)."""
    return (encoder_param_keys(cfg.encoder_layers)
            + ["char_emb", "cnn_w", "cnn_b", "cls_w", "cls_b"])


def init_model(cfg: ModelConfig) -> Model:
    """Seeded scaled-uniform initialization; biases start at zero."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)

    def uniform(shape, limit):
        return rng.uniform(-limit, limit, size=shape)

    def glorot(shape, fan_in, fan_out):
        return uniform(shape, np.sqrt(6.0 / (fan_in + fan_out)))

    d, dc, nf, fs = cfg.d_tok, cfg.d_char, cfg.n_filters, cfg.filter_size
    params: dict[str, np.ndarray] = {}
    params["tok_emb"] = uniform((cfg.subword_vocab_size, d), 0.5)
    params["char_emb"] = uniform((cfg.char_vocab_size, dc), 0.5)
    params["cnn_w"] = glorot((nf, fs, dc), fs * dc, max(nf, 1))
    params["cnn_b"] = np.zeros(nf)
    for l in range(cfg.encoder_layers):
        for side in ("wl", "ws", "wr"):
            params[f"enc{l}_{side}"] = glorot((d, d), d, d)
        params[f"enc{l}_b"] = np.zeros(d)
    params["cls_w"] = glorot((cfg.n_labels, cfg.h_width), cfg.h_width, cfg.n_labels)
    params["cls_b"] = np.zeros(cfg.n_labels)
    params["mlm_w"] = glorot((cfg.subword_vocab_size, d), d, cfg.subword_vocab_size)
    params["mlm_b"] = np.zeros(cfg.subword_vocab_size)
    return Model(config=cfg, params=params)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _shift_down(mat: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mat)
    out[1:] = mat[:-1]
    return out


def _shift_up(mat: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mat)
    out[:-1] = mat[1:]
    return out


def _encode_context(model: Model, ids: np.ndarray) -> list[np.ndarray]:
    """Run the window-mixing stack; returns [input, layer1, ..., layerN]."""
    p = model.params
    states = [p["tok_emb"][ids]]
    for l in range(model.config.encoder_layers):
        s = states[-1]
        z = (_shift_down(s) @ p[f"enc{l}_wl"].T
             + s @ p[f"enc{l}_ws"].T
             + _shift_up(s) @ p[f"enc{l}_wr"].T
             + p[f"enc{l}_b"])
        states.append(np.tanh(z))
    return states


def _char_windows(model: Model, char_rows: np.ndarray):
    """Character embeddings and their sliding windows for a batch of rows."""
    cfg = model.config
    embedded = model.params["char_emb"][char_rows]  # (k, char_len, d_char)
    windows = np.lib.stride_tricks.sliding_window_view(
        embedded, cfg.filter_size, axis=1)          # (k, P, d_char, fs)
    return embedded, np.ascontiguousarray(np.swapaxes(windows, 2, 3))  # (k, P, fs, d_char)


def _char_features(model: Model, char_rows: np.ndarray):
    """(features, argmax positions, windows) for the filter bank."""
    cfg = model.config
    k = char_rows.shape[0]
    if cfg.n_filters == 0 or k == 0:
        dt = model.params["tok_emb"].dtype
        return (np.zeros((k, cfg.n_filters), dtype=dt),
                np.zeros((k, cfg.n_filters), dtype=np.intp), None)
    _, windows = _char_windows(model, char_rows)
    conv = np.einsum("kpoc,foc->kpf", windows, model.params["cnn_w"])
    conv += model.params["cnn_b"]
    amax = conv.argmax(axis=1)                      # (k, n_filters)
    feats = np.take_along_axis(conv, amax[:, None, :], axis=1)[:, 0, :]
    return feats, amax, windows


def char_feature(char_row, model: Model) -> np.ndarray:
    """Max-pooled filter responses for a single character-id row."""
    row = np.asarray(char_row, dtype=np.intp)
    if row.shape != (model.config.char_len,):
        raise ModelError(
            f"char row length {row.shape} != char_len {model.config.char_len}")
    feats, _, _ = _char_features(model, row[None, :])
    return feats[0]


def _as_arrays(ts: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ts.ids, dtype=np.intp)
    char_rows = np.asarray(ts.char_rows, dtype=np.intp)
    if char_rows.size == 0:
        char_rows = char_rows.reshape(0, 0)
    return ids, char_rows


def forward(ts: TokenSequence, model: Model) -> ForwardTrace:
    """Label distributions for every token of ``ts``."""
    cfg = model.config
    ids, char_rows = _as_arrays(ts)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.subword_vocab_size):
        raise ModelError("token id out of vocabulary range")
    if char_rows.size and char_rows.shape[1] != cfg.char_len:
        raise ModelError(
            f"char rows of width {char_rows.shape[1]}, expected {cfg.char_len}")
    states = _encode_context(model, ids)
    context = states[-1]
    char_feats, amax, windows = _char_features(model, char_rows)
    combined = np.hstack([context, char_feats])
    logits = combined @ model.params["cls_w"].T + model.params["cls_b"]
    probs = softmax_rows(logits) if len(ids) else logits.reshape(0, cfg.n_labels)
    return ForwardTrace(
        context=context, char_feats=char_feats, combined=combined, probs=probs,
        cache={"ids": ids, "char_rows": char_rows, "states": states,
               "amax": amax, "windows": windows})


@dataclass
class LossBreakdown:
    total: float
    cross_entropy: float
    max_term: float    # unweighted max of the per-token losses
    mask_term: float   # unweighted sum of losses at masked positions


def _backprop_encoder(model: Model, states: list[np.ndarray], ids: np.ndarray,
                      d_context: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Push a gradient at the top contextual vectors down to the token
    embeddings, accumulating layer gradients on the way."""
    p = model.params
    ds = d_context
    for l in range(model.config.encoder_layers - 1, -1, -1):
        s_in, s_out = states[l], states[l + 1]
        dz = ds * (1.0 - s_out * s_out)
        grads[f"enc{l}_wl"] += dz.T @ _shift_down(s_in)
        grads[f"enc{l}_ws"] += dz.T @ s_in
        grads[f"enc{l}_wr"] += dz.T @ _shift_up(s_in)
        grads[f"enc{l}_b"] += dz.sum(axis=0)
        ds = dz @ p[f"enc{l}_ws"]
        ds[:-1] += (dz @ p[f"enc{l}_wl"])[1:]
        ds[1:] += (dz @ p[f"enc{l}_wr"])[:-1]
    np.add.at(grads["tok_emb"], ids, ds)


def _backprop_from_combined(model: Model, trace: ForwardTrace,
                            d_combined: np.ndarray,
                            grads: dict[str, np.ndarray]) -> None:
    cfg = model.config
    cache = trace.cache
    d = cfg.d_tok
    d_context, d_char = d_combined[:, :d], d_combined[:, d:]

    if cfg.n_filters > 0 and len(trace):
        windows = cache["windows"]                 # (k, P, fs, d_char)
        amax = cache["amax"]                       # (k, n_filters)
        k = windows.shape[0]
        rows = np.arange(k)[:, None]
        win_at = windows[rows, amax]               # (k, n_filters, fs, d_char)
        grads["cnn_w"] += np.einsum("kf,kfoc->foc", d_char, win_at)
        grads["cnn_b"] += d_char.sum(axis=0)
        d_embedded = np.zeros((k, cfg.char_len, cfg.d_char),
                              dtype=d_combined.dtype)
        w = model.params["cnn_w"]
        for o in range(cfg.filter_size):
            np.add.at(d_embedded, (rows, amax + o),
                      d_char[:, :, None] * w[None, :, o, :])
        np.add.at(grads["char_emb"], cache["char_rows"].reshape(-1),
                  d_embedded.reshape(-1, cfg.d_char))

    _backprop_encoder(model, cache["states"], cache["ids"], d_context, grads)


def token_loss_vector(trace: ForwardTrace, labels: LabelSequence) -> np.ndarray:
    """Per-token negative log probability of the gold label."""
    if len(trace) != len(labels):
        raise ModelError(f"{len(trace)} probability rows for {len(labels)} labels")
    if len(labels) == 0:
        return np.zeros(0)
    gold = np.asarray(labels.labels, dtype=np.intp)
    picked = trace.probs[np.arange(len(gold)), gold]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def gradients(model: Model, ts: TokenSequence, labels: LabelSequence,
              mask_positions, lambda_max: float, lambda_mask: float
              ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Augmented loss and its exact gradient for one document.

    The loss is mean(L) + lambda_max * max(L) + lambda_mask * sum of L at
    ``mask_positions``, with L the per-token gold-label losses.
    """
    grads = model.zero_grads()
    k = len(ts)
    if k == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0), grads
    mask_positions = sorted(mask_positions)
    if mask_positions and not (0 <= mask_positions[0] <= mask_positions[-1] < k):
        raise ModelError("mask position out of range")

    trace = forward(ts, model)
    losses = token_loss_vector(trace, labels)
    ce = float(losses.mean())
    max_idx = int(losses.argmax())
    max_term = float(losses[max_idx])
    mask_term = float(losses[mask_positions].sum()) if mask_positions else 0.0
    total = ce + lambda_max * max_term + lambda_mask * mask_term

    # d(total)/dL_i, then the softmax+NLL shortcut per token
    weights = np.full(k, 1.0 / k)
    weights[max_idx] += lambda_max
    if mask_positions:
        weights[mask_positions] += lambda_mask
    gold = np.asarray(labels.labels, dtype=np.intp)
    picked = trace.probs[np.arange(k), gold]
    weights[picked < PROB_FLOOR] = 0.0  # loss is clamped there, flat in params
    d_logits = trace.probs * weights[:, None]
    d_logits[np.arange(k), gold] -= weights

    grads["cls_w"] += d_logits.T @ trace.combined
    grads["cls_b"] += d_logits.sum(axis=0)
    d_combined = d_logits @ model.params["cls_w"]
    _backprop_from_combined(model, trace, d_combined, grads)
    return LossBreakdown(total, ce, max_term, mask_term), grads


def mlm_loss(model: Model, ts: TokenSequence, mask_positions, targets
             ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy of the vocabulary head at masked positions only,
    with gradients for the encoder path and MLM head."""
    positions = np.asarray(sorted(mask_positions), dtype=np.intp)
    targets = np.asarray(targets, dtype=np.intp)
    if positions.size == 0:
        raise ModelError("mlm_loss requires at least one masked position")
    if positions.size != targets.size:
        raise ModelError("mask positions and targets differ in length")
    k = len(ts)
    if positions[0] < 0 or positions[-1] >= k:
        raise ModelError("mask position out of range")

    ids, _ = _as_arrays(ts)
    p = model.params
    states = _encode_context(model, ids)
    picked_states = states[-1][positions]              # (m, d_tok)
    logits = picked_states @ p["mlm_w"].T + p["mlm_b"]
    probs = softmax_rows(logits)
    m = positions.size
    gold_probs = probs[np.arange(m), targets]
    loss = float(-np.log(np.maximum(gold_probs, PROB_FLOOR)).mean())

    grads = model.zero_grads()
    d_logits = probs / m
    d_logits[np.arange(m), targets] -= 1.0 / m
    d_logits[gold_probs < PROB_FLOOR] = 0.0
    grads["mlm_w"] += d_logits.T @ picked_states
    grads["mlm_b"] += d_logits.sum(axis=0)
    d_context = np.zeros_like(states[-1])
    d_context[positions] = d_logits @ p["mlm_w"]
    _backprop_encoder(model, states, ids, d_context, grads)
    return loss, grads


def predict_labels(model: Model, ts: TokenSequence) -> LabelSequence:
    trace = forward(ts, model)
    if len(trace) == 0:
        return LabelSequence([])
    return LabelSequence(trace.probs.argmax(axis=1).tolist())


def predict_spans(model: Model, ts: TokenSequence):
    """(acronym spans, long-form spans) for one tokenized document."""
    return bio_to_spans(predict_labels(model, ts), ts)


def save_checkpoint(model: Model, tokenizer: Tokenizer, path) -> None:
    """Self-contained checkpoint: config, parameters, both vocabularies."""
    arrays = {
        "config_json": np.array(json.dumps(asdict(model.config))),
        "char_len": np.array(tokenizer.char_len),
        "vocab_pieces": np.array(tokenizer.vocab.id_to_piece),
        "char_vocab": np.array(tokenizer.char_vocab.id_to_char[2:]
                               if len(tokenizer.char_vocab) > 2 else [],
                               dtype="<U1"),
    }
    for key, value in model.params.items():
        arrays[f"param_{key}"] = value
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    with open(path, "wb") as fh:
        fh.write(buffer.getvalue())


def load_checkpoint(path) -> tuple[Model, Tokenizer]:
    with np.load(path, allow_pickle=False) as data:
        cfg = ModelConfig(**json.loads(str(data["config_json"])))
        params = {key[len("param_"):]: data[key]
                  for key in data.files if key.startswith("param_")}
        pieces = [str(p) for p in data["vocab_pieces"]]
        chars = [str(c) for c in data["char_vocab"]]
        char_len = int(data["char_len"])
    vocab_pieces = {p: i for i, p in enumerate(pieces)}
    vocab = SubwordVocab(pieces=vocab_pieces, id_to_piece=pieces)
    char_vocab = CharVocab(char_to_id={c: i + 2 for i, c in enumerate(chars)},
                           id_to_char=["<pad>", "<unk>"] + chars)
    model = Model(config=cfg, params=params)
    return model, Tokenizer(vocab=vocab, char_vocab=char_vocab, char_len=char_len)


def transfer_pretrained(model: Model, source: Model) -> int:
    """Copy encoder-path and MLM-head parameters from a pretraining
    checkpoint into ``model`` where names and shapes match.  Returns the
    number of tensors copied."""
    copied = 0
    wanted = set(mlm_param_keys(model.config))
    for key in wanted:
        src = source.params.get(key)
        if src is not None and src.shape == model.params[key].shape:
            model.params[key] = src.copy()
            copied += 1
    if copied == 0:
        raise ModelError("pretrained checkpoint shares no compatible tensors")
    return copied

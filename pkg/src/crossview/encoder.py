"""CNN-BiLSTM sentence encoder with one primary and four restricted-view heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import EncoderConfig
from .corpus import PAD_ID, Batch
from .ndiff import Parameter, Tensor, ops

VIEWS = ("full", "fwd", "bwd", "future", "past")
AUX_VIEWS = ("fwd", "bwd", "future", "past")
MODES = ("train", "eval")


class ViewError(ValueError):
    pass


@dataclass
class EncoderStates:
    h1_fwd: Tensor  # [B, T, P]
    h1_bwd: Tensor  # [B, T, P]
    h2: Tensor      # [B, T, 2P]
    mask: np.ndarray


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Tagger:
    """Parameter container; the math lives in the module-level functions."""

    def __init__(self, config: EncoderConfig, params: dict):
        self.config = config
        self.params = params

    def __getitem__(self, key) -> Parameter:
        return self.params[key]

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    @property
    def dtype(self):
        return self.params["emb.word"].dtype

    @property
    def n_words(self) -> int:
        return self.params["emb.word"].shape[0]

    @property
    def n_chars(self) -> int:
        return self.params["emb.char"].shape[0]

    @classmethod
    def create(cls, config: EncoderConfig, n_words: int, n_chars: int, n_tags: int,
               seed: int = 0, dtype="float32", word_vectors: Optional[np.ndarray] = None) -> "Tagger":
        config.validate()
        config.num_tags = n_tags
        rng = np.random.default_rng(seed)
        dt = np.dtype(dtype)
        c = config
        P = c.projection_size
        p = {}

        def add(name, value, trainable=True):
            p[name] = Parameter(name, np.asarray(value, dtype=dt), trainable=trainable)

        if word_vectors is None:
            word_vectors = _glorot(rng, (n_words, c.word_dim), n_words, c.word_dim, dt)
            word_vectors[PAD_ID] = 0
        if word_vectors.shape != (n_words, c.word_dim):
            raise ValueError(f"word vectors have shape {word_vectors.shape}, expected {(n_words, c.word_dim)}")
        add("emb.word", word_vectors, trainable=c.train_embeddings)
        add("emb.char", _glorot(rng, (n_chars, c.char_emb_dim), n_chars, c.char_emb_dim, dt))
        for k in c.char_filter_widths:
            add(f"char_cnn.w{k}.W", _glorot(rng, (k, c.char_emb_dim, c.char_filters),
                                             k * c.char_emb_dim, c.char_filters, dt))
            add(f"char_cnn.w{k}.b", np.zeros(c.char_filters))

        def lstm(prefix, d_in, size):
            add(f"{prefix}.W", _glorot(rng, (d_in + P, 4 * size), d_in + P, 4 * size, dt))
            bias = np.zeros(4 * size)
            bias[size:2 * size] = 1.0  # forget gate
            add(f"{prefix}.b", bias)
            if size != P:
                add(f"{prefix}.proj", _glorot(rng, (size, P), size, P, dt))

        for d in ("fwd", "bwd"):
            lstm(f"enc.l1.{d}", c.token_dim, c.lstm1_size)
        for d in ("fwd", "bwd"):
            lstm(f"enc.l2.{d}", 2 * P, c.lstm2_size)
        for view in VIEWS:
            width = view_width(view, c)
            add(f"head.{view}.W", _glorot(rng, (width, n_tags), width, n_tags, dt))
            add(f"head.{view}.b", np.zeros(n_tags))
        return cls(config, p)

    def copy(self) -> "Tagger":
        return Tagger(self.config, {k: Parameter(k, v.value.copy(), v.trainable) for k, v in self.params.items()})

    def state_arrays(self) -> dict:
        return {k: v.value for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: stored shape {arrays[k].shape} != model shape {p.shape}")
            p.value[...] = arrays[k]


def view_width(view: str, config: EncoderConfig) -> int:
    P = config.projection_size
    widths = {"full": 4 * P, "fwd": P, "bwd": P, "future": P, "past": P}
    if view not in widths:
        raise ViewError(f"unknown view {view!r}; expected one of {VIEWS}")
    return widths[view]


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def embed_tokens(batch: Batch, model: Tagger, dropout_rate: float = 0.0, mode: str = "eval",
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Word vector concatenated with max-pooled relu char-CNN features, [B, T, token_dim]."""
    training = _check_mode(mode)
    c = model.config
    B, T = batch.word_ids.shape
    if batch.word_ids.size and batch.word_ids.max() >= model.n_words:
        raise IndexError(f"word id {batch.word_ids.max()} outside vocabulary of {model.n_words}")
    if batch.char_ids.size and batch.char_ids.max() >= model.n_chars:
        raise IndexError(f"char id {batch.char_ids.max()} outside vocabulary of {model.n_chars}")

    chars = batch.char_ids.reshape(B * T, -1)
    kmax = max(c.char_filter_widths)
    if chars.shape[1] < kmax:
        chars = np.pad(chars, ((0, 0), (0, kmax - chars.shape[1])), constant_values=PAD_ID)
    # char features depend only on the spelling, so run the CNN once per distinct row
    uniq, inverse = np.unique(chars, axis=0, return_inverse=True)
    word_len = (uniq != PAD_ID).sum(axis=1)
    char_vecs = ops.gather(model["emb.char"], uniq)  # [U, C, E]

    pooled = []
    for k in c.char_filter_widths:
        conv = ops.relu(ops.conv1d(char_vecs, model[f"char_cnn.w{k}.W"], model[f"char_cnn.w{k}.b"]))
        # windows that start beyond max(len, k) - k only cover padding
        n_windows = np.maximum(word_len, k) - k + 1
        valid = np.arange(conv.shape[1])[None, :] < n_windows[:, None]
        pooled.append(ops.max_over_time(conv, valid))
    char_feats = ops.gather(ops.concat(pooled, axis=-1), inverse.reshape(B, T))
    words = ops.gather(model["emb.word"], batch.word_ids)
    reps = ops.concat([words, char_feats], axis=-1)
    return ops.dropout(reps, dropout_rate, rng, training)


def lstm_cell(x, h_prev, c_prev, w, b, proj=None):
    """One LSTM step from primitive kernels; returns (h, c).

    Gate blocks in ``w``/``b`` are ordered input, forget, output, candidate.
    """
    H = b.shape[0] // 4
    z = ops.add_bias(ops.matmul(ops.concat([x, h_prev], axis=-1), w), b)
    i = ops.sigmoid(ops.slice_last(z, 0, H))
    f = ops.sigmoid(ops.slice_last(z, H, 2 * H))
    o = ops.sigmoid(ops.slice_last(z, 2 * H, 3 * H))
    g = ops.tanh(ops.slice_last(z, 3 * H, 4 * H))
    c = ops.add(ops.mul(f, c_prev), ops.mul(i, g))
    h = ops.mul(o, ops.tanh(c))
    if proj is not None:
        h = ops.matmul(h, proj)
    return h, c


def _bilstm(model, layer, x, mask):
    cells = [(model[f"{layer}.{d}.W"], model[f"{layer}.{d}.b"], model.params.get(f"{layer}.{d}.proj"))
             for d in ("fwd", "bwd")]
    return ops.bilstm_scan(x, mask, *cells)


def encode(batch: Batch, model: Tagger, dropout_rate: float = 0.0, mode: str = "eval",
           rng: Optional[np.random.Generator] = None) -> EncoderStates:
    reps = embed_tokens(batch, model, dropout_rate, mode, rng)
    P = model.config.projection_size
    h1 = _bilstm(model, "enc.l1", reps, batch.mask)
    h2 = _bilstm(model, "enc.l2", h1, batch.mask)
    return EncoderStates(ops.slice_last(h1, 0, P), ops.slice_last(h1, P, 2 * P), h2, batch.mask)


def view_input(view: str, states: EncoderStates) -> Tensor:
    if view == "full":
        return ops.concat([states.h1_fwd, states.h1_bwd, states.h2], axis=-1)
    if view == "fwd":
        return states.h1_fwd
    if view == "bwd":
        return states.h1_bwd
    if view == "future":
        return ops.shift_time(states.h1_fwd, 1)
    if view == "past":
        return ops.shift_time(states.h1_bwd, -1)
    raise ViewError(f"unknown view {view!r}; expected one of {VIEWS}")


def head_logits(view: str, states: EncoderStates, model: Tagger, dropout_rate: float = 0.0,
                mode: str = "eval", rng: Optional[np.random.Generator] = None) -> Tensor:
    training = _check_mode(mode)
    x = ops.dropout(view_input(view, states), dropout_rate, rng, training)
    return ops.add_bias(ops.matmul(x, model[f"head.{view}.W"]), model[f"head.{view}.b"])


def predict(view: str, states: EncoderStates, model: Tagger) -> Tensor:
    """Per-token tag distributions [B, T, num_tags] from the given view's head."""
    return ops.softmax(head_logits(view, states, model))

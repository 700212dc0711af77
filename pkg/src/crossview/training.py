"""Cross-view training: supervised steps on labeled batches alternate with
consistency steps that pull the restricted-view heads toward the primary head."""
from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, TextIO

import numpy as np

from .config import TrainConfig
from .corpus import Batch, LabeledSentence, Vocabulary, make_batches, to_iob2
from .encoder import AUX_VIEWS, Tagger, encode, head_logits
from .ndiff import NonFiniteError, OptimizerState, Tape, Tensor, backward, ops, paused, sgd_momentum_step
from .ndiff.serialize import CorruptPayloadError, read_payload, write_payload
from .scoring import score

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, kind: str, value: float):
        super().__init__(f"non-finite {kind} loss ({value}) at step {step}")
        self.step = step
        self.kind = kind


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


# ------------------------------------------------------------------ losses

def supervised_loss(batch: Batch, model: Tagger, dropout_rate: Optional[float] = None,
                    mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Mean negative log-likelihood of the gold tags under the primary head."""
    if batch.tag_ids is None:
        raise ValueError("supervised_loss: batch has no gold tags")
    if dropout_rate is None:
        dropout_rate = model.config.dropout_labeled
    states = encode(batch, model, dropout_rate, mode, rng)
    logp = ops.log_softmax(head_logits("full", states, model, dropout_rate, mode, rng))
    return ops.scale(ops.masked_mean(ops.pick(logp, batch.tag_ids), batch.mask), -1.0)


def teacher_distribution(batch: Batch, model: Tagger) -> np.ndarray:
    """Primary-head distribution without dropout, cut off from the gradient."""
    with paused():
        states = encode(batch, model, 0.0, "eval")
        probs = ops.softmax(head_logits("full", states, model))
    return ops.stop_gradient(probs).value


def consistency_loss(batch: Batch, model: Tagger, dropout_rate: Optional[float] = None,
                     mode: str = "train", rng: Optional[np.random.Generator] = None,
                     teacher: Optional[np.ndarray] = None) -> Tensor:
    """Mean over the four auxiliary views and unmasked tokens of KL(teacher || view).

    ``teacher`` may be passed in to hold the target fixed (gradient checks);
    by default it is recomputed from the current parameters.
    """
    n = int(batch.mask.sum())
    if n == 0:
        raise ValueError("consistency_loss: batch has no unmasked tokens")
    if dropout_rate is None:
        dropout_rate = model.config.dropout_unlabeled
    if teacher is None:
        teacher = teacher_distribution(batch, model)
    p = Tensor(teacher)
    # sum_k p log p with 0 log 0 = 0
    neg_entropy = float((np.where(teacher > 0, teacher * np.log(np.where(teacher > 0, teacher, 1)), 0)
                         .sum(axis=-1) * batch.mask).sum())
    states = encode(batch, model, dropout_rate, mode, rng)
    cross = None
    for view in AUX_VIEWS:
        logq = ops.log_softmax(head_logits(view, states, model, dropout_rate, mode, rng))
        term = ops.masked_sum(ops.sum_last(ops.mul(p, logq)), batch.mask)
        cross = term if cross is None else ops.add(cross, term)
    # KL = sum p log p - sum p log q
    kl_total = ops.add(ops.scale(cross, -1.0), Tensor(np.asarray(neg_entropy * len(AUX_VIEWS), dtype=teacher.dtype)))
    return ops.scale(kl_total, 1.0 / (len(AUX_VIEWS) * n))


# ------------------------------------------------------------------ tagging

def repair_iob2(tags: Sequence[str]) -> list[str]:
    return to_iob2(tags)


def tag_sentences(sentences: Sequence, model: Tagger, vocab: Vocabulary, batch_size: int = 64) -> list[list[str]]:
    """Argmax of the primary head, repaired to valid IOB2, in input order."""
    out: list = [None] * len(sentences)
    for batch in make_batches(sentences, vocab, batch_size, shuffle=False):
        states = encode(batch, model, 0.0, "eval")
        best = head_logits("full", states, model).value.argmax(axis=-1)
        for row, idx in enumerate(batch.index):
            n = int(batch.lengths[row])
            out[idx] = repair_iob2([vocab.tags[k] for k in best[row, :n]])
    return out


def evaluate_f1(sentences: Sequence[LabeledSentence], model: Tagger, vocab: Vocabulary, batch_size: int = 64) -> float:
    if not sentences:
        return 0.0
    pred = tag_sentences(sentences, model, vocab, batch_size)
    return score(pred, [s.tags for s in sentences]).overall.f1


# ------------------------------------------------------------------ state and checkpoints

@dataclass
class TrainState:
    step: int = 0
    best_f1: Optional[float] = None
    best_step: Optional[int] = None
    evals_since_improvement: int = 0
    avg_supervised: Optional[float] = None
    avg_consistency: Optional[float] = None
    stopped_early: bool = False

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocabulary
    model: Tagger
    state: TrainState = field(default_factory=TrainState)
    optimizer: Optional[OptimizerState] = None
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Directory with config.json, vocab.json, state.json, weights.bin and weights.manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = dict(ckpt.model.state_arrays())
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = dict(base_lr=o.base_lr, momentum=o.momentum, decay=o.decay, clip_norm=o.clip_norm, step=o.step)
        for k in sorted(o.buffers):
            arrays[f"optim.momentum/{k}"] = o.buffers[k]
    trainable = sorted(k for k, p in ckpt.model.params.items() if p.trainable)
    _write_json(path / "config.json", {"format_version": ckpt.version, "config": ckpt.config.to_dict()})
    _write_json(path / "vocab.json", ckpt.vocab.to_dict())
    _write_json(path / "state.json", {"format_version": ckpt.version, "train_state": ckpt.state.to_dict(),
                                      "optimizer": opt, "trainable": trainable})
    write_payload(arrays, path / "weights.bin", path / "weights.manifest")
    return path


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptCheckpointError(f"checkpoint is missing {path.name}") from None
    except json.JSONDecodeError as e:
        raise CorruptCheckpointError(f"{path.name} is not valid JSON: {e}") from None


def load_checkpoint(path, dtype: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    meta = _read_json(path / "config.json")
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_dict(_read_json(path / "vocab.json"))
    state_meta = _read_json(path / "state.json")
    if state_meta.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError("state.json format version does not match config.json")
    try:
        arrays = read_payload(path / "weights.bin", path / "weights.manifest")
    except CorruptPayloadError as e:
        raise CorruptCheckpointError(str(e)) from e

    dt = dtype or config.dtype
    model = Tagger.create(config.encoder, len(vocab.words), len(vocab.chars), len(vocab.tags),
                          seed=0, dtype=dt, word_vectors=np.zeros((len(vocab.words), config.encoder.word_dim), dtype=dt))
    weights = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    try:
        model.load_arrays(weights)
    except ValueError as e:
        raise CheckpointError(f"weights do not match vocabulary/config: {e}") from e

    opt = None
    if state_meta.get("optimizer") is not None:
        o = state_meta["optimizer"]
        opt = OptimizerState(base_lr=o["base_lr"], momentum=o["momentum"], decay=o["decay"],
                             clip_norm=o["clip_norm"], step=o["step"])
        prefix = "optim.momentum/"
        opt.buffers = {k[len(prefix):]: v.astype(dt) for k, v in arrays.items() if k.startswith(prefix)}
    state = TrainState(**state_meta["train_state"])
    return Checkpoint(config, vocab, model, state, opt, version)


# ------------------------------------------------------------------ the loop

def _cycle(examples: Sequence, vocab: Vocabulary, batch_size: int, seed: int) -> Iterator[Batch]:
    """Endless batches, reshuffled with a fresh seed each epoch."""
    epoch = 0
    while True:
        yield from make_batches(examples, vocab, batch_size, seed=seed * 100_003 + epoch, shuffle=True)
        epoch += 1


def _prefetch(it: Iterator[Batch], depth: int) -> Iterator[Batch]:
    """Move batch preparation to a worker thread through a bounded queue."""
    if depth <= 0:
        return it
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        for b in it:
            while not stop.is_set():
                try:
                    q.put(b, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if stop.is_set():
                return

    threading.Thread(target=work, daemon=True).start()

    def gen():
        try:
            while True:
                yield q.get()
        finally:
            stop.set()

    return gen()


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list


def _ema_update(shadow: dict, model: Tagger, decay: float):
    for k, p in model.params.items():
        shadow[k] *= decay
        shadow[k] += (1 - decay) * p.value


def train(labeled: Sequence[LabeledSentence], unlabeled: Sequence, val: Sequence[LabeledSentence],
          config: TrainConfig, vocab: Vocabulary, word_vectors: Optional[np.ndarray] = None,
          log_stream: Optional[TextIO] = None,
          on_eval: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train a tagger and return the best-validation and final checkpoints.

    Each loop iteration takes one optimizer step on the supervised loss and,
    in cvt mode, ``unlabeled_per_labeled`` steps on the consistency loss.
    Validation F1 is computed every ``eval_every_steps`` optimizer steps.
    """
    config.validate()
    if config.mode == "cvt" and not unlabeled:
        raise ValueError("cvt mode needs unlabeled sentences")
    if not labeled:
        raise ValueError("no labeled sentences")
    model = Tagger.create(config.encoder, len(vocab.words), len(vocab.chars), len(vocab.tags),
                          seed=config.seed, dtype=config.dtype, word_vectors=word_vectors)
    params = model.parameters()
    opt = OptimizerState(base_lr=config.base_lr, momentum=config.momentum, decay=config.decay,
                         clip_norm=config.clip_norm)
    state = TrainState()
    rng = np.random.default_rng([config.seed, 1])
    lab_it = _prefetch(_cycle(labeled, vocab, config.batch_size_labeled, config.seed), config.prefetch)
    unl_it = None
    if config.mode == "cvt":
        unl_it = _prefetch(_cycle(unlabeled, vocab, config.batch_size_unlabeled, config.seed + 1), config.prefetch)
    ema = {k: p.value.copy() for k, p in model.params.items()} if config.ema_decay else None
    best_arrays = None
    records = []

    def emit(rec):
        records.append(rec)
        if log_stream is not None:
            log_stream.write(json.dumps(rec, sort_keys=True) + "\n")

    def eval_model() -> Tagger:
        if ema is None:
            return model
        m = model.copy()
        m.load_arrays(ema)
        return m

    def opt_step(kind: str, loss_fn) -> bool:
        with Tape() as tape:
            loss = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(opt.step, kind, value)
        backward(tape, loss)
        try:
            lr = sgd_momentum_step(params, opt)
        except NonFiniteError as e:
            raise TrainingDiverged(opt.step, kind, float("nan")) from e
        if ema is not None:
            _ema_update(ema, model, config.ema_decay)
        attr = "avg_supervised" if kind == "supervised" else "avg_consistency"
        prev = getattr(state, attr)
        setattr(state, attr, value if prev is None else 0.99 * prev + 0.01 * value)
        state.step = opt.step
        emit({"step": opt.step, "kind": kind, "loss": value, "lr": lr})
        return after_step()

    def after_step() -> bool:
        nonlocal best_arrays
        if opt.step % config.eval_every_steps == 0:
            m = eval_model()
            f1 = evaluate_f1(val, m, vocab)
            emit({"step": opt.step, "kind": "eval", "val_f1": f1})
            if on_eval is not None:
                on_eval(opt.step, f1)
            if state.best_f1 is None or f1 > state.best_f1 + config.min_delta_f1:
                state.best_f1, state.best_step = f1, opt.step
                state.evals_since_improvement = 0
                best_arrays = {k: v.copy() for k, v in m.state_arrays().items()}
            else:
                state.evals_since_improvement += 1
                if state.evals_since_improvement >= config.patience_evals:
                    state.stopped_early = True
                    return True
        return opt.step >= config.max_steps

    done = False
    while not done:
        batch = next(lab_it)
        done = opt_step("supervised", lambda: supervised_loss(batch, model, rng=rng))
        if done or unl_it is None:
            continue
        for _ in range(config.unlabeled_per_labeled):
            ubatch = next(unl_it)
            done = opt_step("consistency", lambda: consistency_loss(ubatch, model, rng=rng))
            if done:
                break

    final_model = eval_model()
    final = Checkpoint(config, vocab, final_model, _copy_state(state), _copy_opt(opt))
    if best_arrays is None:
        best_model = final_model.copy()
    else:
        best_model = final_model.copy()
        best_model.load_arrays(best_arrays)
    best = Checkpoint(config, vocab, best_model, _copy_state(state), None)
    return TrainResult(best, final, records)


def _copy_state(s: TrainState) -> TrainState:
    return TrainState(**s.to_dict())


def _copy_opt(o: OptimizerState) -> OptimizerState:
    return OptimizerState(o.base_lr, o.momentum, o.decay, o.clip_norm, o.step,
                          {k: v.copy() for k, v in o.buffers.items()})

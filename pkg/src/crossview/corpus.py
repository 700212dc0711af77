"""Reading tagged and untagged text, vocabularies, IOB2 spans and batching."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1
MAX_WORD_CHARS = 32


class CorpusFormatError(ValueError):
    pass


class TagError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple
    tags: tuple

    def __post_init__(self):
        if not self.tokens:
            raise CorpusFormatError("sentence has no tokens")
        if len(self.tokens) != len(self.tags):
            raise CorpusFormatError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        for t in self.tags:
            parse_tag(t)


@dataclass(frozen=True)
class UnlabeledSentence:
    tokens: tuple

    def __post_init__(self):
        if not self.tokens:
            raise CorpusFormatError("sentence has no tokens")


class Span(NamedTuple):
    start: int
    end: int  # inclusive
    label: str


def parse_tag(tag: str) -> tuple[str, Optional[str]]:
    """Split "B-PER" into ("B", "PER"); "O" gives ("O", None)."""
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[0] in "BI" and tag[1] == "-":
        return tag[0], tag[2:]
    raise TagError(f"invalid tag {tag!r}")


# --------------------------------------------------------------------- spans

def tags_to_spans(tags: Sequence[str]) -> set[Span]:
    """Chunks of an IOB tag sequence.

    An I- tag that does not continue a chunk of the same label opens a new
    one, the way conlleval reads IOB1 input.
    """
    spans = set()
    start = label = None
    for i, tag in enumerate(tags):
        prefix, lab = parse_tag(tag)
        if prefix == "I" and label == lab:
            continue
        if label is not None:
            spans.add(Span(start, i - 1, label))
            start = label = None
        if prefix != "O":
            start, label = i, lab
    if label is not None:
        spans.add(Span(start, len(tags) - 1, label))
    return spans


def spans_to_tags(spans: Iterable, length: int) -> list[str]:
    tags = ["O"] * length
    for s in sorted(Span(*s) for s in spans):
        if not s.label:
            raise TagError("span label is empty")
        if not 0 <= s.start <= s.end < length:
            raise TagError(f"span {tuple(s)} outside sentence of length {length}")
        if any(t != "O" for t in tags[s.start:s.end + 1]):
            raise TagError(f"span {tuple(s)} overlaps another span")
        tags[s.start] = f"B-{s.label}"
        for i in range(s.start + 1, s.end + 1):
            tags[i] = f"I-{s.label}"
    return tags


def to_iob2(tags: Sequence[str]) -> list[str]:
    """Rewrite chunk-opening I- tags to B-."""
    return spans_to_tags(tags_to_spans(tags), len(tags))


# --------------------------------------------------------------------- readers

def read_conll(stream: Iterable[str]) -> list[LabeledSentence]:
    """Token in the first column, tag in the last; blank lines end sentences."""
    sentences = []
    tokens, tags = [], []

    def flush():
        if tokens:
            sentences.append(LabeledSentence(tuple(tokens), tuple(to_iob2(tags))))
            tokens.clear()
            tags.clear()

    for lineno, line in enumerate(stream, start=1):
        cols = line.split()
        if not cols:
            flush()
            continue
        if cols[0] == "-DOCSTART-":
            continue
        if len(cols) < 2:
            raise CorpusFormatError(f"line {lineno}: expected token and tag, got {line.strip()!r}")
        try:
            parse_tag(cols[-1])
        except TagError as e:
            raise CorpusFormatError(f"line {lineno}: {e}") from None
        tokens.append(cols[0])
        tags.append(cols[-1])
    flush()
    return sentences


def write_conll(sentences: Iterable[LabeledSentence]) -> str:
    out = []
    for s in sentences:
        out.extend(f"{tok} {tag}" for tok, tag in zip(s.tokens, s.tags))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def read_unlabeled(stream: Iterable[str], max_sentences: Optional[int] = None) -> list[UnlabeledSentence]:
    out = []
    for line in stream:
        if max_sentences is not None and len(out) >= max_sentences:
            break
        toks = line.split()
        if toks:
            out.append(UnlabeledSentence(tuple(toks)))
    return out


def read_embedding_vocab(stream: Iterable[str]) -> set[str]:
    return {line.split(" ", 1)[0] for line in stream if line.strip()}


# --------------------------------------------------------------------- vocabulary

class Vocabulary:
    """Word, character and tag id maps. PAD is 0 and UNK is 1 for words and chars."""

    def __init__(self, words: Sequence[str], chars: Sequence[str], tags: Sequence[str]):
        self.words = list(words)
        self.chars = list(chars)
        self.tags = list(tags)
        for name, items in (("word", self.words), ("char", self.chars)):
            if items[:2] != [PAD, UNK]:
                raise ValueError(f"{name} vocabulary must start with PAD and UNK")
        for name, items in (("word", self.words), ("char", self.chars), ("tag", self.tags)):
            if len(set(items)) != len(items):
                raise ValueError(f"{name} vocabulary has duplicates")
        self.word_ids = {w: i for i, w in enumerate(self.words)}
        self.char_ids = {c: i for i, c in enumerate(self.chars)}
        self.tag_ids = {t: i for i, t in enumerate(self.tags)}

    def word_id(self, w: str) -> int:
        return self.word_ids.get(w, UNK_ID)

    def char_id(self, c: str) -> int:
        return self.char_ids.get(c, UNK_ID)

    def tag_id(self, t: str) -> int:
        try:
            return self.tag_ids[t]
        except KeyError:
            raise TagError(f"tag {t!r} not in the training tag set") from None

    def to_dict(self) -> dict:
        return {"words": self.words, "chars": self.chars, "tags": self.tags}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], d["chars"], d["tags"])

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


def _ordered(counts: Counter) -> list[str]:
    return [k for k, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def _in_embeddings(word: str, embedding_vocab) -> bool:
    return word in embedding_vocab or word.lower() in embedding_vocab


def build_vocab(labeled: Sequence[LabeledSentence], unlabeled: Sequence[UnlabeledSentence] = (),
                embedding_vocab: Optional[set] = None, min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be at least 1")
    if not labeled:
        raise ValueError("build_vocab: no labeled sentences, cannot enumerate tags")
    embedding_vocab = embedding_vocab or set()
    words, chars, tags = Counter(), Counter(), Counter()
    for s in labeled:
        words.update(s.tokens)
        tags.update(s.tags)
    for s in unlabeled:
        words.update(s.tokens)
    for w, n in words.items():
        chars.update({c: n for c in w[:MAX_WORD_CHARS]})
    kept = Counter({w: n for w, n in words.items()
                    if n >= min_count or _in_embeddings(w, embedding_vocab)})
    return Vocabulary([PAD, UNK] + _ordered(kept), [PAD, UNK] + _ordered(chars), _ordered(tags))


def load_embeddings(stream: Iterable[str], vocab: Vocabulary, dim: int, seed: int = 0,
                    dtype=np.float32) -> tuple[np.ndarray, int]:
    """Embedding matrix for ``vocab``; returns (matrix, number of skipped lines).

    Rows found in the file are copied as written (falling back to the
    lowercased form), others are drawn from U(-0.25, 0.25) with ``seed``,
    and the PAD row is zero.
    """
    wanted = set(vocab.words) | {w.lower() for w in vocab.words}
    found = {}
    skipped = good = 0
    for lineno, line in enumerate(stream, start=1):
        fields = line.rstrip("\n").rstrip(" ").split(" ")
        if len(fields) < 2:
            continue
        if len(fields) - 1 != dim:
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields):
                continue  # word2vec-style "<count> <dim>" header
            if good == 0 and skipped == 0 and len(fields) > 2:
                raise ValueError(f"embedding file has {len(fields) - 1}-d vectors, config expects {dim}")
            skipped += 1
            continue
        good += 1
        if fields[0] in wanted and fields[0] not in found:
            try:
                found[fields[0]] = np.array(fields[1:], dtype=np.float64)
            except ValueError:
                skipped += 1
    if skipped:
        log.warning("skipped %d malformed embedding lines", skipped)

    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.25, 0.25, size=(len(vocab.words), dim))
    for i, w in enumerate(vocab.words):
        vec = found.get(w)
        if vec is None:
            vec = found.get(w.lower())
        if vec is not None:
            mat[i] = vec
    mat[PAD_ID] = 0.0
    return mat.astype(dtype), skipped


# --------------------------------------------------------------------- batching

@dataclass
class Batch:
    word_ids: np.ndarray   # [B, T]
    char_ids: np.ndarray   # [B, T, C]
    tag_ids: Optional[np.ndarray]  # [B, T]
    mask: np.ndarray       # [B, T], 1 on real tokens
    lengths: np.ndarray    # [B]
    index: np.ndarray      # position of each row in the source sequence

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def n_tokens(self) -> int:
        return int(self.lengths.sum())


def encode_batch(sentences: Sequence, vocab: Vocabulary, index: Optional[Sequence[int]] = None,
                 min_chars: int = 1) -> Batch:
    B = len(sentences)
    lengths = np.array([len(s.tokens) for s in sentences], dtype=np.int64)
    T = int(lengths.max())
    C = max([min_chars] + [min(len(w), MAX_WORD_CHARS) for s in sentences for w in s.tokens])
    words = np.full((B, T), PAD_ID, dtype=np.int64)
    chars = np.full((B, T, C), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.int8)
    labeled = all(isinstance(s, LabeledSentence) for s in sentences)
    tags = np.zeros((B, T), dtype=np.int64) if labeled else None
    for b, s in enumerate(sentences):
        n = len(s.tokens)
        mask[b, :n] = 1
        for t, w in enumerate(s.tokens):
            words[b, t] = vocab.word_id(w)
            for k, ch in enumerate(w[:MAX_WORD_CHARS]):
                chars[b, t, k] = vocab.char_id(ch)
        if labeled:
            tags[b, :n] = [vocab.tag_id(x) for x in s.tags]
    idx = np.arange(B) if index is None else np.asarray(index)
    return Batch(words, chars, tags, mask, lengths, idx)


def make_batches(examples: Sequence, vocab: Vocabulary, batch_size: int = 64, seed: int = 0,
                 shuffle: bool = True) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    return [encode_batch([examples[i] for i in chunk], vocab, index=chunk)
            for chunk in (order[k:k + batch_size] for k in range(0, len(order), batch_size))]


def split_validation(sentences: Sequence, fraction: float = 0.1, seed: int = 0):
    """Random sentence-level train/validation split."""
    order = np.random.default_rng(seed).permutation(len(sentences))
    n_val = int(round(len(sentences) * fraction))
    val = [sentences[i] for i in sorted(order[:n_val])]
    train = [sentences[i] for i in sorted(order[n_val:])]
    return train, val

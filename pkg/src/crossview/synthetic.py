"""Seeded HMM generator for toy tagging corpora.

Hidden states are O filler words, O trigger words that usually precede an
entity, and the B/I states of two entity types. Entity words come from
large Zipf-distributed lexicons, so a small labeled sample sees only part of
them while a large unlabeled sample sees almost all of them next to their
triggers.
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import LabeledSentence, UnlabeledSentence

STATES = ("fill", "trig_PER", "trig_LOC", "B-PER", "I-PER", "B-LOC", "I-LOC", "tail_PER", "tail_LOC")
TAG_OF = {"fill": "O", "trig_PER": "O", "trig_LOC": "O", "tail_PER": "O", "tail_LOC": "O",
          "B-PER": "B-PER", "I-PER": "I-PER", "B-LOC": "B-LOC", "I-LOC": "I-LOC"}


@dataclass
class HMMSpec:
    n_fill: int = 60
    n_trig: int = 4
    n_tail: int = 4
    n_entity: int = 300
    min_len: int = 6
    max_len: int = 14
    p_entity: float = 0.22       # chance a filler position starts an entity episode
    p_trigger: float = 0.5       # chance an entity is preceded by its trigger
    p_tail: float = 0.3          # chance an entity is followed by a type-specific word
    p_continue: float = 0.35     # chance an entity gets another I- token
    zipf: float = 1.1


class HMMCorpus:
    def __init__(self, spec: Optional[HMMSpec] = None, seed: int = 0):
        self.spec = spec or HMMSpec()
        rng = np.random.default_rng(seed)
        used: set = set()

        def lexicon(n):
            words = []
            while len(words) < n:
                w = "".join(rng.choice(list(string.ascii_lowercase), size=int(rng.integers(3, 8))))
                if w not in used:
                    used.add(w)
                    words.append(w)
            return words

        s = self.spec
        self.lex = {
            "fill": lexicon(s.n_fill),
            "trig_PER": lexicon(s.n_trig), "trig_LOC": lexicon(s.n_trig),
            "tail_PER": lexicon(s.n_tail), "tail_LOC": lexicon(s.n_tail),
            "PER": lexicon(s.n_entity), "LOC": lexicon(s.n_entity),
        }
        self.weights = {k: self._zipf(len(v)) for k, v in self.lex.items()}

    def _zipf(self, n):
        w = 1.0 / np.arange(1, n + 1) ** self.spec.zipf
        return w / w.sum()

    def _word(self, rng, kind):
        lex = self.lex[kind]
        return lex[rng.choice(len(lex), p=self.weights[kind])]

    def sentence(self, rng) -> LabeledSentence:
        s = self.spec
        n = int(rng.integers(s.min_len, s.max_len + 1))
        tokens, tags = [], []
        while len(tokens) < n:
            if rng.random() >= s.p_entity or len(tokens) > n - 2:
                tokens.append(self._word(rng, "fill"))
                tags.append("O")
                continue
            label = "PER" if rng.random() < 0.5 else "LOC"
            if rng.random() < s.p_trigger:
                tokens.append(self._word(rng, f"trig_{label}"))
                tags.append("O")
            tokens.append(self._word(rng, label))
            tags.append(f"B-{label}")
            while rng.random() < s.p_continue:
                tokens.append(self._word(rng, label))
                tags.append(f"I-{label}")
            if rng.random() < s.p_tail:
                tokens.append(self._word(rng, f"tail_{label}"))
                tags.append("O")
        return LabeledSentence(tuple(tokens), tuple(tags))

    def labeled(self, n: int, seed: int) -> list[LabeledSentence]:
        rng = np.random.default_rng(seed)
        return [self.sentence(rng) for _ in range(n)]

    def unlabeled(self, n: int, seed: int) -> list[UnlabeledSentence]:
        return [UnlabeledSentence(s.tokens) for s in self.labeled(n, seed)]


def toy_splits(n_labeled=50, n_unlabeled=5000, n_val=100, n_test=500, seed=0, spec: Optional[HMMSpec] = None):
    """Disjointly seeded labeled/unlabeled/validation/test samples from one HMM."""
    hmm = HMMCorpus(spec, seed=seed)
    base = 1000 * (seed + 1)
    return dict(
        labeled=hmm.labeled(n_labeled, base + 1),
        unlabeled=hmm.unlabeled(n_unlabeled, base + 2),
        val=hmm.labeled(n_val, base + 3),
        test=hmm.labeled(n_test, base + 4),
    )

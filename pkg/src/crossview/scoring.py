"""conlleval-style chunk scoring, multi-run aggregation and significance tests."""
from __future__ import annotations

import itertools
import math
import statistics
import warnings
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .corpus import tags_to_spans


class AlignmentError(ValueError):
    pass


def round_half_up(x: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def fmt2(x: float) -> str:
    return str(round_half_up(x, 2))


@dataclass
class Metrics:
    predicted: int = 0
    gold: int = 0
    correct: int = 0

    @property
    def precision(self) -> float:
        return 100.0 * self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return 100.0 * self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def to_dict(self) -> dict:
        return dict(precision=self.precision, recall=self.recall, f1=self.f1,
                    predicted=self.predicted, gold=self.gold, correct=self.correct)


@dataclass
class EvalReport:
    overall: Metrics
    per_label: dict = field(default_factory=dict)
    tokens: int = 0
    correct_tokens: int = 0

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct_tokens / self.tokens if self.tokens else 0.0

    def to_dict(self) -> dict:
        return {"overall": self.overall.to_dict(),
                "per_label": {k: v.to_dict() for k, v in sorted(self.per_label.items())},
                "tokens": self.tokens, "correct_tokens": self.correct_tokens,
                "accuracy": self.accuracy}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def m(x):
            return Metrics(x["predicted"], x["gold"], x["correct"])
        return cls(m(d["overall"]), {k: m(v) for k, v in d.get("per_label", {}).items()},
                   d.get("tokens", 0), d.get("correct_tokens", 0))

    def to_text(self) -> str:
        o = self.overall
        lines = [
            f"processed {self.tokens} tokens with {o.gold} phrases; found: {o.predicted} phrases; correct: {o.correct}.",
            f"accuracy: {fmt2(self.accuracy):>6}%; precision: {fmt2(o.precision):>6}%; "
            f"recall: {fmt2(o.recall):>6}%; FB1: {fmt2(o.f1):>6}",
        ]
        for label in sorted(self.per_label):
            m = self.per_label[label]
            lines.append(f"{label:>17}: precision: {fmt2(m.precision):>6}%; recall: {fmt2(m.recall):>6}%; "
                         f"FB1: {fmt2(m.f1):>6}  {m.predicted}")
        return "\n".join(lines) + "\n"


def score(pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]]) -> EvalReport:
    """Exact-match chunk precision/recall/F1, micro-averaged over the corpus."""
    if len(pred_tags) != len(gold_tags):
        raise AlignmentError(f"{len(pred_tags)} predicted sentences but {len(gold_tags)} gold sentences")
    pred_n, gold_n, corr_n = Counter(), Counter(), Counter()
    tokens = correct_tokens = 0
    for i, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        if len(p) != len(g):
            raise AlignmentError(f"sentence {i}: {len(p)} predicted tags but {len(g)} gold tags")
        ps, gs = tags_to_spans(p), tags_to_spans(g)
        pred_n.update(s.label for s in ps)
        gold_n.update(s.label for s in gs)
        corr_n.update(s.label for s in ps & gs)
        tokens += len(g)
        correct_tokens += sum(a == b for a, b in zip(p, g))
    labels = set(pred_n) | set(gold_n)
    per_label = {k: Metrics(pred_n[k], gold_n[k], corr_n[k]) for k in labels}
    overall = Metrics(sum(pred_n.values()), sum(gold_n.values()), sum(corr_n.values()))
    return EvalReport(overall, per_label, tokens, correct_tokens)


# ------------------------------------------------------------------ multi-run

@dataclass
class RunAggregate:
    runs: list
    mean: float
    std: Optional[float]

    def __str__(self):
        if self.std is None:
            return fmt2(self.mean)
        return f"{fmt2(self.mean)}±{fmt2(self.std)}"


def aggregate(runs: Sequence[float]) -> RunAggregate:
    """Mean and sample (n-1) standard deviation; std is None for a single run."""
    runs = [float(r) for r in runs]
    if not runs:
        raise ValueError("aggregate: no runs")
    std = statistics.stdev(runs) if len(runs) > 1 else None
    return RunAggregate(runs, statistics.fmean(runs), std)


def _permutation_unpaired(a, b, resamples, seed):
    pooled = np.concatenate([a, b])
    n, na = len(pooled), len(a)
    observed = abs(a.mean() - b.mean())
    tol = 1e-12 * max(1.0, observed)
    if n <= 12:
        hits = total = 0
        for idx in itertools.combinations(range(n), na):
            mask = np.zeros(n, dtype=bool)
            mask[list(idx)] = True
            stat = abs(pooled[mask].mean() - pooled[~mask].mean())
            hits += stat >= observed - tol
            total += 1
        return hits / total
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(resamples):
        perm = rng.permutation(pooled)
        hits += abs(perm[:na].mean() - perm[na:].mean()) >= observed - tol
    return (hits + 1) / (resamples + 1)


def _permutation_paired(a, b, resamples, seed):
    d = a - b
    n = len(d)
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, observed)
    if n <= 12:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
        stats_ = np.abs((signs * d).mean(axis=1))
        return float(np.mean(stats_ >= observed - tol))
    rng = np.random.default_rng(seed)
    signs = rng.choice((1.0, -1.0), size=(resamples, n))
    hits = int(np.sum(np.abs((signs * d).mean(axis=1)) >= observed - tol))
    return (hits + 1) / (resamples + 1)


def significance(runs_a: Sequence[float], runs_b: Sequence[float], method: str = "welch_t",
                 paired: bool = False, resamples: int = 10_000, seed: int = 0) -> float:
    """Two-sided p-value for a difference in mean score between two sets of runs.

    ``welch_t`` (or the paired t-test when ``paired``) falls back to the
    permutation test when both sides have zero variance. Permutation tests are
    exhaustive for up to 12 runs in total (12 pairs when paired).
    """
    a = np.asarray(runs_a, dtype=float)
    b = np.asarray(runs_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("significance: need at least 2 runs on each side")
    if paired and len(a) != len(b):
        raise ValueError("significance: paired test needs equal run counts")
    if method not in ("welch_t", "permutation"):
        raise ValueError(f"significance: unknown method {method!r}")

    if method == "welch_t":
        spread = np.var(a - b) if paired else np.var(a) + np.var(b)
        if spread == 0:
            warnings.warn("zero variance in both run sets; t-test undefined, using permutation test",
                          RuntimeWarning, stacklevel=2)
            method = "permutation"
        else:
            res = stats.ttest_rel(a, b) if paired else stats.ttest_ind(a, b, equal_var=False)
            p = float(res.pvalue)
            return 1.0 if math.isnan(p) else min(1.0, max(0.0, p))
    p = _permutation_paired(a, b, resamples, seed) if paired else _permutation_unpaired(a, b, resamples, seed)
    return min(1.0, max(0.0, float(p)))

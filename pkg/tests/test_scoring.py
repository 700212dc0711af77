import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview.corpus import spans_to_tags
from crossview.scoring import (AlignmentError, EvalReport, aggregate, fmt2, round_half_up, score,
                               significance)

TAGS = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]


def valid_iob2(draw_list):
    out, prev = [], "O"
    for t in draw_list:
        if t.startswith("I-") and prev[2:] != t[2:]:
            t = "B-" + t[2:]
        out.append(t)
        prev = t
    return out


iob2_sentence = st.lists(st.sampled_from(TAGS), min_size=1, max_size=12).map(valid_iob2)


def test_perfect():
    gold = [["B-PER", "I-PER", "O"], ["B-LOC"]]
    r = score(gold, gold)
    assert (r.overall.precision, r.overall.recall, r.overall.f1) == (100.0, 100.0, 100.0)


def test_partial():
    pred = [spans_to_tags({(0, 1, "PER")}, 4)]
    gold = [spans_to_tags({(0, 1, "PER"), (3, 3, "LOC")}, 4)]
    o = score(pred, gold).overall
    assert o.precision == 100.0 and o.recall == 50.0
    assert fmt2(o.f1) == "66.67"


def test_wrong_label_is_wrong():
    o = score([["B-LOC", "I-LOC"]], [["B-PER", "I-PER"]]).overall
    assert o.correct == 0 and o.f1 == 0.0


def test_boundary_off_by_one_is_wrong():
    assert score([["B-PER", "I-PER", "I-PER"]], [["B-PER", "I-PER", "O"]]).overall.correct == 0


def test_empty_prediction_and_gold():
    o = score([["O", "O"]], [["O", "O"]]).overall
    assert o.precision == o.recall == o.f1 == 0.0


def test_length_mismatch_names_sentence():
    with pytest.raises(AlignmentError, match="sentence 1"):
        score([["O"], ["O", "O"]], [["O"], ["O"]])


def test_sentence_count_mismatch():
    with pytest.raises(AlignmentError):
        score([["O"]], [["O"], ["O"]])


def test_report_text_and_dict_roundtrip():
    r = score([["B-PER", "O", "B-LOC"]], [["B-PER", "O", "O"]])
    text = r.to_text()
    assert "precision:  50.00%" in text and "recall: 100.00%" in text and "PER:" in text
    back = EvalReport.from_dict(json.loads(json.dumps(r.to_dict())))
    assert back.overall == r.overall and back.per_label == r.per_label


def test_round_half_up():
    assert str(round_half_up(0.125, 2)) == "0.13"
    assert str(round_half_up(2080.5, 0)) == "2081"
    assert fmt2(66.665) == "66.67"


@settings(max_examples=200)
@given(st.lists(iob2_sentence, min_size=1, max_size=6))
def test_self_score_is_perfect(sents):
    o = score(sents, sents).overall
    if o.gold:
        assert o.f1 == 100.0


@settings(max_examples=100)
@given(st.lists(st.tuples(iob2_sentence, st.randoms()), min_size=1, max_size=6), st.randoms())
def test_micro_counts_and_order_invariance(pairs, rnd):
    gold = [g for g, _ in pairs]
    pred = [[TAGS[r.randrange(5)] if r.random() < 0.3 else t for t in g] for g, r in pairs]
    pred = [valid_iob2(p) for p in pred]
    whole = score(pred, gold).overall
    parts = [score([p], [g]).overall for p, g in zip(pred, gold)]
    assert whole.correct == sum(m.correct for m in parts)
    assert whole.predicted == sum(m.predicted for m in parts)
    order = list(range(len(gold)))
    rnd.shuffle(order)
    assert score([pred[i] for i in order], [gold[i] for i in order]).overall == whole


class TestAggregate:
    def test_constant(self):
        a = aggregate([80, 80, 80])
        assert a.mean == 80 and a.std == 0

    def test_two_point(self):
        a = aggregate([79.9, 80.3])
        assert a.mean == pytest.approx(80.1)
        assert a.std == pytest.approx(0.2828, abs=1e-4)

    def test_single(self):
        a = aggregate([77.0])
        assert a.std is None and str(a) == "77.00"

    def test_format(self):
        assert str(aggregate([79.9, 80.1, 80.3, 79.95, 80.15])) == "80.08±0.16"

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestSignificance:
    def test_identical_permutation(self):
        assert significance([1, 2, 3], [1, 2, 3], "permutation") == 1.0

    def test_extreme_separation(self):
        p = significance([1] * 5, [9] * 5, "permutation")
        assert p == pytest.approx(2 / math.comb(10, 5))

    def test_degenerate_welch_falls_back(self):
        with pytest.warns(RuntimeWarning):
            p = significance([2.0] * 4, [3.0] * 4)
        assert p == pytest.approx(2 / math.comb(8, 4))

    def test_welch_matches_textbook(self):
        a, b = [80.1, 80.4, 79.8, 80.0], [79.2, 79.9, 79.5, 79.0]
        ma, mb = np.mean(a), np.mean(b)
        va, vb = np.var(a, ddof=1) / 4, np.var(b, ddof=1) / 4
        t = (ma - mb) / math.sqrt(va + vb)
        df = (va + vb) ** 2 / (va ** 2 / 3 + vb ** 2 / 3)
        from scipy.stats import t as student
        assert significance(a, b) == pytest.approx(2 * student.sf(abs(t), df))

    def test_paired_permutation(self):
        a = [80.0, 81.0, 82.0, 83.0]
        b = [x - 0.5 for x in a]
        assert significance(a, b, "permutation", paired=True) == pytest.approx(2 / 16)

    def test_large_uses_monte_carlo(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=10), rng.normal(size=10)
        p1 = significance(a, b, "permutation", resamples=2000, seed=3)
        assert p1 == significance(a, b, "permutation", resamples=2000, seed=3)
        assert 0 < p1 <= 1

    def test_too_few_runs(self):
        with pytest.raises(ValueError):
            significance([1.0], [2.0, 3.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 100), min_size=2, max_size=5), st.lists(st.floats(0, 100), min_size=2, max_size=5),
           st.sampled_from(["welch_t", "permutation"]))
    def test_p_in_unit_interval(self, a, b, method):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = significance(a, b, method)
        assert 0.0 <= p <= 1.0

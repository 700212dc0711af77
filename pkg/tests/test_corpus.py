import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview import corpus
from crossview.corpus import (PAD, PAD_ID, UNK, UNK_ID, CorpusFormatError, LabeledSentence, TagError,
                              UnlabeledSentence, build_vocab, encode_batch, load_embeddings, make_batches,
                              read_conll, read_unlabeled, spans_to_tags, split_validation, tags_to_spans,
                              to_iob2, write_conll)


def lab(text, tags=None):
    toks = tuple(text.split())
    return LabeledSentence(toks, tuple(tags or ["O"] * len(toks)))


class TestReadConll:
    def test_single_sentence(self):
        out = read_conll(["great O", "tuna B-OTE", "roll I-OTE", ""])
        assert len(out) == 1
        assert out[0].tokens == ("great", "tuna", "roll")
        assert out[0].tags == ("O", "B-OTE", "I-OTE")

    def test_empty(self):
        assert read_conll([]) == []

    def test_iob1_normalized(self):
        assert read_conll(["x I-LOC", ""])[0].tags == ("B-LOC",)

    def test_last_column_is_tag_and_docstart_skipped(self):
        lines = ["-DOCSTART- -X- O O", "", "EU NNP B-NP B-ORG", "rejects VBZ B-VP O"]
        (s,) = read_conll(lines)
        assert s.tags == ("B-ORG", "O")

    def test_short_line_reports_line_number(self):
        with pytest.raises(CorpusFormatError, match="line 3"):
            read_conll(["a O", "b O", "lonely", ""])

    def test_bad_tag(self):
        with pytest.raises((CorpusFormatError, TagError)):
            read_conll(["a X-FOO"])

    def test_write_roundtrip(self):
        sents = [lab("a b c", ["B-X", "I-X", "O"]), lab("d", ["B-Y"])]
        assert read_conll(io.StringIO(write_conll(sents))) == sents


class TestReadUnlabeled:
    def test_tokenizes(self):
        (s,) = read_unlabeled(["the food was great"])
        assert len(s.tokens) == 4

    def test_blank_skipped(self):
        assert len(read_unlabeled(["", "a b"])) == 1

    def test_max_sentences(self):
        assert len(read_unlabeled([f"w{i}" for i in range(10)], max_sentences=3)) == 3


class TestVocab:
    def test_min_count(self):
        v = build_vocab([lab("a a b")], min_count=2)
        assert v.words == [PAD, UNK, "a"]
        assert v.tags == ["O"]

    def test_min_count_one(self):
        assert set(build_vocab([lab("a a b")], min_count=1).words) == {PAD, UNK, "a", "b"}

    def test_embedding_rescue(self):
        assert "b" in build_vocab([lab("a a b")], embedding_vocab={"b"}, min_count=2).words

    def test_empty_labeled(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_reserved_ids_and_unknown(self):
        v = build_vocab([lab("x y")])
        assert v.word_id(PAD) == PAD_ID and v.word_id(UNK) == UNK_ID
        assert v.word_id("never-seen") == UNK_ID
        assert v.char_id("☃") == UNK_ID

    def test_unlabeled_words_counted_but_tags_from_labeled_only(self):
        v = build_vocab([lab("x", ["B-A"])], [UnlabeledSentence(("z",))])
        assert "z" in v.words
        assert v.tags == ["B-A"]

    def test_dict_roundtrip(self):
        v = build_vocab([lab("a b", ["B-X", "I-X"])])
        assert corpus.Vocabulary.from_dict(v.to_dict()) == v


class TestEmbeddings:
    def test_copy_and_pad(self):
        v = build_vocab([lab("cat dog")])
        mat, skipped = load_embeddings(["cat 0.1 0.2"], v, dim=2)
        np.testing.assert_allclose(mat[v.word_id("cat")], [0.1, 0.2], rtol=1e-6)
        np.testing.assert_array_equal(mat[PAD_ID], [0, 0])
        assert skipped == 0

    def test_missing_rows_deterministic(self):
        v = build_vocab([lab("cat dog")])
        a, _ = load_embeddings(["cat 0.1 0.2"], v, dim=2, seed=5)
        b, _ = load_embeddings(["cat 0.1 0.2"], v, dim=2, seed=5)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.abs(a[v.word_id("dog")]) <= 0.25)

    def test_dim_mismatch(self):
        v = build_vocab([lab("cat")])
        with pytest.raises(ValueError):
            load_embeddings(["cat 0.1 0.2 0.3"], v, dim=2)

    def test_bad_line_skipped(self):
        v = build_vocab([lab("cat dog")])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mat, skipped = load_embeddings(["cat 0.1 0.2", "dog 0.5"], v, dim=2)
        assert skipped == 1


class TestSpans:
    @pytest.mark.parametrize("tags,spans", [
        (["O", "B-OTE", "I-OTE"], {(1, 2, "OTE")}),
        (["O", "O"], set()),
        (["B-PER", "B-PER"], {(0, 0, "PER"), (1, 1, "PER")}),
        (["B-A", "I-B"], {(0, 0, "A"), (1, 1, "B")}),
    ])
    def test_tags_to_spans(self, tags, spans):
        assert tags_to_spans(tags) == spans

    @pytest.mark.parametrize("spans,n,tags", [
        ({(1, 2, "OTE")}, 3, ["O", "B-OTE", "I-OTE"]),
        (set(), 2, ["O", "O"]),
        ({(0, 0, "A"), (1, 1, "A")}, 2, ["B-A", "B-A"]),
    ])
    def test_spans_to_tags(self, spans, n, tags):
        assert spans_to_tags(spans, n) == tags

    def test_overlap_rejected(self):
        with pytest.raises(TagError):
            spans_to_tags({(0, 2, "A"), (2, 3, "B")}, 4)

    def test_out_of_range(self):
        with pytest.raises(TagError):
            spans_to_tags({(1, 3, "A")}, 3)

    def test_invalid_tag(self):
        with pytest.raises(TagError):
            tags_to_spans(["B_PER"])

    @given(st.lists(st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"]), max_size=15))
    def test_to_iob2_is_idempotent_and_preserves_chunks(self, tags):
        fixed = to_iob2(tags)
        assert to_iob2(fixed) == fixed
        assert tags_to_spans(fixed) == tags_to_spans(tags)


class TestBatches:
    def sents(self, lengths):
        return [lab(" ".join(f"w{i}" for i in range(n))) for n in lengths]

    def test_sizes(self):
        s = self.sents([1, 2, 3, 4, 5])
        v = build_vocab(s)
        assert [b.size for b in make_batches(s, v, batch_size=2, shuffle=False)] == [2, 2, 1]

    def test_padding(self):
        s = self.sents([3, 5])
        b = encode_batch(s, build_vocab(s))
        assert b.word_ids.shape == (2, 5)
        np.testing.assert_array_equal(b.mask[0], [1, 1, 1, 0, 0])
        assert np.all(b.word_ids[0, 3:] == PAD_ID)

    def test_same_seed_same_order(self):
        s = self.sents(range(1, 12))
        v = build_vocab(s)
        a = [b.index for b in make_batches(s, v, batch_size=3, seed=4)]
        b = [b.index for b in make_batches(s, v, batch_size=3, seed=4)]
        assert [list(x) for x in a] == [list(x) for x in b]

    def test_empty(self):
        v = build_vocab(self.sents([2]))
        assert list(make_batches([], v)) == []

    def test_unlabeled_batch_has_no_tags(self):
        v = build_vocab(self.sents([2]))
        assert encode_batch([UnlabeledSentence(("w0",))], v).tag_ids is None


def test_split_validation_partitions():
    s = [lab(f"s{i}") for i in range(40)]
    train, val = split_validation(s, fraction=0.1, seed=1)
    assert len(val) == 4 and len(train) == 36
    assert sorted(x.tokens for x in train + val) == sorted(x.tokens for x in s)


@settings(max_examples=50)
@given(st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8), min_size=1, max_size=6))
def test_encode_batch_mask_matches_lengths(raw):
    sents = [lab(" ".join(w)) for w in raw]
    b = encode_batch(sents, build_vocab(sents))
    np.testing.assert_array_equal(b.mask.sum(axis=1), [len(w) for w in raw])

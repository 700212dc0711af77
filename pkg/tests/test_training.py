import io
import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from crossview import corpus
from crossview.config import TrainConfig
from crossview.encoder import AUX_VIEWS, VIEWS, Tagger, encode, predict
from crossview.ndiff import Tape, backward
from crossview.training import (CorruptCheckpointError, IncompatibleCheckpointError, TrainingDiverged,
                                consistency_loss, evaluate_f1, load_checkpoint, repair_iob2, save_checkpoint,
                                supervised_loss, tag_sentences, train)


def two_tag_setup(n_tags=3):
    sents = [corpus.LabeledSentence(("a", "b"), ("O", "B-X")), corpus.LabeledSentence(("c",), ("I-X",))]
    v = corpus.build_vocab(sents)
    vocab = corpus.Vocabulary(v.words, v.chars, ["O", "B-X", "I-X"][:n_tags])
    model = Tagger.create(tiny_config(), len(vocab.words), len(vocab.chars), n_tags, seed=0, dtype="float64")
    return vocab, model


def constant_heads(model, logits, views=VIEWS):
    for v in views:
        model[f"head.{v}.W"].value[...] = 0
        model[f"head.{v}.b"].value[...] = logits


def tagged_batch(vocab, tokens, tags):
    return corpus.encode_batch([corpus.LabeledSentence(tuple(tokens), tuple(tags))], vocab)


class TestSupervisedLoss:
    def test_uniform_three_tags(self):
        vocab, m = two_tag_setup()
        constant_heads(m, 0.0)
        b = tagged_batch(vocab, ["a", "b"], ["O", "B-X"])
        assert supervised_loss(b, m, 0.0, "eval").item() == pytest.approx(math.log(3))

    def test_hand_computed(self):
        vocab, m = two_tag_setup()
        constant_heads(m, np.log([0.5, 0.25, 0.25]))
        b = tagged_batch(vocab, ["a", "b"], ["O", "B-X"])
        assert supervised_loss(b, m, 0.0, "eval").item() == pytest.approx((math.log(2) + math.log(4)) / 2)

    def test_near_one_hot_is_zero(self):
        vocab, m = two_tag_setup()
        constant_heads(m, [60.0, 0.0, 0.0])
        b = tagged_batch(vocab, ["a", "c"], ["O", "O"])
        assert supervised_loss(b, m, 0.0, "eval").item() == pytest.approx(0.0, abs=1e-20)

    def test_matches_definition_on_random_model(self, toy, toy_vocab, tiny_model):
        b = corpus.encode_batch(toy["labeled"][:4], toy_vocab)
        probs = predict("full", encode(b, tiny_model), tiny_model).value
        gold = np.take_along_axis(probs, b.tag_ids[..., None], -1)[..., 0]
        expected = -np.log(gold)[b.mask.astype(bool)].mean()
        assert supervised_loss(b, tiny_model, 0.0, "eval").item() == pytest.approx(expected, rel=1e-12)

    def test_needs_tags(self, toy, toy_vocab, tiny_model):
        b = corpus.encode_batch(toy["unlabeled"][:2], toy_vocab)
        with pytest.raises(ValueError):
            supervised_loss(b, tiny_model)


class TestConsistencyLoss:
    def test_identical_views_give_zero(self, toy, toy_vocab, tiny_model):
        constant_heads(tiny_model, np.linspace(-1, 1, len(toy_vocab.tags)))
        b = corpus.encode_batch(toy["unlabeled"][:3], toy_vocab)
        assert consistency_loss(b, tiny_model, 0.0, "eval").item() == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_teacher_vs_uniform(self):
        vocab, m = two_tag_setup(n_tags=2)
        constant_heads(m, 0.0, AUX_VIEWS)
        b = corpus.encode_batch([corpus.UnlabeledSentence(("a",))], vocab)
        teacher = np.array([[[1.0, 0.0]]])
        assert consistency_loss(b, m, 0.0, "eval", teacher=teacher).item() == pytest.approx(math.log(2))

    def test_non_negative_with_dropout(self, toy, toy_vocab, tiny_model):
        b = corpus.encode_batch(toy["unlabeled"][:4], toy_vocab)
        for seed in range(5):
            assert consistency_loss(b, tiny_model, rng=np.random.default_rng(seed)).item() >= 0

    def test_primary_head_gradient_is_exactly_zero(self, toy, toy_vocab, tiny_model):
        b = corpus.encode_batch(toy["unlabeled"][:4], toy_vocab)
        for p in tiny_model.parameters():
            p.zero_grad()
        with Tape() as tape:
            loss = consistency_loss(b, tiny_model, rng=np.random.default_rng(0))
        backward(tape, loss)
        assert not np.any(tiny_model["head.full.W"].grad)
        assert not np.any(tiny_model["head.full.b"].grad)
        assert np.any(tiny_model["head.fwd.W"].grad)
        assert np.any(tiny_model["enc.l1.fwd.W"].grad)

    def test_empty_mask(self, toy_vocab, tiny_model):
        b = corpus.encode_batch([corpus.UnlabeledSentence(("a",))], toy_vocab)
        b.mask[...] = 0
        with pytest.raises(ValueError):
            consistency_loss(b, tiny_model)


def test_repair_promotes_orphans():
    assert repair_iob2(["I-A", "I-A", "O", "I-B", "B-B", "I-A"]) == ["B-A", "I-A", "O", "B-B", "B-B", "B-A"]


def test_tag_sentences_valid_and_ordered(toy, toy_vocab, tiny_model):
    sents = toy["test"]
    out = tag_sentences(sents, tiny_model, toy_vocab, batch_size=4)
    assert [len(t) for t in out] == [len(s.tokens) for s in sents]
    for tags in out:
        assert repair_iob2(tags) == tags
    assert out == tag_sentences(sents, tiny_model, toy_vocab, batch_size=64)


# ---------------------------------------------------------------- the loop

def tiny_train_config(**kw):
    base = dict(max_steps=30, batch_size_labeled=4, batch_size_unlabeled=4, eval_every_steps=10,
                patience_evals=5, seed=0, mode="cvt", encoder=tiny_config())
    base.update(kw)
    return TrainConfig(**base)


def run(toy, vocab, **kw):
    log = io.StringIO()
    result = train(toy["labeled"], toy["unlabeled"], toy["val"], tiny_train_config(**kw), vocab, log_stream=log)
    return result, [json.loads(l) for l in log.getvalue().splitlines()]


def test_patience_counting(toy, toy_vocab):
    # a min_delta no F1 can clear makes every eval after the first non-improving
    result, log = run(toy, toy_vocab, mode="supervised_only", max_steps=10_000, eval_every_steps=100,
                      patience_evals=3, min_delta_f1=1000.0)
    evals = [r for r in log if r["kind"] == "eval"]
    assert [r["step"] for r in evals] == [100, 200, 300, 400]
    assert result.final.state.step == 400 and result.final.state.stopped_early


def test_alternation_and_log_format(toy, toy_vocab):
    _, log = run(toy, toy_vocab, max_steps=6, eval_every_steps=3)
    kinds = [r["kind"] for r in log]
    assert kinds == ["supervised", "consistency", "supervised", "eval", "consistency", "supervised",
                     "consistency", "eval"]
    for r in log:
        if r["kind"] == "eval":
            assert set(r) == {"step", "kind", "val_f1"}
        else:
            assert set(r) == {"step", "kind", "loss", "lr"}


def test_best_is_monotone_and_attained(toy, toy_vocab):
    seen = []
    result = train(toy["labeled"], toy["unlabeled"], toy["val"], tiny_train_config(max_steps=40), toy_vocab,
                   on_eval=lambda step, f1: seen.append(f1))
    assert result.best.state.best_f1 == max(seen)
    assert evaluate_f1(toy["val"], result.best.model, toy_vocab) == pytest.approx(max(seen))


def test_supervised_only_ignores_unlabeled(toy, toy_vocab):
    a = train(toy["labeled"], toy["unlabeled"], toy["val"], tiny_train_config(mode="supervised_only"), toy_vocab)
    b = train(toy["labeled"], [], toy["val"], tiny_train_config(mode="supervised_only"), toy_vocab)
    for k, p in a.final.model.params.items():
        np.testing.assert_array_equal(p.value, b.final.model[k].value)


def test_cvt_needs_unlabeled(toy, toy_vocab):
    with pytest.raises(ValueError):
        train(toy["labeled"], [], toy["val"], tiny_train_config(), toy_vocab)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step_and_kind(toy, toy_vocab):
    with pytest.raises(TrainingDiverged) as info:
        train(toy["labeled"], toy["unlabeled"], toy["val"],
              tiny_train_config(base_lr=1e30, clip_norm=None, max_steps=50), toy_vocab)
    assert info.value.kind in ("supervised", "consistency")


def test_prefetch_does_not_change_results(toy, toy_vocab):
    a, _ = run(toy, toy_vocab, max_steps=12)
    b, _ = run(toy, toy_vocab, max_steps=12, prefetch=3)
    for k, p in a.final.model.params.items():
        np.testing.assert_array_equal(p.value, b.final.model[k].value)


def test_ema_flag_runs(toy, toy_vocab):
    result, _ = run(toy, toy_vocab, max_steps=10, ema_decay=0.9)
    assert result.final.state.step == 10


# ---------------------------------------------------------------- checkpoints

@pytest.fixture
def trained(toy, toy_vocab):
    return run(toy, toy_vocab, max_steps=8)[0]


def test_checkpoint_roundtrip(tmp_path, trained, toy, toy_vocab):
    save_checkpoint(trained.final, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    b = corpus.encode_batch(toy["test"][:5], toy_vocab)
    before = predict("full", encode(b, trained.final.model), trained.final.model).value
    after = predict("full", encode(b, back.model), back.model).value
    np.testing.assert_array_equal(before, after)
    assert back.vocab == toy_vocab
    assert back.state.step == trained.final.state.step
    assert set(back.optimizer.buffers) == set(trained.final.optimizer.buffers)


def test_checkpoint_truncated(tmp_path, trained):
    save_checkpoint(trained.final, tmp_path / "ck")
    w = tmp_path / "ck" / "weights.bin"
    w.write_bytes(w.read_bytes()[:100])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_missing_file(tmp_path, trained):
    save_checkpoint(trained.final, tmp_path / "ck")
    (tmp_path / "ck" / "vocab.json").unlink()
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_version_bump(tmp_path, trained):
    save_checkpoint(trained.final, tmp_path / "ck")
    cfg = tmp_path / "ck" / "config.json"
    meta = json.loads(cfg.read_text())
    meta["format_version"] += 1
    cfg.write_text(json.dumps(meta))
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_same_seed_same_bytes(tmp_path, toy, toy_vocab):
    for name in ("a", "b"):
        save_checkpoint(run(toy, toy_vocab, max_steps=8)[0].final, tmp_path / name)
    for f in ("weights.bin", "weights.manifest", "state.json", "config.json", "vocab.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

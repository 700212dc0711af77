from pathlib import Path

import pytest

import crossview
from crossview import corpus, synthetic
from crossview.config import EncoderConfig, preset
from crossview.encoder import Tagger
from crossview.ndiff import retain_freed_memory

FIXTURES = Path(crossview.__file__).parent / "fixtures"


def tiny_config(**kw) -> EncoderConfig:
    base = dict(word_dim=6, char_emb_dim=4, char_filter_widths=(2, 3), char_filters=3,
                lstm1_size=5, lstm2_size=4, projection_size=4, dropout_labeled=0.5, dropout_unlabeled=0.8)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def toy():
    return synthetic.toy_splits(n_labeled=12, n_unlabeled=12, n_val=6, n_test=6, seed=0)


@pytest.fixture(scope="session")
def toy_vocab(toy):
    return corpus.build_vocab(toy["labeled"], toy["unlabeled"])


@pytest.fixture
def tiny_model(toy_vocab):
    v = toy_vocab
    return Tagger.create(tiny_config(), len(v.words), len(v.chars), len(v.tags), seed=0, dtype="float64")


@pytest.fixture
def desk_model(toy_vocab):
    v = toy_vocab
    return Tagger.create(preset("desk").encoder, len(v.words), len(v.chars), len(v.tags), seed=0,
                         dtype="float64")


ACCEPTANCE_LINES: dict = {}


def pytest_configure(config):
    # same allocator settings the command line applies
    retain_freed_memory()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])

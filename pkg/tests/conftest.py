import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icdbert.encoder import ModelConfig, init_parameters  # noqa: E402
from icdbert.tokenizer import desk_vocabulary_path, load_vocabulary  # noqa: E402


@pytest.fixture(scope="session")
def desk_vocab():
    return load_vocabulary(desk_vocabulary_path())


@pytest.fixture
def tiny_config():
    """Small enough for exhaustive finite differences."""
    return ModelConfig(vocab_size=20, hidden=8, layers=2, heads=2, ff_dim=12, max_len=6,
                       num_labels=3, dropout=0.0, init_std=0.5)


@pytest.fixture
def tiny_batch(tiny_config):
    rng = np.random.default_rng(3)
    ids = rng.integers(5, tiny_config.vocab_size, size=(3, tiny_config.max_len))
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1], [1, 1, 0, 0, 0, 0]], dtype=np.int8)
    ids[mask == 0] = 0
    segs = np.zeros_like(ids)
    targets = rng.integers(0, 2, size=(3, tiny_config.num_labels)).astype(np.int8)
    return ids, mask, segs, targets


@pytest.fixture
def tiny_params(tiny_config):
    return init_parameters(tiny_config, seed=11)


@pytest.fixture(scope="session")
def keyword_data(tmp_path_factory, desk_vocab):
    """Encoded synthetic corpus whose notes name their codes; top-5 codes per kind."""
    from icdbert.corpus import CodeKind, generate_synthetic_corpus
    from icdbert.labels import build_label_vocabulary, join_notes_with_labels, one_hot_encode_admissions
    from icdbert.tokenizer import encode_dataset

    corpus = generate_synthetic_corpus(tmp_path_factory.mktemp("kw"), seed=7, n_admissions=120, n_codes=40)
    vocab = build_label_vocabulary(corpus.diagnoses, corpus.procedures, 5)
    rows = join_notes_with_labels(corpus.notes, one_hot_encode_admissions(corpus.diagnoses + corpus.procedures, vocab))
    assert all(e.kind in CodeKind for e in vocab)
    return encode_dataset(rows, desk_vocab, 64, vocab.names)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

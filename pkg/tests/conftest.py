import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from isfusion.ngram import train_ngram  # noqa: E402
from isfusion.corpus import make_partial_corpus, reverse_corpus  # noqa: E402
from isfusion.vocab import Vocabulary  # noqa: E402


def make_vocab(n_ordinary):
    """Vocabulary with ``n_ordinary`` plain tokens, so V = n_ordinary + 1 (unk)."""
    return Vocabulary(("<s>", "</s>", "<unk>") + tuple(f"t{i}" for i in range(n_ordinary)))


def random_models(vocab, seed, n_sentences=60, order=3, lambdas=(0.2, 0.3, 0.3)):
    """Forward and backward LMs trained on a small random corpus."""
    rng = np.random.default_rng(seed)
    ids = np.arange(2, len(vocab))
    corpus = [list(rng.choice(ids, size=rng.integers(1, 8))) for _ in range(n_sentences)]
    corpus = [[int(x) for x in s] for s in corpus]
    flm = train_ngram(corpus, order, lambdas, "fwd", vocab)
    blm = train_ngram(reverse_corpus(corpus), order, lambdas, "bwd", vocab)
    pblm = train_ngram(make_partial_corpus(corpus), order, lambdas, "bwd", vocab)
    return corpus, flm, blm, pblm


@pytest.fixture
def small_vocab():
    return make_vocab(5)


_CRITERIA = []


def record_criterion(number, title, passed, detail=""):
    _CRITERIA.append((number, title, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title} {detail}".rstrip())


def random_grid(vocab, steps, seed):
    """Grid with Dirichlet rows; every support entry is strictly positive."""
    from isfusion.acoustic import from_probabilities

    rng = np.random.default_rng(seed)
    prob = rng.dirichlet(np.full(len(vocab), 0.5), size=steps) + 1e-6
    return from_probabilities(prob, vocab.digest)


def random_instance(n_ordinary, steps, seed, n_sentences=40):
    """(vocab, corpus, flm, blm, pblm, grid) drawn from one seed."""
    vocab = make_vocab(n_ordinary)
    corpus, flm, blm, pblm = random_models(vocab, seed, n_sentences=n_sentences)
    return vocab, corpus, flm, blm, pblm, random_grid(vocab, steps, seed + 7919)

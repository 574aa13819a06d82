"""Corpus utilities: reversal, partial-sentence augmentation, statistics.

Sentences are plain sequences of tokens (ids or strings, the functions do not
care) without sentence-boundary markers.
"""

from dataclasses import dataclass
from typing import Iterable, Iterator, List, Sequence

import numpy as np

from isfusion.errors import ConfigError


@dataclass(frozen=True)
class CorpusStats:
    sentence_count: int
    token_count: int

    @property
    def average_length(self) -> float:
        if self.sentence_count == 0:
            return 0.0
        return self.token_count / self.sentence_count

    def as_row(self) -> str:
        return f"{self.sentence_count}\t{self.token_count}\t{self.average_length:.2f}"


def reverse_corpus(sentences: Iterable[Sequence]) -> Iterator[list]:
    for sent in sentences:
        yield list(reversed(sent))


def make_partial_corpus(sentences: Iterable[Sequence]) -> Iterator[list]:
    """Yield every reversed prefix of every sentence, longest first.

    For ``w1 .. wn`` this produces ``wn .. w1``, ``w(n-1) .. w1``, ..., ``w1``,
    i.e. exactly the token strings a backward model sees when it is applied to
    partial hypotheses during decoding.
    """
    for sent in sentences:
        rev = list(reversed(sent))
        for start in range(len(rev)):
            yield rev[start:]


def corpus_stats(sentences: Iterable[Sequence]) -> CorpusStats:
    n_sent = 0
    n_tok = 0
    for sent in sentences:
        n_sent += 1
        n_tok += len(sent)
    return CorpusStats(n_sent, n_tok)


def read_text(path) -> List[List[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f if line.strip()]


def iter_text(path) -> Iterator[List[str]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            toks = line.split()
            if toks:
                yield toks


def write_text(sentences: Iterable[Sequence[str]], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for sent in sentences:
            f.write(" ".join(sent) + "\n")
            n += 1
    return n


class MarkovSource:
    """Seeded first-order Markov text source for desk-scale experiments.

    Each word has a handful of preferred successors, plus a small leak to all
    others. A random subset of words are "sentence-final" and end the sentence
    with high probability, so the distribution of last words differs markedly
    from the distribution of words in mid-sentence.

    Args:
      n_words: number of distinct word types.
      seed: the source (transition structure) is a pure function of this seed.
      fanout: preferred successors per word.
      leak: probability mass spread uniformly over all words at each step.
      final_fraction: share of words that tend to end a sentence.
      p_end_final / p_end_other: per-word stop probabilities.
      max_len: hard cap on sentence length.
    """

    def __init__(
        self,
        n_words: int = 20,
        seed: int = 0,
        fanout: int = 3,
        leak: float = 0.05,
        final_fraction: float = 0.25,
        p_end_final: float = 0.35,
        p_end_other: float = 0.02,
        max_len: int = 40,
    ):
        if n_words < 2:
            raise ConfigError("n_words must be >= 2")
        rng = np.random.default_rng(seed)
        self.words = [f"w{i:02d}" for i in range(n_words)]
        self.max_len = max_len
        self.initial = rng.dirichlet(np.full(n_words, 0.5))
        trans = np.full((n_words, n_words), leak / n_words)
        fan = min(fanout, n_words)
        for i in range(n_words):
            succ = rng.choice(n_words, size=fan, replace=False)
            trans[i, succ] += (1.0 - leak) * rng.dirichlet(np.ones(fan))
        self.transitions = trans / trans.sum(axis=1, keepdims=True)
        n_final = max(1, int(round(final_fraction * n_words)))
        final = rng.choice(n_words, size=n_final, replace=False)
        self.p_end = np.full(n_words, p_end_other)
        self.p_end[final] = p_end_final

    def sample(self, n: int, seed: int) -> List[List[str]]:
        rng = np.random.default_rng(seed)
        n_words = len(self.words)
        cum_init = np.cumsum(self.initial)
        cum_trans = np.cumsum(self.transitions, axis=1)
        out = []
        for _ in range(n):
            cur = min(int(np.searchsorted(cum_init, rng.random(), side="right")), n_words - 1)
            sent = [cur]
            while len(sent) < self.max_len and rng.random() >= self.p_end[cur]:
                cur = min(int(np.searchsorted(cum_trans[cur], rng.random(), side="right")), n_words - 1)
                sent.append(cur)
            out.append([self.words[i] for i in sent])
        return out


def write_partial_corpus(src, dst, reverse_only: bool = False) -> CorpusStats:
    """Stream ``src`` to ``dst`` as reversed (and optionally partial) text."""
    gen = reverse_corpus if reverse_only else make_partial_corpus
    n_sent = n_tok = 0
    with open(dst, "w", encoding="utf-8") as f:
        for seq in gen(iter_text(src)):
            f.write(" ".join(seq) + "\n")
            n_sent += 1
            n_tok += len(seq)
    return CorpusStats(n_sent, n_tok)

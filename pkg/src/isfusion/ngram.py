"""Interpolated (Jelinek-Mercer) n-gram language models.

A model is trained on raw token-id sequences and can run in either
orientation:

* forward: sequences are wrapped as ``<s> body </s>``; ``<s>`` starts the
  history and ``</s>`` is the terminal prediction.
* backward: sequences (already reversed by the caller) are wrapped as
  ``</s> body <s>``; the roles of the two symbols swap.

The conditional distribution for a history ``h`` is::

    P(w | h) = floor / (V + 1) + sum_i lambda_i * ML_i(w | last i-1 tokens of h)

where ``floor = 1 - sum(lambdas)`` and ``V + 1`` is the size of the
prediction support (every id except the start symbol). An ML estimate whose
context was never seen falls back to the next lower order, so every row is
normalized exactly by construction.
"""

import math
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from isfusion.errors import ConfigError, ParseError
from isfusion.vocab import EOS_ID, SOS_ID, Vocabulary

FORWARD = "forward"
BACKWARD = "backward"
_ORIENTATIONS = {"forward": FORWARD, "fwd": FORWARD, "backward": BACKWARD, "bwd": BACKWARD}

FILE_MAGIC = "#isfusion-ngram v1"


def parse_orientation(value: str) -> str:
    try:
        return _ORIENTATIONS[value]
    except KeyError:
        raise ConfigError(f"orientation must be one of fwd/bwd, got {value!r}") from None


class NGramLM:
    """Trained n-gram model; immutable apart from an internal row cache."""

    def __init__(
        self,
        order: int,
        lambdas: Sequence[float],
        orientation: str,
        n_ids: int,
        vocab_digest: str,
        counts: Dict[Tuple[int, ...], int],
    ):
        _check_hparams(order, lambdas)
        self.order = order
        self.lambdas = tuple(float(x) for x in lambdas)
        self.orientation = parse_orientation(orientation)
        self.n_ids = n_ids
        self.vocab_digest = vocab_digest
        self.counts = dict(counts)
        if self.orientation == FORWARD:
            self.start_id, self.terminal_id = SOS_ID, EOS_ID
        else:
            self.start_id, self.terminal_id = EOS_ID, SOS_ID
        self.floor = 1.0 - math.fsum(self.lambdas)
        # context -> (successor ids, successor counts, total)
        succ: Dict[Tuple[int, ...], Tuple[List[int], List[int]]] = {}
        for gram, c in self.counts.items():
            ids, cs = succ.setdefault(gram[:-1], ([], []))
            ids.append(gram[-1])
            cs.append(c)
        self._succ = {
            ctx: (np.asarray(ids, dtype=np.int64), np.asarray(cs, dtype=np.float64), float(sum(cs)))
            for ctx, (ids, cs) in succ.items()
        }
        self._rows: Dict[Tuple[int, ...], np.ndarray] = {}

    @property
    def support_size(self) -> int:
        """V + 1: number of ids the model can predict."""
        return self.n_ids - 1

    def _ml(self, ctx: Tuple[int, ...]):
        entry = self._succ.get(ctx)
        if entry is None or entry[2] == 0:
            return None
        ids, cs, total = entry
        vec = np.zeros(self.n_ids)
        vec[ids] = cs / total
        return vec

    def _context(self, history: Sequence[int]) -> Tuple[int, ...]:
        if self.order == 1:
            return ()
        return tuple(history[-(self.order - 1):])

    def log_row(self, history: Sequence[int]) -> np.ndarray:
        """Natural-log distribution over all ids given ``history``.

        The start symbol of this orientation gets ``-inf``. Only the last
        ``order - 1`` tokens of ``history`` matter. The returned array is shared
        with the cache and must not be modified.
        """
        ctx = self._context(history)
        row = self._rows.get(ctx)
        if row is not None:
            return row
        prob = np.full(self.n_ids, self.floor / self.support_size)
        prob[self.start_id] = 0.0
        ml = None
        for level in range(1, self.order + 1):
            k = min(level - 1, len(ctx))
            est = self._ml(ctx[len(ctx) - k:])
            if est is not None:
                ml = est
            if ml is None:
                # unigram counts are never empty for a trained model
                raise ConfigError("model has no unigram counts")
            prob += self.lambdas[level - 1] * ml
        with np.errstate(divide="ignore"):
            row = np.log(prob)
        row.setflags(write=False)
        self._rows[ctx] = row
        return row

    def logprob(self, token: int, context: Sequence[int]) -> float:
        return lm_logprob(self, token, context)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_rows"] = {}
        return state


def _check_hparams(order: int, lambdas: Sequence[float]) -> None:
    if order < 1:
        raise ConfigError(f"order must be >= 1, got {order}")
    if len(lambdas) != order:
        raise ConfigError(f"expected {order} interpolation weights, got {len(lambdas)}")
    if any(not (0.0 <= x < 1.0) or not math.isfinite(x) for x in lambdas):
        raise ConfigError(f"interpolation weights must lie in [0, 1), got {list(lambdas)}")
    if math.fsum(lambdas) >= 1.0:
        raise ConfigError("interpolation weights must leave positive mass for the uniform floor")


def count_ngrams(corpus: Iterable[Sequence[int]], order: int, start: int, terminal: int) -> Counter:
    counts: Counter = Counter()
    for body in corpus:
        body = tuple(body)
        if start in body or terminal in body:
            raise ConfigError(f"boundary symbol inside a training sequence: {body}")
        padded = (start,) + body + (terminal,)
        counts.update((w,) for w in padded[1:])
        for k in range(2, order + 1):
            counts.update(zip(*(padded[j:] for j in range(k))))
    return counts


def train_ngram(
    corpus: Iterable[Sequence[int]],
    order: int,
    lambdas: Sequence[float],
    orientation: str,
    vocab: Vocabulary,
) -> NGramLM:
    """Count n-grams of ``corpus`` and build an interpolated model.

    ``corpus`` holds raw bodies (no sos/eos). For backward models the caller
    passes already-reversed sequences.
    """
    _check_hparams(order, lambdas)
    orientation = parse_orientation(orientation)
    start, terminal = (SOS_ID, EOS_ID) if orientation == FORWARD else (EOS_ID, SOS_ID)
    counts = count_ngrams(corpus, order, start, terminal)
    if not counts:
        raise ConfigError("cannot train a language model on an empty corpus")
    n_ids = len(vocab)
    if max(max(g) for g in counts) >= n_ids:
        raise ConfigError("corpus contains ids outside the vocabulary")
    return NGramLM(order, lambdas, orientation, n_ids, vocab.digest, counts)


def lm_logprob(lm: NGramLM, token: int, context: Sequence[int]) -> float:
    """log P(token | context); ``context`` normally starts with the start symbol."""
    if token == lm.start_id:
        raise ConfigError(f"token {token} is the start symbol of a {lm.orientation} model")
    return float(lm.log_row(context)[token])


def sequence_logprob(lm: NGramLM, body: Sequence[int]) -> float:
    """Chain-rule log probability of ``start body terminal``.

    The start symbol itself contributes log 1 = 0.
    """
    history = [lm.start_id]
    total = 0.0
    for tok in body:
        total += lm_logprob(lm, tok, history)
        history.append(tok)
    return total + lm_logprob(lm, lm.terminal_id, history)


def corpus_logprob(lm: NGramLM, dataset: Iterable[Sequence[int]]) -> Tuple[float, int]:
    """Total log probability and number of predictions (body + terminal)."""
    total = 0.0
    n = 0
    for body in dataset:
        total += sequence_logprob(lm, body)
        n += len(body) + 1
    return total, n


def perplexity(lm: NGramLM, dataset: Iterable[Sequence[int]]) -> float:
    total, n = corpus_logprob(lm, dataset)
    if n == 0:
        raise ConfigError("perplexity of an empty dataset is undefined")
    return math.exp(-total / n)


def save_lm(lm: NGramLM, path) -> None:
    lines = [
        FILE_MAGIC,
        f"order {lm.order}",
        "lambdas " + " ".join(repr(x) for x in lm.lambdas),
        f"orientation {lm.orientation}",
        f"n_ids {lm.n_ids}",
        f"vocab_hash {lm.vocab_digest}",
        f"ngrams {len(lm.counts)}",
        "\\data",
    ]
    for gram in sorted(lm.counts, key=lambda g: (len(g), g)):
        lines.append(f"{lm.counts[gram]}\t{' '.join(map(str, gram))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_lm(path) -> NGramLM:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != FILE_MAGIC:
        raise ParseError(f"missing header {FILE_MAGIC!r}", path, 1)
    header = {}
    lineno = 1
    for lineno, line in enumerate(text[1:], start=2):
        if line == "\\data":
            break
        key, _, value = line.partition(" ")
        header[key] = value
    else:
        raise ParseError("missing \\data section", path, lineno)
    try:
        order = int(header["order"])
        lambdas = [float(x) for x in header["lambdas"].split()]
        orientation = parse_orientation(header["orientation"])
        n_ids = int(header["n_ids"])
        digest = header["vocab_hash"]
        n_grams = int(header["ngrams"])
    except (KeyError, ValueError, ConfigError) as exc:
        raise ParseError(f"bad header: {exc}", path) from exc
    counts = {}
    data_start = lineno + 1
    for offset, line in enumerate(text[data_start - 1:]):
        if not line:
            continue
        num = data_start + offset
        c, sep, gram = line.partition("\t")
        try:
            key = tuple(int(x) for x in gram.split())
            value = int(c)
        except ValueError:
            raise ParseError(f"bad n-gram record {line!r}", path, num) from None
        if not sep or not key or len(key) > order or value <= 0 or max(key) >= n_ids or min(key) < 0:
            raise ParseError(f"bad n-gram record {line!r}", path, num)
        counts[key] = value
    if len(counts) != n_grams:
        raise ParseError(f"expected {n_grams} n-gram records, found {len(counts)}", path)
    try:
        return NGramLM(order, lambdas, orientation, n_ids, digest, counts)
    except ConfigError as exc:
        raise ParseError(str(exc), path) from exc

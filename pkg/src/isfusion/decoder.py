"""Label-synchronous beam search with forward SF and iterative backward-LM fusion.

Every live hypothesis has the same length at a given step, so all
extensions at step ``t`` are scored against grid row ``t``. When the
backward LM is due at a step, pruning happens in two stages: the cheap
scores (decoder + forward LM + length reward) cut the candidate list to
``beam**2``, the backward-LM replacement term is added to the survivors, and
the result is cut to ``beam``. Hypotheses that emit ``</s>`` leave the beam
and are collected as finished.
"""

import heapq
from functools import partial
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from isfusion.acoustic import PosteriorGrid, dec_logprob
from isfusion.errors import DecodeError, ValidationError
from isfusion.fusion import (
    BlmBookkeeping,
    FusionConfig,
    backward_sequence_score,
    initial_book,
    isf_applies,
    isf_delta,
    step_score,
)
from isfusion.ngram import BACKWARD, FORWARD, NGramLM, lm_logprob
from isfusion.vocab import EOS_ID, SOS_ID


@dataclass(frozen=True)
class Hypothesis:
    body: Tuple[int, ...]
    total_score: float
    blm_book: Optional[BlmBookkeeping]
    # running sum of beta * delta, kept for accounting checks
    isf_total: float = 0.0
    ended: bool = False

    def flm_context(self, order: int) -> Tuple[int, ...]:
        hist = (SOS_ID,) + self.body
        return hist[-(order - 1):] if order > 1 else ()


@dataclass
class DecodeStats:
    candidates_scored: List[int] = field(default_factory=list)
    isf_evaluations: List[int] = field(default_factory=list)
    ended: List[int] = field(default_factory=list)

    def totals(self) -> Dict[str, int]:
        return {
            "candidates_scored": sum(self.candidates_scored),
            "isf_evaluations": sum(self.isf_evaluations),
            "ended": sum(self.ended),
            "steps": len(self.ended),
        }

    def to_dict(self) -> Dict[str, List[int]]:
        return {
            "candidates_scored": list(self.candidates_scored),
            "isf_evaluations": list(self.isf_evaluations),
            "ended": list(self.ended),
        }


@dataclass
class DecodeResult:
    hypotheses: List[Hypothesis]
    stats: DecodeStats

    @property
    def nbest(self) -> List[Tuple[Tuple[int, ...], float]]:
        return [(h.body, h.total_score) for h in self.hypotheses]

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _rank_key(item):
    # item = (score, body, ...): higher score first, then lexicographic body
    return (-item[0], item[1])


def _check_models(grid: PosteriorGrid, flm: NGramLM, blm: Optional[NGramLM], config: FusionConfig):
    if flm.orientation != FORWARD:
        raise ValidationError("forward LM must have forward orientation")
    for name, lm in (("flm", flm), ("blm", blm)):
        if lm is None:
            continue
        if lm.vocab_digest != grid.vocab_digest or lm.n_ids != grid.n_ids:
            raise ValidationError(
                f"vocabulary mismatch: {name} hash {lm.vocab_digest} vs grid hash {grid.vocab_digest}"
            )
    if config.isf_enabled:
        if blm is None:
            raise ValidationError("backward LM required unless ISF is disabled")
        if blm.orientation != BACKWARD:
            raise ValidationError("backward LM must have backward orientation")


def beam_search(
    grid: PosteriorGrid,
    flm: NGramLM,
    blm: Optional[NGramLM],
    config: FusionConfig,
) -> DecodeResult:
    _check_models(grid, flm, blm, config)
    use_isf = config.isf_enabled
    beam = int(config.beam)
    support = np.arange(1, grid.n_ids)  # every id but sos
    eos_col = EOS_ID - 1
    book0 = initial_book(blm) if use_isf else None

    live = [Hypothesis((), 0.0, book0)]
    finished: List[Hypothesis] = []
    stats = DecodeStats()

    for t in range(1, grid.max_steps + 1):
        if not live:
            break
        last = t == grid.max_steps
        dec_row = grid.row(t)[support]
        cands = []
        for parent in live:
            flm_row = flm.log_row((SOS_ID,) + parent.body)[support]
            scores = parent.total_score + step_score(config, dec_row, flm_row)
            if last:
                # out of grid rows: the only legal move is to finish
                cands.append((float(scores[eos_col]), parent.body + (EOS_ID,), parent))
            else:
                for col, tok in enumerate(support.tolist()):
                    cands.append((float(scores[col]), parent.body + (tok,), parent))
        n_scored = len(cands)

        two_step = use_isf and isf_applies(config, t, is_final=False)
        n_isf = 0
        if two_step:
            if config.per_parent_prune:
                first = []
                width = len(cands) // len(live)
                for i in range(len(live)):
                    first.extend(heapq.nsmallest(beam, cands[i * width:(i + 1) * width], key=_rank_key))
            else:
                first = heapq.nsmallest(min(beam * beam, len(cands)), cands, key=_rank_key)
            rescored = []
            # batch over the survivors; each entry is independent of the others
            for item, (delta, book, evaluated) in zip(first, map(partial(_isf_for, blm, config, t), first)):
                n_isf += evaluated
                rescored.append(_apply_isf(config, item, delta, book))
            selected = heapq.nsmallest(beam, rescored, key=_rank_key)
        else:
            selected = [
                (score, body, parent, parent.blm_book, parent.isf_total)
                for score, body, parent in heapq.nsmallest(beam, cands, key=_rank_key)
            ]
            if use_isf and isf_applies(config, t, is_final=True):
                post = []
                for item in selected:
                    if item[1][-1] == EOS_ID:
                        delta, book, evaluated = _isf_for(blm, config, t, item[:3])
                        n_isf += evaluated
                        item = _apply_isf(config, item[:3], delta, book)
                    post.append(item)
                selected = post

        live = []
        n_ended = 0
        for score, body, parent, book, isf_total in selected:
            if body[-1] == EOS_ID:
                finished.append(Hypothesis(body[:-1], score, book, isf_total, ended=True))
                n_ended += 1
            else:
                live.append(Hypothesis(body, score, book, isf_total))
        stats.candidates_scored.append(n_scored)
        stats.isf_evaluations.append(n_isf)
        stats.ended.append(n_ended)

    if not finished:
        raise DecodeError("no hypothesis reached </s>")
    finished.sort(key=lambda h: (-h.total_score, h.body))
    return DecodeResult(finished, stats)


def _isf_for(blm, config, t, cand):
    """Backward-LM term for one candidate: (delta, new book, evaluations spent)."""
    _, body, parent = cand
    is_final = body[-1] == EOS_ID
    if not isf_applies(config, t, is_final):
        return 0.0, parent.blm_book, 0
    scored = body[:-1] if is_final else body
    book = parent.blm_book
    if book.last_step == len(scored):
        # already scored at the previous step; the substitution is a no-op
        return 0.0, book, 0
    delta, book = isf_delta(blm, scored, book)
    return delta, book, 1


def _apply_isf(config, cand, delta, book):
    score, body, parent = cand[:3]
    if book is parent.blm_book:
        return (score, body, parent, book, parent.isf_total)
    term = config.beta * delta
    return (score + term, body, parent, book, parent.isf_total + term)


def rescore_total(
    body: Sequence[int],
    grid: PosteriorGrid,
    flm: NGramLM,
    blm: Optional[NGramLM],
    config: FusionConfig,
) -> float:
    """Recompute the total score of a finished hypothesis from scratch.

    The backward-LM part is ``beta * (S(w_1..w_k) - S(empty))`` where ``k``
    is the last length at which the schedule applied the backward LM.
    """
    body = tuple(body)
    total = 0.0
    history = [SOS_ID]
    for t, tok in enumerate(body + (EOS_ID,), start=1):
        total += step_score(config, dec_logprob(grid, t, tok, history[1:]), lm_logprob(flm, tok, history))
        history.append(tok)
    if not config.isf_enabled:
        return total
    n = len(body)
    for step in range(n + 1, 0, -1):
        if isf_applies(config, step, is_final=step == n + 1):
            k = min(step, n)
            start = backward_sequence_score(blm, ())
            return total + config.beta * (backward_sequence_score(blm, body[:k]) - start)
    return total

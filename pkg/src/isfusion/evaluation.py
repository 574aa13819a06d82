"""WER scoring and the desk-scale experiment harness.

A *task* bundles a vocabulary, the three language models (forward, backward,
partial-aware backward) and a test set of synthetic utterances. Everything is
derived from a single integer seed.
"""

import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from isfusion.acoustic import DEFAULT_JITTER, PosteriorGrid, synth_grid
from isfusion.corpus import MarkovSource, make_partial_corpus, reverse_corpus
from isfusion.decoder import DecodeResult, beam_search
from isfusion.errors import ConfigError, IsfError
from isfusion.fusion import INF, FusionConfig
from isfusion.ngram import NGramLM, train_ngram
from isfusion.vocab import Vocabulary, build_vocabulary


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.reference_length

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_length + other.reference_length,
        )


def edit_distance_wer(reference: Sequence, hypothesis: Sequence) -> WerReport:
    """Levenshtein alignment of two token sequences.

    Among minimum-cost alignments the backtrace prefers substitution (or
    match), then deletion, then insertion.
    """
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ConfigError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(
                d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                d[i - 1, j] + 1,
                d[i, j - 1] + 1,
            )
    i, j = n, m
    sub = dele = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerReport(int(sub), dele, ins, n)


def join_subwords(tokens: Sequence[str], marker: str = "@@") -> List[str]:
    """Merge pieces ending in ``marker`` with the piece that follows.

    ``["ab@@", "c", "d"]`` becomes ``["abc", "d"]``. A dangling marker on the
    last piece is dropped.
    """
    words: List[str] = []
    buf = ""
    for tok in tokens:
        if tok.endswith(marker):
            buf += tok[: -len(marker)]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        words.append(buf)
    return words


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    reference: Tuple[int, ...]
    grid: PosteriorGrid


@dataclass(frozen=True)
class Method:
    """A named decoding setup; ``blm`` selects which backward model to fuse."""

    name: str
    config: FusionConfig
    blm: Optional[str] = None


@dataclass
class MethodResult:
    name: str
    config: FusionConfig
    blm: Optional[str]
    utterance_ids: List[str]
    hypotheses: List[Tuple[int, ...]]
    scores: List[float]
    reports: List[WerReport]
    stats: Dict[str, int]

    @property
    def total(self) -> WerReport:
        out = WerReport(0, 0, 0, 0)
        for r in self.reports:
            out = out + r
        return out

    @property
    def wer(self) -> float:
        return self.total.wer

    @property
    def utterance_wers(self) -> List[float]:
        return [r.wer for r in self.reports]


@dataclass
class SweepResult:
    rows: List[MethodResult] = field(default_factory=list)

    def __getitem__(self, name: str) -> MethodResult:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def wers(self) -> Dict[str, float]:
        return {row.name: row.wer for row in self.rows}

    def deltas(self) -> Dict[Tuple[str, str], float]:
        """WER(a) - WER(b) for every ordered pair of rows."""
        return {(a.name, b.name): a.wer - b.wer for a in self.rows for b in self.rows if a is not b}

    def to_tsv(self) -> str:
        lines = ["method\tblm\talpha\tbeta\tgamma\tbeam\tinterval\tlimit\tpost\twer\tsub\tdel\tins\tref_tokens\tisf_evaluations"]
        for row in self.rows:
            c = row.config.to_dict()
            t = row.total
            lines.append(
                "\t".join(
                    [
                        row.name,
                        row.blm or "-",
                        c["alpha"], c["beta"], c["gamma"], c["beam"], c["interval"], c["limit"], c["post_processing"],
                        f"{row.wer:.4f}",
                        str(t.substitutions), str(t.deletions), str(t.insertions), str(t.reference_length),
                        str(row.stats["isf_evaluations"]),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def hypotheses_tsv(self) -> str:
        lines = []
        for row in self.rows:
            for uid, hyp, score in zip(row.utterance_ids, row.hypotheses, row.scores):
                lines.append(f"{row.name}\t{uid}\t{score!r}\t{' '.join(map(str, hyp))}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = []
        for row in self.rows:
            payload.append(
                {
                    "method": row.name,
                    "blm": row.blm,
                    "config": row.config.to_dict(),
                    "wer": row.wer,
                    "utterance_wers": row.utterance_wers,
                    "stats": row.stats,
                }
            )
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# Worker-process state for utterance-parallel decoding. Set once per process
# by the pool initializer so models are not re-pickled per task.
_WORKER: Dict[str, object] = {}


def _init_worker(models, methods):
    _WORKER["models"] = models
    _WORKER["methods"] = methods


def _decode_one(args):
    method_idx, utt = args
    return _decode(_WORKER["models"], _WORKER["methods"][method_idx], utt)


def _decode(models: Dict[str, NGramLM], method: Method, utt: Utterance):
    blm = models[method.blm] if method.blm else None
    config = method.config
    if blm is None and config.isf_enabled:
        config = config.replace(isf_enabled=False)
    try:
        res: DecodeResult = beam_search(utt.grid, models["flm"], blm, config)
    except IsfError as exc:
        raise type(exc)(f"utterance {utt.utt_id}: {exc}") from exc
    best = res.best
    return best.body, best.total_score, edit_distance_wer(utt.reference, best.body), res.stats.totals()


def run_method_comparison(
    test_set: Sequence[Utterance],
    models: Dict[str, NGramLM],
    methods: Sequence[Method],
    jobs: int = 1,
) -> SweepResult:
    """Decode every utterance under every method.

    Results do not depend on ``jobs``: work items are mapped in a fixed order
    and gathered in that same order.
    """
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError("method names must be unique")
    for m in methods:
        if m.blm is not None and m.blm not in models:
            raise ConfigError(f"method {m.name}: unknown backward model {m.blm!r}")
    work = [(i, utt) for i in range(len(methods)) for utt in test_set]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(models, list(methods))) as ex:
            outputs = list(ex.map(_decode_one, work, chunksize=max(1, len(work) // (4 * jobs))))
    else:
        outputs = [_decode(models, methods[i], utt) for i, utt in work]

    result = SweepResult()
    n = len(test_set)
    for i, method in enumerate(methods):
        chunk = outputs[i * n:(i + 1) * n]
        stats: Dict[str, int] = {}
        for _, _, _, s in chunk:
            for k, v in s.items():
                stats[k] = stats.get(k, 0) + v
        result.rows.append(
            MethodResult(
                name=method.name,
                config=method.config,
                blm=method.blm,
                utterance_ids=[u.utt_id for u in test_set],
                hypotheses=[c[0] for c in chunk],
                scores=[c[1] for c in chunk],
                reports=[c[2] for c in chunk],
                stats=stats,
            )
        )
    return result


def _decode_job(job):
    grid, flm, blm, config = job
    return beam_search(grid, flm, blm, config)


def decode_many(jobs_list: Sequence[Tuple], jobs: int = 1) -> List[DecodeResult]:
    """Run ``beam_search(grid, flm, blm, config)`` for each tuple, results in input order."""
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_decode_job, jobs_list, chunksize=max(1, len(jobs_list) // (4 * jobs))))
    return [_decode_job(j) for j in jobs_list]


def length_sweep_methods(base: Method, limits: Sequence[float]) -> List[Method]:
    if base.config.interval != 1:
        raise ConfigError("length sweeps are defined for interval 1")
    out = []
    values = list(dict.fromkeys(list(limits) + [INF]))
    for post in (True, False):
        for limit in values:
            label = "inf" if limit == INF else str(int(limit))
            out.append(
                Method(
                    f"{base.name} L={label}{'' if post else ' no-post'}",
                    base.config.replace(limit=limit, post_processing=post),
                    base.blm,
                )
            )
    return out


def run_length_sweep(
    test_set: Sequence[Utterance],
    models: Dict[str, NGramLM],
    base: Method,
    limits: Sequence[float],
    jobs: int = 1,
) -> SweepResult:
    """One row per limit (plus unlimited), with and without post-processing."""
    return run_method_comparison(test_set, models, length_sweep_methods(base, limits), jobs=jobs)


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of a synthetic recognition task."""

    seed: int = 0
    n_words: int = 40
    fanout: int = 8
    leak: float = 0.2
    train_sentences: int = 20000
    test_utterances: int = 200
    eps: float = 0.4
    spread: int = 3
    jitter: float = DEFAULT_JITTER
    order: int = 3
    lambdas: Tuple[float, ...] = (0.05, 0.3, 0.6)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class Task:
    spec: TaskSpec
    vocab: Vocabulary
    models: Dict[str, NGramLM]
    train: List[List[int]]
    test_set: List[Utterance]


def build_task(spec: TaskSpec, models: Sequence[str] = ("flm", "blm", "pblm")) -> Task:
    """Sample text, train the requested LMs, and synthesize test grids.

    The text source, training text, test references and grid noise all use
    separate streams derived from ``spec.seed``.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    src_seed, train_seed, test_seed, grid_seed = (int(s.generate_state(1)[0]) for s in seeds)
    source = MarkovSource(spec.n_words, seed=src_seed, fanout=spec.fanout, leak=spec.leak)
    train_text = source.sample(spec.train_sentences, seed=train_seed)
    vocab = build_vocabulary(train_text, spec.n_words)
    train = [vocab.encode(s) for s in train_text]
    trained = {}
    if "flm" in models:
        trained["flm"] = train_ngram(train, spec.order, spec.lambdas, "fwd", vocab)
    if "blm" in models:
        trained["blm"] = train_ngram(reverse_corpus(train), spec.order, spec.lambdas, "bwd", vocab)
    if "pblm" in models:
        trained["pblm"] = train_ngram(make_partial_corpus(train), spec.order, spec.lambdas, "bwd", vocab)
    test_text = source.sample(spec.test_utterances, seed=test_seed)
    test_set = []
    for i, sent in enumerate(test_text):
        ref = tuple(vocab.encode(sent))
        grid = synth_grid(ref, spec.eps, spec.spread, [grid_seed, i], len(vocab), vocab.digest, jitter=spec.jitter)
        test_set.append(Utterance(f"utt{i:05d}", ref, grid))
    return Task(spec, vocab, trained, train, test_set)


def sign_test(differences: Sequence[float]) -> Tuple[int, int, float]:
    """Two-sided exact sign test; returns (positives, negatives, p-value). Zeros are dropped."""
    pos = sum(1 for d in differences if d > 0)
    neg = sum(1 for d in differences if d < 0)
    n = pos + neg
    if n == 0:
        return 0, 0, 1.0
    k = min(pos, neg)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n
    return pos, neg, min(1.0, 2 * tail)


def mean(values: Sequence[float]) -> float:
    return statistics.fmean(values)

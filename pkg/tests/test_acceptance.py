"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The slow ones (8 to 12) share synthetic tasks built once per session.
"""

import itertools
import math
import time
from functools import partial

import numpy as np
import pytest

from conftest import make_vocab, random_models, record_criterion
from oracles import all_bodies, brute_prob, fused_total
from isfusion.acoustic import from_probabilities, synth_grid, uniform_grid
from isfusion.corpus import corpus_stats, make_partial_corpus, reverse_corpus
from isfusion.decoder import beam_search, rescore_total
from isfusion.evaluation import (
    Method,
    TaskSpec,
    build_task,
    decode_many,
    length_sweep_methods,
    mean,
    run_method_comparison,
    sign_test,
)
from isfusion.fusion import INF, FusionConfig, backward_sequence_score, initial_book
from isfusion.ngram import lm_logprob, perplexity, train_ngram

N_SEEDS = 5
SCHEDULES = list(itertools.product([1, 2, 5, INF], [5, INF], [True, False]))

# |WER(L = half mean length) - WER(L = inf)| with post-processing, mean over
# seeds 0..4 of the default task; the first run measured 1.0901.
FROZEN_HALF_LENGTH_GAP = 1.10


def _serialize(results):
    lines = []
    for res in results:
        for h in res.hypotheses:
            lines.append(f"{h.body}\t{h.total_score.hex()}\t{h.isf_total.hex()}\t{h.blm_book}")
        lines.append(repr(res.stats.to_dict()))
    return "\n".join(lines).encode()


# --------------------------------------------------------------------------
# criterion 1 and its determinism re-run


def _accounting_jobs():
    vocab = make_vocab(19)  # V = 20
    rng = np.random.default_rng(2024)
    model_sets = [random_models(vocab, seed=s, n_sentences=80) for s in range(10)]
    jobs = []
    for i in range(100):
        _, flm, blm, pblm = model_sets[i % 10]
        ref = [int(x) for x in rng.integers(3, len(vocab), size=rng.integers(3, 13))]
        grid = synth_grid(ref, 0.4, 3, [7, i], len(vocab), vocab.digest, slack=15 - len(ref))
        interval, limit, post = SCHEDULES[i % len(SCHEDULES)]
        config = FusionConfig(
            float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), float(rng.uniform(0, 2)),
            beam=5, interval=interval, limit=limit, post_processing=post,
        )
        jobs.append((grid, flm, pblm if i % 2 else blm, config))
    return jobs


@pytest.fixture(scope="module")
def accounting():
    jobs = _accounting_jobs()
    start = time.perf_counter()
    results = decode_many(jobs, jobs=1)
    worst = 0.0
    n_hyps = 0
    for (grid, flm, blm, config), res in zip(jobs, results):
        for h in res.hypotheses:
            worst = max(worst, abs(h.total_score - rescore_total(h.body, grid, flm, blm, config)))
            n_hyps += 1
    return jobs, results, worst, n_hyps, time.perf_counter() - start


def test_01_score_accounting(accounting):
    jobs, _, worst, n_hyps, elapsed = accounting
    # V = 20 ordinary-plus-unk tokens, so 22 ids with sos and eos
    assert all(j[3].beam == 5 and j[0].max_steps == 15 and j[1].n_ids == 22 for j in jobs)
    ok = worst < 1e-9 and elapsed < 30.0
    record_criterion(1, "score accounting", ok, f"(max |diff| {worst:.2e} over {n_hyps} hyps, {elapsed:.1f}s)")
    assert ok


# --------------------------------------------------------------------------
# criterion 2


def _exhaustive_instance(i, rng):
    vocab = make_vocab(3)  # V = 4
    if i % 10 == 9:
        # uniform everything: many exact ties, resolved by body order
        flm = train_ngram([[3, 4]], 2, [0.0, 0.0], "fwd", vocab)
        blm = train_ngram([[4, 3]], 2, [0.0, 0.0], "bwd", vocab)
        corpus = None
        grid = uniform_grid(3, len(vocab), vocab.digest)
    else:
        corpus, flm, blm, _ = random_models(vocab, seed=100 + i, n_sentences=12)
        prob = rng.dirichlet(np.full(len(vocab), 0.7), size=3) + 1e-6
        grid = from_probabilities(prob, vocab.digest)
    interval, limit, post = SCHEDULES[i % len(SCHEDULES)]
    gamma = 6.0 if i % 10 == 9 else float(rng.uniform(0, 1))
    config = FusionConfig(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), gamma, beam=125,
                          interval=interval, limit=limit, post_processing=post)
    return vocab, corpus, flm, blm, grid, config


def _oracle_best(vocab, corpus, flm, blm, grid, config):
    if corpus is None:
        def fprob(tok, hist):
            return 1.0 / (len(vocab) - 1)
        bprob = fprob
    else:
        fprob = partial(brute_prob, corpus, "forward", flm.order, flm.lambdas, len(vocab))
        bprob = partial(brute_prob, [s[::-1] for s in corpus], "backward", blm.order, blm.lambdas, len(vocab))
    best = None
    for body in all_bodies(range(2, len(vocab)), grid.max_steps - 1):
        s = fused_total(body, grid.table, fprob, bprob, config.alpha, config.beta, config.gamma,
                        config.interval, config.limit, config.post_processing)
        key = (-s, tuple(body))
        if best is None or key < best:
            best = key
    return best[1], -best[0]


def test_02_exhaustive_search():
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    mismatches = 0
    ties = 0
    for i in range(50):
        vocab, corpus, flm, blm, grid, config = _exhaustive_instance(i, rng)
        body, score = _oracle_best(vocab, corpus, flm, blm, grid, config)
        res = beam_search(grid, flm, blm, config)
        ties += sum(h.total_score == res.best.total_score for h in res.hypotheses) > 1
        if res.best.body != body or abs(res.best.total_score - score) > 1e-9:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    record_criterion(2, "exhaustive-search equivalence", ok, f"({mismatches}/50 mismatches, {ties} tied instances, {elapsed:.1f}s)")
    assert ok


# --------------------------------------------------------------------------
# criteria 3 to 5


def _small_decodes(n, seed):
    vocab = make_vocab(11)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        _, flm, blm, pblm = random_models(vocab, seed=seed + i, n_sentences=40)
        ref = [int(x) for x in rng.integers(3, len(vocab), size=rng.integers(3, 9))]
        grid = synth_grid(ref, 0.4, 3, [seed, i], len(vocab), vocab.digest, slack=4)
        out.append((grid, flm, pblm if i % 2 else blm))
    return out


def test_03_telescoping():
    worst = 0.0
    checked = 0
    for grid, flm, blm in _small_decodes(30, 300):
        config = FusionConfig(0.5, 0.8, 0.3, beam=4, interval=1)
        init = initial_book(blm).last_score
        for h in beam_search(grid, flm, blm, config).hypotheses:
            if checked == 100:
                break
            worst = max(worst, abs(h.isf_total - config.beta * (backward_sequence_score(blm, h.body) - init)))
            checked += 1
    ok = checked == 100 and worst < 1e-9
    record_criterion(3, "telescoping", ok, f"(max |diff| {worst:.2e} over {checked} hyps)")
    assert ok


def test_04_zero_beta_is_noop():
    differing = 0
    for k, (grid, flm, blm) in enumerate(_small_decodes(50, 400)):
        interval, limit, post = SCHEDULES[k % len(SCHEDULES)]
        config = FusionConfig(0.6, 0.0, 0.4, beam=5, interval=interval, limit=limit, post_processing=post)
        on = beam_search(grid, flm, blm, config)
        off = beam_search(grid, flm, None, config.replace(isf_enabled=False))
        a = [(h.body, h.total_score.hex(), h.isf_total.hex(), h.ended) for h in on.hypotheses]
        b = [(h.body, h.total_score.hex(), h.isf_total.hex(), h.ended) for h in off.hypotheses]
        same_stats = on.stats.candidates_scored == off.stats.candidates_scored and on.stats.ended == off.stats.ended
        differing += not (a == b and same_stats)
    ok = differing == 0
    record_criterion(4, "beta=0 no-op", ok, f"({differing}/50 decodes differ)")
    assert ok


def test_05_infinite_interval_equivalence():
    differing = 0
    for grid, flm, blm in _small_decodes(50, 500):
        config = FusionConfig(0.5, 0.7, 0.3, beam=5, interval=INF)
        fused = beam_search(grid, flm, blm, config)
        sf = beam_search(grid, flm, None, config.replace(isf_enabled=False))
        init = initial_book(blm).last_score
        resorted = sorted(
            ((h.total_score + config.beta * (backward_sequence_score(blm, h.body) - init), h.body) for h in sf.hypotheses),
            key=lambda x: (-x[0], x[1]),
        )
        same = [h.body for h in fused.hypotheses] == [b for _, b in resorted] and all(
            abs(h.total_score - s) < 1e-12 for h, (s, _) in zip(fused.hypotheses, resorted)
        )
        differing += not same
    ok = differing == 0
    record_criterion(5, "I=inf equivalence", ok, f"({differing}/50 decodes differ)")
    assert ok


# --------------------------------------------------------------------------
# criteria 6 and 7


def test_06_normalization():
    task = build_task(TaskSpec(seed=0, train_sentences=3000, test_utterances=1))
    rng = np.random.default_rng(6)
    worst = 0.0
    for lm in task.models.values():
        support = [w for w in range(lm.n_ids) if w != lm.start_id]
        for _ in range(1000):
            ctx = [lm.start_id] + [int(x) for x in rng.integers(2, lm.n_ids, size=rng.integers(0, 4))]
            total = math.fsum(math.exp(lm_logprob(lm, w, ctx)) for w in support)
            worst = max(worst, abs(total - 1.0))
    vocab = task.vocab
    uniform = train_ngram(task.train[:50], 3, [0.0, 0.0, 0.0], "fwd", vocab)
    ppl = perplexity(uniform, task.train[50:150])
    ppl_ok = abs(ppl - (vocab.size + 1)) < 1e-9
    ok = worst < 1e-9 and ppl_ok
    record_criterion(6, "LM normalization", ok, f"(max |sum-1| {worst:.1e}; uniform ppl {ppl!r} vs V+1={vocab.size + 1})")
    assert ok


def test_07_pblm_arithmetic():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(20):
        corpus = [list(rng.integers(3, 100, size=rng.integers(1, 40))) for _ in range(rng.integers(1, 200))]
        stats_in = corpus_stats(corpus)
        stats_out = corpus_stats(make_partial_corpus(corpus))
        expected_tokens = sum(len(s) * (len(s) + 1) // 2 for s in corpus)
        bad += stats_out.sentence_count != stats_in.token_count or stats_out.token_count != expected_tokens
    ok = bad == 0
    record_criterion(7, "PBLM corpus arithmetic", ok, f"({bad}/20 corpora off)")
    assert ok


# --------------------------------------------------------------------------
# criterion 8


@pytest.mark.slow
def test_08_perplexity_direction():
    start = time.perf_counter()
    wins = 0
    rows = []
    for seed in range(N_SEEDS):
        task = build_task(TaskSpec(seed=seed, train_sentences=50000, test_utterances=1000), models=("blm", "pblm"))
        held = [list(u.reference) for u in task.test_set]
        partial_set = list(make_partial_corpus(held))
        complete = list(reverse_corpus(held))
        m = task.models
        p_part = (perplexity(m["blm"], partial_set), perplexity(m["pblm"], partial_set))
        p_comp = (perplexity(m["blm"], complete), perplexity(m["pblm"], complete))
        good = p_part[1] < p_part[0] and p_comp[0] <= p_comp[1] + 0.5
        wins += good
        rows.append(f"s{seed}: partial {p_part[0]:.2f}/{p_part[1]:.2f} complete {p_comp[0]:.2f}/{p_comp[1]:.2f}")
    elapsed = time.perf_counter() - start
    ok = wins >= 4 and elapsed < 120.0
    record_criterion(8, "perplexity direction", ok, f"({wins}/5 seeds, {elapsed:.0f}s; BLM/PBLM {'; '.join(rows)})")
    assert ok


# --------------------------------------------------------------------------
# criteria 9 to 12 share these runs

TABLE = [
    Method("0", FusionConfig(beam=10, isf_enabled=False)),
    Method("1", FusionConfig(0.5, 0.0, 0.0, beam=10, isf_enabled=False)),
    Method("12", FusionConfig(0.5, 0.5, 0.0, beam=10, interval=1), "pblm"),
    Method("13", FusionConfig(0.5, 0.5, 0.0, beam=10, interval=2), "pblm"),
    Method("16", FusionConfig(0.5, 0.5, 0.0, beam=10, interval=INF), "pblm"),
]


@pytest.fixture(scope="module")
def table_runs():
    start = time.perf_counter()
    tasks = [build_task(TaskSpec(seed=s)) for s in range(N_SEEDS)]
    results = [run_method_comparison(t.test_set, t.models, TABLE, jobs=1) for t in tasks]
    return tasks, results, time.perf_counter() - start


@pytest.mark.slow
def test_09_method_table_direction(table_runs):
    _, results, elapsed = table_runs
    w = {m.name: [r[m.name].wer for r in results] for m in TABLE}
    mw = {k: mean(v) for k, v in w.items()}
    combined = min(mw["12"], mw["13"])
    ordering = mw["0"] > mw["1"] >= max(mw["12"], mw["13"])
    beats_post_only = mw["12"] < mw["16"] and mw["13"] < mw["16"]
    tests = {
        "1<0": sign_test([a - b for a, b in zip(w["0"], w["1"])]),
        "12<1": sign_test([a - b for a, b in zip(w["1"], w["12"])]),
        "13<16": sign_test([a - b for a, b in zip(w["16"], w["13"])]),
    }
    ok = ordering and beats_post_only and elapsed < 300.0
    detail = (
        "(mean WER " + ", ".join(f"{k}={v:.2f}" for k, v in mw.items())
        + f"; best combined {combined:.2f}; sign tests "
        + ", ".join(f"{k} {p}+/{n}- p={pv:.3f}" for k, (p, n, pv) in tests.items())
        + f"; build and decode {elapsed:.0f}s)"
    )
    record_criterion(9, "method table direction", ok, detail)
    assert ok


@pytest.fixture(scope="module")
def length_runs(table_runs):
    tasks, _, _ = table_runs
    avg = mean([corpus_stats([u.reference for u in t.test_set]).average_length for t in tasks])
    half = max(1, round(avg / 2))
    methods = length_sweep_methods(TABLE[2], sorted({half, 10}))
    return half, [run_method_comparison(t.test_set, t.models, methods) for t in tasks]


@pytest.mark.slow
def test_10_length_limit_direction(length_runs):
    half, runs = length_runs
    m = lambda name: mean([r[name].wer for r in runs])  # noqa: E731
    no_post_ok = m("12 L=inf no-post") <= m("12 L=10 no-post")
    gap = abs(m(f"12 L={half}") - m("12 L=inf"))
    ok = no_post_ok and gap <= FROZEN_HALF_LENGTH_GAP
    detail = (
        f"(no-post L=inf {m('12 L=inf no-post'):.2f} vs L=10 {m('12 L=10 no-post'):.2f}; "
        f"post L={half} vs inf gap {gap:.4f}, frozen threshold {FROZEN_HALF_LENGTH_GAP})"
    )
    record_criterion(10, "length-limit direction", ok, detail)
    assert ok


@pytest.mark.slow
def test_11_interval_work(table_runs):
    tasks, results, _ = table_runs
    task = tasks[0]
    i5 = run_method_comparison(task.test_set, task.models, [Method("14", TABLE[2].config.replace(interval=5), "pblm")])
    n1 = results[0]["12"].stats["isf_evaluations"]
    n5 = i5["14"].stats["isf_evaluations"]
    ok = n5 <= n1 / 4
    record_criterion(11, "ISF work accounting", ok, f"(I=5 {n5} vs I=1 {n1}, ratio {n5 / n1:.3f})")
    assert ok


@pytest.mark.slow
def test_12_parallel_determinism(accounting, table_runs):
    jobs, serial, _, _, _ = accounting
    same_decodes = _serialize(serial) == _serialize(decode_many(jobs, jobs=8))
    tasks, results, _ = table_runs
    same_tables = True
    for task, res in zip(tasks, results):
        par = run_method_comparison(task.test_set, task.models, TABLE, jobs=8)
        same_tables &= (res.to_tsv(), res.hypotheses_tsv(), res.to_json()) == (par.to_tsv(), par.hypotheses_tsv(), par.to_json())
    ok = same_decodes and same_tables
    record_criterion(12, "jobs=1 vs jobs=8 determinism", ok, f"(criterion 1 decodes {'same' if same_decodes else 'DIFFER'}, criterion 9 tables {'same' if same_tables else 'DIFFER'})")
    assert ok

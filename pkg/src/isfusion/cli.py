"""Command-line entry point.

Subcommands::

    train-lm       train an interpolated n-gram LM on whitespace-tokenized text
    gen-pblm-data  write reversed (optionally partial) training text for backward LMs
    ppl            perplexity of an LM on a text file
    synth          synthesize posterior grids from reference text
    decode         beam search over a directory of grids
    score          WER of hypothesis text against reference text
    sweep          run a method table over several synthetic tasks

Exit status is 0 on success, 1 on usage errors and 2 on data or validation
errors. Every subcommand that receives ``--out-dir`` writes ``manifest.json``
there.
"""

import argparse
import configparser
import datetime
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

from isfusion import __version__
from isfusion.acoustic import DEFAULT_JITTER, DEFAULT_SLACK, load_grid, save_grid, synth_grid
from isfusion.corpus import read_text, write_partial_corpus, write_text
from isfusion.errors import ConfigError, IsfError
from isfusion.evaluation import (
    Method,
    TaskSpec,
    build_task,
    decode_many,
    edit_distance_wer,
    join_subwords,
    mean,
    run_length_sweep,
    run_method_comparison,
    sign_test,
)
from isfusion.fusion import FusionConfig, config_from_mapping, env_overrides, load_config
from isfusion.ngram import corpus_logprob, load_lm, parse_orientation, save_lm, train_ngram
from isfusion.vocab import build_vocabulary, load_vocabulary, save_vocabulary

log = logging.getLogger("isfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Everything needed to repeat a run: command, resolved settings, input hashes."""

    def __init__(self, subcommand: str, argv: List[str], seed: Optional[int]):
        self.data = {
            "subcommand": subcommand,
            "argv": list(argv),
            "seed": seed,
            "version": __version__,
            "config": {},
            "inputs": {},
            "outputs": {},
            "started": _now(),
        }

    def add_input(self, path):
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
        for p in files:
            self.data["inputs"][str(p)] = sha256_file(p)

    def set_config(self, **values):
        self.data["config"].update(values)

    def write(self, out_dir, outputs=()):
        for p in outputs:
            self.data["outputs"][str(p)] = sha256_file(p)
        self.data["finished"] = _now()
        target = Path(out_dir) / "manifest.json"
        target.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, Path):
        return str(value)
    return value


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def _key_value(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _sibling_vocab(path) -> Optional[Path]:
    candidate = Path(path).with_name("vocab.txt")
    return candidate if candidate.exists() else None


def _out_dir(args) -> Optional[Path]:
    if getattr(args, "out_dir", None) is None:
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_train_lm(args, manifest: RunManifest) -> List[Path]:
    text = read_text(args.text)
    manifest.add_input(args.text)
    out_dir = _out_dir(args)
    if args.out is None and out_dir is None:
        raise UsageError("train-lm needs --out or --out-dir")
    out = Path(args.out) if args.out else out_dir / "model.lm"
    outputs = [out]
    if args.vocab:
        vocab = load_vocabulary(args.vocab)
        manifest.add_input(args.vocab)
    else:
        vocab = build_vocabulary(text, args.vocab_size)
        vocab_path = out.with_name("vocab.txt")
        save_vocabulary(vocab, vocab_path)
        outputs.append(vocab_path)
    orientation = parse_orientation(args.orientation)
    lm = train_ngram([vocab.encode(s) for s in text], args.order, args.lambdas, orientation, vocab)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lm(lm, out)
    manifest.set_config(order=args.order, lambdas=list(args.lambdas), orientation=orientation, vocab_hash=vocab.digest)
    log.info("trained %s %d-gram on %d sentences -> %s", orientation, args.order, len(text), out)
    return outputs


def cmd_gen_pblm_data(args, manifest: RunManifest) -> List[Path]:
    manifest.add_input(args.input)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    stats = write_partial_corpus(args.input, args.output, reverse_only=args.reverse_only)
    manifest.set_config(reverse_only=args.reverse_only)
    print("sentences\ttokens\tavg_length")
    print(stats.as_row())
    return [Path(args.output)]


def cmd_ppl(args, manifest: RunManifest) -> List[Path]:
    lm = load_lm(args.lm)
    vocab_path = args.vocab or _sibling_vocab(args.lm)
    if vocab_path is None:
        raise UsageError("no --vocab given and no vocab.txt next to the model")
    vocab = load_vocabulary(vocab_path)
    if vocab.digest != lm.vocab_digest:
        raise ConfigError(f"vocabulary hash mismatch: lm {lm.vocab_digest} vs vocab {vocab.digest}")
    for p in (args.lm, vocab_path, args.data):
        manifest.add_input(p)
    data = [vocab.encode(s) for s in read_text(args.data)]
    if not data:
        raise ConfigError(f"{args.data}: no sentences")
    total, n = corpus_logprob(lm, data)
    ppl = math.exp(-total / n)
    tokens = n - len(data)
    print("# perplexity = exp(-logprob / predictions); predictions = tokens + one end symbol per sentence")
    print("sentences\ttokens\tpredictions\tlogprob\tppl")
    print(f"{len(data)}\t{tokens}\t{n}\t{total:.6f}\t{ppl:.6f}")
    manifest.set_config(sentences=len(data), predictions=n, ppl=ppl)
    return []


def cmd_synth(args, manifest: RunManifest) -> List[Path]:
    vocab = load_vocabulary(args.vocab)
    manifest.add_input(args.vocab)
    manifest.add_input(args.ref_file)
    refs = read_text(args.ref_file)
    out_dir = _out_dir(args)
    grid_dir = out_dir / "grids"
    grid_dir.mkdir(exist_ok=True)
    outputs = []
    names = []
    for i, sent in enumerate(refs):
        ids = vocab.encode(sent)
        grid = synth_grid(ids, args.eps, args.spread, [args.seed, i], len(vocab), vocab.digest, args.slack, args.jitter)
        path = grid_dir / f"utt{i:05d}.grid"
        save_grid(grid, path)
        outputs.append(path)
        names.append(path.stem)
    ref_path = out_dir / "ref.txt"
    write_text(refs, ref_path)
    (out_dir / "utt_ids.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    manifest.set_config(eps=args.eps, spread=args.spread, slack=args.slack, jitter=args.jitter, vocab_hash=vocab.digest)
    log.info("wrote %d grids to %s", len(outputs), grid_dir)
    return outputs + [ref_path, out_dir / "utt_ids.txt"]


def cmd_decode(args, manifest: RunManifest) -> List[Path]:
    grid_paths = sorted(Path(args.grids).glob("*.grid"))
    if not grid_paths:
        raise ConfigError(f"{args.grids}: no .grid files")
    grids = [load_grid(p) for p in grid_paths]
    flm = load_lm(args.flm)
    blm = load_lm(args.blm) if args.blm else None
    overrides = dict(args.set or [])
    config = load_config(args.config, overrides)
    if blm is None and config.isf_enabled:
        config = config.replace(isf_enabled=False)
        log.info("no backward LM given; decoding with the forward LM only")
    for name, lm in (("flm", flm), ("blm", blm)):
        if lm is None:
            continue
        for path, grid in zip(grid_paths, grids):
            if lm.vocab_digest != grid.vocab_digest:
                raise ConfigError(
                    f"vocabulary hash mismatch: {name} {args.flm if name == 'flm' else args.blm} has "
                    f"{lm.vocab_digest}, grid {path} has {grid.vocab_digest}"
                )
    vocab_path = args.vocab or _sibling_vocab(args.flm)
    vocab = load_vocabulary(vocab_path) if vocab_path else None
    for p in [args.grids, args.flm] + [x for x in (args.blm, args.config, vocab_path) if x]:
        manifest.add_input(p)
    manifest.set_config(fusion={k: _jsonable(v) for k, v in config.to_dict().items()}, nbest=args.nbest, env=env_overrides())

    results = decode_many([(g, flm, blm, config) for g in grids], jobs=args.jobs)

    out_dir = _out_dir(args)
    out = Path(args.out) if args.out else out_dir / "nbest.tsv"
    lines = ["utt_id\trank\tscore\ttext"]
    hyp_lines = []
    for path, res in zip(grid_paths, results):
        for rank, (body, score) in enumerate(res.nbest[: args.nbest], start=1):
            text = " ".join(vocab.decode(body)) if vocab else " ".join(map(str, body))
            lines.append(f"{path.stem}\t{rank}\t{score!r}\t{text}")
            if rank == 1:
                hyp_lines.append(text)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs = [out]
    hyp_path = out.with_name("hyp.txt")
    hyp_path.write_text("".join(h + "\n" for h in hyp_lines), encoding="utf-8")
    outputs.append(hyp_path)

    stats_path = Path(args.stats) if args.stats else (out_dir / "stats.json" if out_dir else None)
    if stats_path:
        per_utt = {p.stem: r.stats.totals() for p, r in zip(grid_paths, results)}
        totals: Dict[str, int] = {}
        for s in per_utt.values():
            for k, v in s.items():
                totals[k] = totals.get(k, 0) + v
        stats_path.write_text(json.dumps({"total": totals, "utterances": per_utt}, indent=2, sort_keys=True) + "\n")
        outputs.append(stats_path)
    return outputs


def cmd_score(args, manifest: RunManifest) -> List[Path]:
    manifest.add_input(args.ref)
    manifest.add_input(args.hyp)
    refs = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(refs) != len(hyps):
        raise ConfigError(f"{len(refs)} reference lines but {len(hyps)} hypothesis lines")
    total = None
    for i, (r, h) in enumerate(zip(refs, hyps), start=1):
        r_tok, h_tok = r.split(), h.split()
        if args.detokenize:
            r_tok, h_tok = join_subwords(r_tok), join_subwords(h_tok)
        if not r_tok:
            raise ConfigError(f"{args.ref}:{i}: empty reference")
        rep = edit_distance_wer(r_tok, h_tok)
        total = rep if total is None else total + rep
    if total is None:
        raise ConfigError(f"{args.ref}: no references")
    print("wer\tsub\tdel\tins\tref_tokens")
    print(f"{total.wer:.2f}\t{total.substitutions}\t{total.deletions}\t{total.insertions}\t{total.reference_length}")
    manifest.set_config(detokenize=args.detokenize, wer=total.wer)
    return []


_DATA_KEYS = {
    "n_words": int,
    "fanout": int,
    "leak": float,
    "train_sentences": int,
    "test_utterances": int,
    "eps": float,
    "spread": int,
    "jitter": float,
    "order": int,
    "lambdas": lambda s: tuple(_float_list(s)),
}


def read_sweep_spec(path):
    """Parse a sweep file.

    ``[data]`` holds ``seeds`` (how many tasks) and any :class:`TaskSpec`
    field; ``[defaults]`` holds fusion options shared by all methods; every
    ``[method N]`` section holds ``label``, optional ``blm`` and fusion
    options. An optional ``[length-sweep]`` names a ``base`` method and
    ``limits``.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"{path}: cannot read sweep spec")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    data = dict(cp["data"]) if cp.has_section("data") else {}
    n_seeds = int(data.pop("seeds", "1"))
    task_kwargs = {}
    for key, raw in data.items():
        if key not in _DATA_KEYS:
            raise ConfigError(f"{path}: unknown [data] key {key!r}")
        try:
            task_kwargs[key] = _DATA_KEYS[key](raw)
        except ValueError:
            raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from None
    defaults = config_from_mapping(dict(cp["defaults"])) if cp.has_section("defaults") else FusionConfig()
    methods, labels = [], {}
    for section in cp.sections():
        if not section.startswith("method "):
            continue
        number = section.split(None, 1)[1].strip()
        opts = dict(cp[section])
        labels[number] = opts.pop("label", number)
        blm = opts.pop("blm", "none")
        blm = None if blm == "none" else blm
        config = config_from_mapping(opts, defaults)
        if blm is None:
            config = config.replace(isf_enabled=False)
        methods.append(Method(number, config, blm))
    if not methods:
        raise ConfigError(f"{path}: no [method N] sections")
    sweep = None
    if cp.has_section("length-sweep"):
        s = cp["length-sweep"]
        base = s.get("base")
        if base not in labels:
            raise ConfigError(f"{path}: length-sweep base {base!r} is not a method")
        sweep = (base, [int(x) for x in s.get("limits", "").split()])
    return n_seeds, task_kwargs, methods, labels, sweep


def cmd_sweep(args, manifest: RunManifest) -> List[Path]:
    n_seeds, task_kwargs, methods, labels, sweep = read_sweep_spec(args.spec)
    manifest.add_input(args.spec)
    seeds = [args.seed + i for i in range(n_seeds)]
    out_dir = _out_dir(args)
    per_seed, sweeps, dumps = {}, {}, []
    for seed in seeds:
        spec = TaskSpec(seed=seed, **task_kwargs)
        log.info("seed %d: building task", seed)
        task = build_task(spec)
        res = run_method_comparison(task.test_set, task.models, methods, jobs=args.jobs)
        per_seed[seed] = res
        dumps.append({"seed": seed, "task": spec.to_dict(), "methods": json.loads(res.to_json())})
        if sweep:
            base = next(m for m in methods if m.name == sweep[0])
            sweeps[seed] = run_length_sweep(task.test_set, task.models, base, sweep[1], jobs=args.jobs)
            dumps[-1]["length_sweep"] = json.loads(sweeps[seed].to_json())

    header = ["no", "method", "blm", "interval", "limit", "post", "mean_wer"] + [f"wer_seed{s}" for s in seeds] + ["isf_evaluations"]
    rows = ["\t".join(header)]
    for m in methods:
        c = m.config.to_dict()
        wers = [per_seed[s][m.name].wer for s in seeds]
        isf = sum(per_seed[s][m.name].stats["isf_evaluations"] for s in seeds)
        interval = c["interval"] if m.config.isf_enabled else "-"
        rows.append("\t".join(
            [m.name, labels[m.name], m.blm or "-", interval, c["limit"], c["post_processing"], f"{mean(wers):.4f}"]
            + [f"{w:.4f}" for w in wers] + [str(isf)]
        ))
    table = out_dir / "results.tsv"
    table.write_text("\n".join(rows) + "\n", encoding="utf-8")
    outputs = [table]

    # sign tests of every method against the first one, over seeds
    ref = methods[0].name
    tests = ["method\tvs\tbetter\tworse\tp_value"]
    for m in methods[1:]:
        diffs = [per_seed[s][ref].wer - per_seed[s][m.name].wer for s in seeds]
        pos, neg, p = sign_test(diffs)
        tests.append(f"{m.name}\t{ref}\t{pos}\t{neg}\t{p:.4f}")
    sign_path = out_dir / "sign_tests.tsv"
    sign_path.write_text("\n".join(tests) + "\n", encoding="utf-8")
    outputs.append(sign_path)

    if sweep:
        names = [r.name for r in sweeps[seeds[0]].rows]
        lines = ["row\tmean_wer"] + [f"{n}\t{mean([sweeps[s][n].wer for s in seeds]):.4f}" for n in names]
        path = out_dir / "length_sweep.tsv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(path)

    hyps = out_dir / "hypotheses.tsv"
    hyps.write_text("".join(f"# seed {s}\n" + per_seed[s].hypotheses_tsv() for s in seeds), encoding="utf-8")
    outputs.append(hyps)
    js = out_dir / "results.json"
    js.write_text(json.dumps(dumps, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    outputs.append(js)
    manifest.set_config(seeds=seeds, task={k: _jsonable(v) for k, v in TaskSpec(**task_kwargs).to_dict().items() if k != "seed"})
    print(table.read_text(encoding="utf-8"), end="")
    return outputs


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="directory for outputs and manifest.json")
    common.add_argument("--seed", type=int, default=0, help="root seed for every random choice")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="isfusion", description="Shallow fusion with forward and backward n-gram LMs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-lm", parents=[common], help="train an n-gram LM")
    p.add_argument("--text", required=True, help="training text, one sentence per line, as the model reads it")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--lambdas", "--lambda", type=_float_list, default=[0.05, 0.3, 0.6], help="weights for orders 1..N")
    p.add_argument("--orientation", default="fwd", help="fwd or bwd (bwd expects reversed text)")
    p.add_argument("--vocab", help="existing vocabulary; built from --text when omitted")
    p.add_argument("--vocab-size", type=int, default=500)
    p.add_argument("--out", help="model path (default: OUT_DIR/model.lm)")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("gen-pblm-data", parents=[common], help="reverse text, with partial prefixes by default")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--reverse-only", action="store_true", help="only reverse sentences (normal backward LM data)")
    p.set_defaults(func=cmd_gen_pblm_data)

    p = sub.add_parser("ppl", parents=[common], help="perplexity of an LM on text")
    p.add_argument("--lm", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", help="default: vocab.txt next to the model")
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("synth", parents=[common], help="synthesize posterior grids")
    p.add_argument("--ref-file", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--eps", type=float, default=0.4)
    p.add_argument("--spread", type=int, default=3)
    p.add_argument("--slack", type=int, default=DEFAULT_SLACK)
    p.add_argument("--jitter", type=float, default=DEFAULT_JITTER)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("decode", parents=[common], help="beam search over grids")
    p.add_argument("--grids", required=True, help="directory of .grid files")
    p.add_argument("--flm", required=True)
    p.add_argument("--blm")
    p.add_argument("--config", help="flat key=value fusion config; ISF_* variables override it")
    p.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE", help="override one option")
    p.add_argument("--vocab", help="default: vocab.txt next to --flm")
    p.add_argument("--nbest", type=int, default=1)
    p.add_argument("--out", help="n-best TSV (default: OUT_DIR/nbest.tsv)")
    p.add_argument("--stats", help="decode statistics JSON (default: OUT_DIR/stats.json)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", parents=[common], help="WER of line-aligned hypothesis text")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--detokenize", action="store_true", help="join '@@'-marked pieces before scoring")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", parents=[common], help="method table over synthetic tasks")
    p.add_argument("--spec", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


_NEEDS_OUT_DIR = {"synth", "sweep"}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command in _NEEDS_OUT_DIR and not args.out_dir:
        parser.print_usage(sys.stderr)
        print(f"isfusion {args.command}: error: --out-dir is required", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1 or getattr(args, "nbest", 1) < 1:
        print(f"isfusion {args.command}: error: --jobs and --nbest must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(args.command, argv, args.seed)
    manifest.set_config(**{k: _jsonable(v) for k, v in vars(args).items() if k != "func" and not isinstance(v, list)})
    try:
        outputs = args.func(args, manifest)
    except UsageError as exc:
        print(f"isfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IsfError, OSError, ValueError) as exc:
        print(f"isfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = _out_dir(args)
    if out_dir is not None:
        manifest.write(out_dir, outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

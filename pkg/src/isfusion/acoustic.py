"""Posterior grids: a history-independent stand-in for an AED decoder.

Row ``t`` (1-based) of a grid is a log distribution over the forward
prediction support (every id except sos). The decoder reads the score of the
t-th output token from row t, whatever the hypothesis prefix is.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from isfusion.errors import ConfigError, ParseError, ValidationError
from isfusion.vocab import EOS_ID, SOS_ID, UNK_ID

FILE_MAGIC = "#isfusion-grid v1"
PROB_FLOOR = 1e-8
NORM_TOL = 1e-9
DEFAULT_SLACK = 10
# spread of the log-normal multiplier applied to every non-floor entry; at
# eps=0.4, spread=3 this makes an LM weight near 1 the best fixed weight
DEFAULT_JITTER = 1.2


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    table: np.ndarray  # (max_steps, n_ids), sos column is -inf
    vocab_digest: str
    reference: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.table.ndim != 2 or self.table.shape[0] < 1:
            raise ValidationError("grid needs at least one row")
        self.table.setflags(write=False)

    @property
    def max_steps(self) -> int:
        return self.table.shape[0]

    @property
    def n_ids(self) -> int:
        return self.table.shape[1]

    def row(self, step: int) -> np.ndarray:
        if not 1 <= step <= self.max_steps:
            raise IndexError(f"step {step} outside 1..{self.max_steps}")
        return self.table[step - 1]

    def __eq__(self, other):
        if not isinstance(other, PosteriorGrid):
            return NotImplemented
        return (
            self.vocab_digest == other.vocab_digest
            and self.reference == other.reference
            and self.table.shape == other.table.shape
            and np.array_equal(self.table, other.table)
        )


def dec_logprob(grid: PosteriorGrid, step: int, token: int, prefix: Sequence[int] = ()) -> float:
    """Decoder score of ``token`` at 1-based ``step``.

    ``prefix`` is accepted so a prefix-aware scorer can share the signature;
    a grid ignores it.
    """
    if token == SOS_ID:
        raise ConfigError("sos is never predicted")
    return float(grid.row(step)[token])


def validate_rows(table: np.ndarray, where="grid") -> None:
    for i, row in enumerate(table, start=1):
        if np.isfinite(row[SOS_ID]):
            raise ValidationError(f"{where}: row {i} assigns probability to sos")
        support = np.delete(row, SOS_ID)
        if not np.all(np.isfinite(support)):
            raise ValidationError(f"{where}: row {i} has non-finite log-probabilities")
        total = np.exp(support).sum()
        if abs(total - 1.0) > NORM_TOL:
            raise ValidationError(f"{where}: row {i} sums to {total!r}, not 1")


def from_probabilities(prob: np.ndarray, vocab_digest: str, reference=None) -> PosteriorGrid:
    """Build a grid from a (steps, n_ids) non-negative matrix; rows are renormalized."""
    prob = np.array(prob, dtype=np.float64)
    prob[:, SOS_ID] = 0.0
    prob /= prob.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        table = np.log(prob)
    return PosteriorGrid(table, vocab_digest, None if reference is None else tuple(reference))


def synth_grid(
    reference: Sequence[int],
    eps: float,
    spread: int,
    seed,
    n_ids: int,
    vocab_digest: str,
    slack: int = DEFAULT_SLACK,
    jitter: float = DEFAULT_JITTER,
) -> PosteriorGrid:
    """Noisy posterior grid around ``reference``.

    Row t targets ``reference[t-1]`` (eos once the reference is exhausted)
    with nominal mass ``1 - eps``; the remaining ``eps`` goes to ``spread``
    confusable ordinary tokens drawn at random per row. Every non-floor
    entry is then multiplied by ``exp(jitter * z)``, z ~ N(0, 1), so that a
    confusable occasionally outranks the target. All other ids get
    ``PROB_FLOOR`` before renormalization.
    """
    reference = tuple(int(x) for x in reference)
    if not reference:
        raise ConfigError("reference must be non-empty")
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"noise must lie in [0, 1), got {eps}")
    if spread < 1:
        raise ConfigError(f"confusion spread must be >= 1, got {spread}")
    rng = np.random.default_rng(seed)
    steps = len(reference) + slack
    ordinary = np.arange(UNK_ID + 1, n_ids)
    if len(ordinary) < 2:
        raise ConfigError("vocabulary too small for confusions")
    prob = np.full((steps, n_ids), PROB_FLOOR)
    for t in range(steps):
        target = reference[t] if t < len(reference) else EOS_ID
        pool = ordinary[ordinary != target]
        k = min(spread, len(pool))
        confus = rng.choice(pool, size=k, replace=False)
        noise = np.exp(jitter * rng.standard_normal(k + 1))
        prob[t, target] += (1.0 - eps) * noise[0]
        prob[t, confus] += (eps / k) * noise[1:]
    return from_probabilities(prob, vocab_digest, reference)


def uniform_grid(steps: int, n_ids: int, vocab_digest: str) -> PosteriorGrid:
    return from_probabilities(np.ones((steps, n_ids)), vocab_digest)


def save_grid(grid: PosteriorGrid, path) -> None:
    lines = [
        FILE_MAGIC,
        f"max_steps {grid.max_steps}",
        f"n_ids {grid.n_ids}",
        f"vocab_hash {grid.vocab_digest}",
    ]
    if grid.reference is not None:
        lines.append("reference " + " ".join(map(str, grid.reference)))
    lines.append("\\rows")
    for row in grid.table:
        lines.append(" ".join(repr(float(x)) for x in np.delete(row, SOS_ID)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_grid(path) -> PosteriorGrid:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != FILE_MAGIC:
        raise ParseError(f"missing header {FILE_MAGIC!r}", path, 1)
    header = {}
    lineno = 1
    for lineno, line in enumerate(text[1:], start=2):
        if line == "\\rows":
            break
        key, _, value = line.partition(" ")
        header[key] = value
    else:
        raise ParseError("missing \\rows section", path, lineno)
    try:
        steps = int(header["max_steps"])
        n_ids = int(header["n_ids"])
        digest = header["vocab_hash"]
        reference = tuple(int(x) for x in header["reference"].split()) if "reference" in header else None
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", path) from exc
    rows = text[lineno:]
    rows = [r for r in rows if r.strip()]
    if len(rows) != steps:
        raise ParseError(f"expected {steps} rows, found {len(rows)}", path)
    table = np.full((steps, n_ids), -np.inf)
    for i, line in enumerate(rows):
        try:
            values = [float(x) for x in line.split()]
        except ValueError:
            raise ParseError(f"row {i + 1}: non-numeric entry", path, lineno + 1 + i) from None
        if len(values) != n_ids - 1:
            raise ParseError(f"row {i + 1}: expected {n_ids - 1} values, got {len(values)}", path, lineno + 1 + i)
        table[i, 1:] = values
    validate_rows(table, where=str(path))
    return PosteriorGrid(table, digest, reference)

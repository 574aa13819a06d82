"""Score terms for shallow fusion (forward LM) and iterative shallow fusion (backward LM).

The per-token increment for extending a partial hypothesis ``w_1..w_{t-1}``
with ``w_t`` is::

    dec(w_t) + alpha * log P_flm(w_t | <s> w_1..w_{t-1})
             + beta * [S(w_1..w_t) - S(w_1..w_k)]
             + gamma

where ``S`` is the backward-LM score of a (partial) body read right to left
between a temporary ``</s>`` and ``<s>``, and ``k`` is the length at which
the backward score was last applied to this hypothesis. Replacing the old
backward score with the new one, rather than accumulating per-token terms,
is what keeps the total equal to ``beta * S(body)`` after every application.
"""

import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

from isfusion.errors import ConfigError, ParseError
from isfusion.ngram import BACKWARD, NGramLM, lm_logprob

INF = math.inf
ENV_PREFIX = "ISF_"


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    beam: int = 10
    interval: float = 1
    limit: float = INF
    post_processing: bool = True
    # False removes every backward-LM code path from the decoder
    isf_enabled: bool = True
    # first pruning keeps the best `beam` extensions of each live hypothesis
    per_parent_prune: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if int(self.beam) != self.beam or self.beam < 1:
            raise ConfigError(f"beam must be an integer >= 1, got {self.beam}")
        if self.interval != INF and (int(self.interval) != self.interval or self.interval < 1):
            raise ConfigError(f"interval must be an integer >= 1 or inf, got {self.interval}")
        if self.limit != INF and (int(self.limit) != self.limit or self.limit < 0):
            raise ConfigError(f"limit must be an integer >= 0 or inf, got {self.limit}")

    def replace(self, **changes) -> "FusionConfig":
        return FusionConfig(**{**asdict(self), **changes})

    def to_dict(self) -> Dict[str, str]:
        return {k: _format_value(v) for k, v in asdict(self).items()}


class BlmBookkeeping(NamedTuple):
    last_score: float
    last_step: int


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v == INF:
        return "inf"
    return str(v)


_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    if name in ("post_processing", "isf_enabled", "per_parent_prune"):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None
    try:
        if name in ("interval", "limit"):
            return INF if raw.lower() in ("inf", "infinity", "none") else int(raw)
        if name == "beam":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


_FIELDS = {f.name for f in fields(FusionConfig)}
_ALIASES = {"post": "post_processing", "I": "interval", "L": "limit", "B": "beam"}


def config_from_mapping(values: Mapping[str, str], base: Optional[FusionConfig] = None) -> FusionConfig:
    parsed = {}
    for key, raw in values.items():
        name = _ALIASES.get(key, key.replace("-", "_"))
        if name not in _FIELDS:
            raise ConfigError(f"unknown fusion option {key!r}")
        parsed[name] = _parse_value(name, raw)
    return (base or FusionConfig()).replace(**parsed)


def read_kv_file(path) -> Dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ParseError(f"expected key=value, got {line!r}", path, lineno)
            out[key.strip()] = value.strip()
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        k[len(ENV_PREFIX):].lower(): v
        for k, v in environ.items()
        if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in _FIELDS
    }


def load_config(path=None, overrides: Optional[Mapping[str, str]] = None, environ=None) -> FusionConfig:
    """File values, then ``ISF_*`` environment variables, then explicit overrides."""
    values: Dict[str, str] = {}
    if path is not None:
        values.update(read_kv_file(path))
    values.update(env_overrides(environ))
    values.update(overrides or {})
    return config_from_mapping(values)


def backward_sequence_score(blm: NGramLM, body: Sequence[int]) -> float:
    """log P_blm(</s> w_t .. w_1 <s>) for the body ``w_1..w_t``.

    Scoring runs right to left starting from a temporary ``</s>``; the start
    symbol itself contributes 0.
    """
    if blm.orientation != BACKWARD:
        raise ConfigError("backward_sequence_score needs a backward-oriented model")
    history = [blm.start_id]
    total = 0.0
    for tok in reversed(body):
        total += lm_logprob(blm, tok, history)
        history.append(tok)
    return total + lm_logprob(blm, blm.terminal_id, history)


def initial_book(blm: NGramLM) -> BlmBookkeeping:
    """Backward score of the empty hypothesis, i.e. log P(<s> | </s>), at step 0."""
    return BlmBookkeeping(backward_sequence_score(blm, ()), 0)


def isf_delta(blm: NGramLM, body: Sequence[int], book: BlmBookkeeping) -> Tuple[float, BlmBookkeeping]:
    """Unscaled backward-LM replacement term for ``body``.

    Returns the new backward score minus the one applied last time, and the
    updated bookkeeping. The caller multiplies by beta.
    """
    if book.last_step > len(body):
        raise ConfigError(f"bookkeeping step {book.last_step} beyond body length {len(body)}")
    score = backward_sequence_score(blm, body)
    return score - book.last_score, BlmBookkeeping(score, len(body))


def isf_applies(config: FusionConfig, step: int, is_final: bool) -> bool:
    """Whether the backward LM is (re)applied at ``step``.

    ``is_final`` marks an extension by the real ``</s>``; with post-processing
    on those are always rescored. Otherwise the step must be within the
    length limit and a multiple of the interval.
    """
    if is_final and config.post_processing:
        return True
    if config.interval == INF:
        return False
    return step <= config.limit and step % int(config.interval) == 0


def step_score(config: FusionConfig, dec_lp, flm_lp, isf_term=0.0):
    """Score increment for one emitted token; works on scalars and numpy arrays."""
    return dec_lp + config.alpha * flm_lp + isf_term + config.gamma

"""Closed token inventory shared by the language models, grids and decoder.

Ids are laid out so that the three special symbols always occupy the first
three slots::

    0: <s>    (sos)
    1: </s>   (eos)
    2: <unk>
    3..: ordinary tokens, most frequent first

Forward prediction support is every id except sos; backward prediction
support is every id except eos.
"""

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

from isfusion.errors import ConfigError, ParseError

SOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

SOS_ID = 0
EOS_ID = 1
UNK_ID = 2


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != (SOS, EOS, UNK):
            raise ConfigError(f"vocabulary must start with {SOS}, {EOS}, {UNK}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ConfigError("duplicate token strings in vocabulary")
        object.__setattr__(self, "_index", index)

    sos_id = SOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    @property
    def size(self) -> int:
        """V: ordinary tokens including unk, excluding sos and eos."""
        return len(self.tokens) - 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def lookup(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, text: Sequence[str]) -> List[int]:
        return encode(self, text)

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    @property
    def digest(self) -> str:
        """Short content hash used to detect model/grid vocabulary mismatches."""
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()[:16]


def build_vocabulary(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens of ``corpus``.

    Ties in frequency are broken by the token string so the result does not
    depend on corpus order. Special symbols occurring in the text are ignored.
    """
    if max_size < 1:
        raise ConfigError(f"max_size must be >= 1, got {max_size}")
    counts = Counter()
    n_sentences = 0
    for sentence in corpus:
        n_sentences += 1
        counts.update(tok for tok in sentence if tok not in (SOS, EOS, UNK))
    if n_sentences == 0 or not counts:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary((SOS, EOS, UNK) + tuple(tok for tok, _ in ranked[:max_size]))


def encode(v: Vocabulary, text: Sequence[str]) -> List[int]:
    return [v.id_of(tok) for tok in text]


def save_vocabulary(v: Vocabulary, path) -> None:
    Path(path).write_text("".join(tok + "\n" for tok in v.tokens), encoding="utf-8")


def load_vocabulary(path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, tok in enumerate(lines, start=1):
        if not tok or any(c.isspace() for c in tok):
            raise ParseError(f"invalid token {tok!r}", path, lineno)
    try:
        return Vocabulary(tuple(lines))
    except ConfigError as exc:
        raise ParseError(str(exc), path) from exc

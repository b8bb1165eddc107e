"""Grapheme tokenization, blank insertion and the length regulator."""

import re
from dataclasses import dataclass, field

import numpy as np

from talknet.errors import InvalidArgumentError, InvalidInputError
from talknet.numeric.ops import interp_embedding

BLANK = "~"
UNKNOWN = "¤"
PUNCTUATION = "!'\"(),-.:;?"
DEFAULT_SYMBOLS = BLANK + UNKNOWN + " " + "abcdefghijklmnopqrstuvwxyz" + "0123456789" + PUNCTUATION

_WHITESPACE = re.compile(r"\s+")


class Vocabulary:
    """Ordered single-character symbols; blank and unknown appear exactly once."""

    def __init__(self, symbols=DEFAULT_SYMBOLS):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise InvalidArgumentError("vocabulary symbols must be unique")
        for required in (BLANK, UNKNOWN):
            if required not in symbols:
                raise InvalidArgumentError(f"vocabulary is missing {required!r}")
        if any(len(s) != 1 for s in symbols):
            raise InvalidArgumentError("vocabulary symbols must be single characters")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}
        self.blank_id = self.index[BLANK]
        self.unknown_id = self.index[UNKNOWN]

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    def __contains__(self, symbol):
        return symbol in self.index

    def encode(self, chars):
        return np.array([self.index.get(c, self.unknown_id) for c in chars], dtype=np.int64)

    def decode(self, ids):
        return [self.symbols[int(i)] for i in ids]

    def serialize(self):
        return "".join(self.symbols)

    @classmethod
    def deserialize(cls, text):
        return cls(list(text))


@dataclass
class TokenSequence:
    ids: np.ndarray
    vocab: Vocabulary = field(repr=False)
    has_blanks: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= len(self.vocab)):
            raise InvalidArgumentError("token id outside vocabulary")

    def __len__(self):
        return len(self.ids)

    @property
    def symbols(self):
        return self.vocab.decode(self.ids)

    @property
    def text(self):
        return "".join(self.symbols)

    def blank_positions(self):
        return self.ids == self.vocab.blank_id


def normalize(text):
    return _WHITESPACE.sub(" ", text.lower()).strip()


def tokenize(text, vocab=None):
    """Lowercase, collapse whitespace, map out-of-vocabulary characters to the unknown marker."""
    vocab = vocab or Vocabulary()
    norm = normalize(text)
    if not norm:
        raise InvalidInputError("text is empty after normalization")
    return TokenSequence(vocab.encode(norm), vocab, has_blanks=False)


def insert_blanks(tokens):
    """[a, b] -> [~, a, ~, b, ~]."""
    if tokens.has_blanks:
        raise InvalidArgumentError("sequence already has blanks")
    out = np.full(2 * len(tokens) + 1, tokens.vocab.blank_id, dtype=np.int64)
    out[1::2] = tokens.ids
    return TokenSequence(out, tokens.vocab, has_blanks=True)


def strip_blanks(tokens):
    if not tokens.has_blanks:
        return tokens
    return TokenSequence(tokens.ids[1::2], tokens.vocab, has_blanks=False)


def _durations(d):
    values = np.asarray(getattr(d, "durations", d), dtype=np.int64)
    if values.size and values.min() < 0:
        raise InvalidArgumentError("durations must be non-negative")
    return values


def expand(tokens, durations):
    """Repeat token i ``durations[i]`` times (the length regulator)."""
    d = _durations(durations)
    if len(d) != len(tokens):
        raise InvalidArgumentError(f"{len(tokens)} tokens but {len(d)} durations")
    return TokenSequence(np.repeat(tokens.ids, d), tokens.vocab, has_blanks=False)


def blank_weights(duration):
    """Weights (left, right) for offsets t = 1..d of a blank of duration d."""
    t = np.arange(1, duration + 1, dtype=np.float64)
    return (duration + 1 - t) / (duration + 1), t / (duration + 1)


def interpolation_plan(tokens, durations):
    """Per-frame (left id, right id, left weight, right weight) for an expanded sequence.

    Characters use their own row.  A blank of duration d between characters a
    and b yields, at offset t, weights (d+1-t)/(d+1) on a and t/(d+1) on b.
    Boundary blanks have only one neighbour, which is used on both sides.
    """
    if not tokens.has_blanks:
        raise InvalidArgumentError("interpolation needs a blank-interleaved sequence")
    d = _durations(durations)
    if len(d) != len(tokens):
        raise InvalidArgumentError(f"{len(tokens)} tokens but {len(d)} durations")
    ids = tokens.ids
    n = len(ids)
    blank = tokens.vocab.blank_id
    total = int(d.sum())
    left = np.empty(total, dtype=np.int64)
    right = np.empty(total, dtype=np.int64)
    wl = np.empty(total, dtype=np.float64)
    wr = np.empty(total, dtype=np.float64)
    pos = 0
    for i in range(n):
        di = int(d[i])
        if di == 0:
            continue
        sl = slice(pos, pos + di)
        if ids[i] != blank:
            left[sl] = right[sl] = ids[i]
            wl[sl], wr[sl] = 1.0, 0.0
        else:
            a = ids[i - 1] if i > 0 else None
            b = ids[i + 1] if i + 1 < n else None
            if a is None and b is None:
                raise InvalidArgumentError("a lone blank has no neighbour to interpolate")
            a = b if a is None else a
            b = a if b is None else b
            left[sl], right[sl] = a, b
            wl[sl], wr[sl] = blank_weights(di)
        pos += di
    return left, right, wl, wr


def embed_expanded(tokens, durations, table):
    """Expanded embedding [D, sum(durations)] with interpolated blanks."""
    left, right, wl, wr = interpolation_plan(tokens, durations)
    return interp_embedding(table, left, right, wl, wr)

"""Ground-truth grapheme durations from a CTC posterior matrix.

Pipeline: greedy decode -> Needleman-Wunsch alignment against the reference
text -> move spurious frames to blanks and give missing characters zero
frames -> borrow one frame from a neighbouring blank for every zero-length
character.  The total frame count is conserved at every stage.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from talknet.errors import (
    AlignmentConsistencyError,
    InvalidArgumentError,
    InvalidInputError,
    UnrecoverableAlignmentError,
)
from talknet.text import BLANK, normalize

CTC_MAGIC = b"CTCM"

MATCH_SCORE = 1
MISMATCH_SCORE = -1
GAP_SCORE = -1


@dataclass
class CtcMatrix:
    logits: np.ndarray  # [T, V]
    vocabulary: list

    def __post_init__(self):
        self.logits = np.asarray(self.logits)
        self.vocabulary = list(self.vocabulary)
        if self.logits.ndim != 2 or self.logits.shape[0] < 1:
            raise InvalidArgumentError(f"CTC matrix must be [T >= 1, V], got {self.logits.shape}")
        if self.logits.shape[1] != len(self.vocabulary):
            raise InvalidArgumentError(
                f"CTC matrix has {self.logits.shape[1]} columns for {len(self.vocabulary)} symbols"
            )
        if self.vocabulary.count(BLANK) != 1:
            raise InvalidArgumentError(f"vocabulary must contain {BLANK!r} exactly once")

    @property
    def frames(self):
        return self.logits.shape[0]

    @property
    def blank_index(self):
        return self.vocabulary.index(BLANK)


@dataclass
class DurationMap:
    tokens: list
    durations: np.ndarray
    total_frames: int

    def __post_init__(self):
        self.tokens = list(self.tokens)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if len(self.tokens) != len(self.durations):
            raise InvalidArgumentError(f"{len(self.tokens)} tokens but {len(self.durations)} durations")

    def __len__(self):
        return len(self.tokens)

    def is_blank(self):
        return np.array([t == BLANK for t in self.tokens], dtype=bool)

    def characters(self):
        return [t for t in self.tokens if t != BLANK]

    def check(self, repaired=True):
        if int(self.durations.sum()) != self.total_frames:
            raise AlignmentConsistencyError(
                f"durations sum to {int(self.durations.sum())}, expected {self.total_frames}"
            )
        if np.any(self.durations < 0):
            raise AlignmentConsistencyError("negative duration")
        if repaired and np.any(self.durations[~self.is_blank()] < 1):
            raise AlignmentConsistencyError("character with zero duration after repair")


class EditOp(NamedTuple):
    kind: str  # match | substitute | delete | insert
    decoded: int | None
    reference: int | None


def greedy_decode(matrix):
    """Per-frame argmax followed by run-length encoding.

    ``np.argmax`` returns the first maximum, so ties go to the lowest
    vocabulary index.  Returns a list of (symbol, frames).
    """
    best = np.argmax(matrix.logits, axis=1)
    change = np.flatnonzero(np.diff(best)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(best)]))
    return [(matrix.vocabulary[best[s]], int(e - s)) for s, e in zip(starts, ends)]


def alignment_score(ops):
    score = 0
    for op in ops:
        if op.kind == "match":
            score += MATCH_SCORE
        elif op.kind == "substitute":
            score += MISMATCH_SCORE
        else:
            score += GAP_SCORE
    return score


def global_align(decoded, reference):
    """Needleman-Wunsch alignment of decoded characters to the reference.

    ``delete`` marks a decoded character absent from the reference, ``insert``
    a reference character missing from the decoding.  On equal scores the
    traceback prefers the diagonal, then delete, then insert.
    """
    n, m = len(decoded), len(reference)
    gap = GAP_SCORE
    score = [[0] * (m + 1) for _ in range(n + 1)]
    for j in range(1, m + 1):
        score[0][j] = j * gap
    for i in range(1, n + 1):
        row, prev = score[i], score[i - 1]
        row[0] = i * gap
        di = decoded[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (MATCH_SCORE if di == reference[j - 1] else MISMATCH_SCORE)
            up = prev[j] + gap
            left = row[j - 1] + gap
            best = diag if diag >= up else up
            row[j] = best if best >= left else left

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        s = score[i][j]
        if i > 0 and j > 0:
            same = decoded[i - 1] == reference[j - 1]
            if s == score[i - 1][j - 1] + (MATCH_SCORE if same else MISMATCH_SCORE):
                ops.append(EditOp("match" if same else "substitute", i - 1, j - 1))
                i -= 1
                j -= 1
                continue
        if i > 0 and s == score[i - 1][j] + gap:
            ops.append(EditOp("delete", i - 1, None))
            i -= 1
        else:
            ops.append(EditOp("insert", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def interleave_blanks(characters):
    tokens = [BLANK] * (2 * len(characters) + 1)
    tokens[1::2] = list(characters)
    return tokens


def correct_durations(path, ops, reference, total_frames):
    """Project a decoded run-length path onto the blank-interleaved reference.

    Matched and substituted runs keep their frames on the reference character.
    Frames between two consecutive mapped characters (blank runs and
    spurious deleted runs) go to the blank that immediately follows the
    earlier mapped character.  Missing characters receive zero frames.
    """
    reference = list(reference)
    char_runs = [k for k, (sym, _) in enumerate(path) if sym != BLANK]
    ref_of_decoded = {}
    n_decoded = 0
    n_ref = 0
    for op in ops:
        if op.decoded is not None:
            n_decoded += 1
        if op.reference is not None:
            n_ref += 1
        if op.kind in ("match", "substitute"):
            ref_of_decoded[op.decoded] = op.reference
    if n_decoded != len(char_runs) or n_ref != len(reference):
        raise InvalidArgumentError("edit ops are inconsistent with the decoded path or reference")

    tokens = interleave_blanks(reference)
    durations = np.zeros(len(tokens), dtype=np.int64)
    last_ref = -1
    decoded_index = 0
    for sym, frames in path:
        if sym == BLANK:
            durations[2 * (last_ref + 1)] += frames
            continue
        target = ref_of_decoded.get(decoded_index)
        decoded_index += 1
        if target is None:
            durations[2 * (last_ref + 1)] += frames
        else:
            durations[2 * target + 1] += frames
            last_ref = target

    result = DurationMap(tokens, durations, total_frames)
    if int(durations.sum()) != total_frames:
        raise AlignmentConsistencyError(
            f"duration mass {int(durations.sum())} does not match {total_frames} frames"
        )
    return result


def repair_zeros(dmap):
    """Give each zero-length character one frame taken from a nearby blank.

    The larger adjacent blank donates (preceding on ties); if both are empty
    the nearest non-empty blank further out donates, again preceding first.
    """
    d = dmap.durations.copy()
    blank = dmap.is_blank()
    n = len(d)
    for p in np.flatnonzero((~blank) & (d == 0)):
        donor = None
        prev_i, next_i = p - 1, p + 1
        prev_ok = prev_i >= 0 and blank[prev_i]
        next_ok = next_i < n and blank[next_i]
        if prev_ok or next_ok:
            pv = d[prev_i] if prev_ok else -1
            nv = d[next_i] if next_ok else -1
            cand = prev_i if pv >= nv else next_i
            if d[cand] >= 1:
                donor = cand
        if donor is None:
            for dist in range(1, n):
                for q in (p - dist, p + dist):
                    if 0 <= q < n and blank[q] and d[q] >= 1:
                        donor = q
                        break
                if donor is not None:
                    break
        if donor is None:
            raise UnrecoverableAlignmentError(
                f"no blank frames left to lengthen character {dmap.tokens[p]!r} at position {p}"
            )
        d[donor] -= 1
        d[p] = 1
    return DurationMap(dmap.tokens, d, dmap.total_frames)


def reference_symbols(transcript):
    """Transcript characters after the shared text normalization."""
    chars = list(normalize(transcript))
    if not chars:
        raise InvalidInputError("transcript is empty after normalization")
    return chars


def extract_durations(matrix, transcript):
    """Durations for the blank-interleaved transcript, summing to the frame count."""
    reference = reference_symbols(transcript)
    path = greedy_decode(matrix)
    decoded = [sym for sym, _ in path if sym != BLANK]
    ops = global_align(decoded, reference)
    dmap = repair_zeros(correct_durations(path, ops, reference, matrix.frames))
    dmap.check()
    return dmap


def oracle_matrix(tokens, durations, vocabulary, rng=None, margin=5.0):
    """A CTC matrix whose argmax path is exactly the given token/duration layout.

    With ``rng`` the non-path logits are random values strictly below the
    path logit, so decoding is unaffected.
    """
    vocabulary = list(vocabulary)
    index = {s: i for i, s in enumerate(vocabulary)}
    frames = np.repeat([index[t] for t in tokens], np.asarray(durations, dtype=np.int64))
    t_len, v = len(frames), len(vocabulary)
    if rng is None:
        logits = np.zeros((t_len, v), dtype=np.float32)
    else:
        logits = rng.uniform(-margin, 0.0, size=(t_len, v)).astype(np.float32)
    logits[np.arange(t_len), frames] = margin
    return CtcMatrix(logits, vocabulary)


def write_ctc_matrix(path, matrix):
    vocab = "".join(matrix.vocabulary).encode("utf-8")
    t_len, v = matrix.logits.shape
    with open(path, "wb") as fh:
        fh.write(CTC_MAGIC)
        fh.write(struct.pack("<III", t_len, v, len(vocab)))
        fh.write(vocab)
        fh.write(np.ascontiguousarray(matrix.logits, dtype="<f4").tobytes())


def read_ctc_matrix(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CTC_MAGIC:
        raise InvalidInputError(f"{path}: bad magic {raw[:4]!r}, expected {CTC_MAGIC!r}")
    if len(raw) < 16:
        raise InvalidInputError(f"{path}: truncated header")
    t_len, v, vlen = struct.unpack_from("<III", raw, 4)
    body_start = 16 + vlen
    try:
        vocab = list(raw[16:body_start].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise InvalidInputError(f"{path}: vocabulary is not UTF-8") from exc
    if len(vocab) != v:
        raise InvalidInputError(f"{path}: header says V={v} but vocabulary has {len(vocab)} symbols")
    expected = body_start + 4 * t_len * v
    if len(raw) != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes, found {len(raw)}")
    logits = np.frombuffer(raw, dtype="<f4", offset=body_start, count=t_len * v).reshape(t_len, v)
    try:
        return CtcMatrix(logits.astype(np.float32), vocab)
    except InvalidArgumentError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc


def write_durations(path, dmap):
    lines = [f"{tok}\t{int(d)}" for tok, d in zip(dmap.tokens, dmap.durations)]
    lines.append(f"#total\t{dmap.total_frames}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_durations(path):
    tokens, durations, total = [], [], None
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        if "\t" not in line:
            raise InvalidInputError(f"{path}:{lineno}: missing tab separator")
        tok, value = line.rsplit("\t", 1)
        if tok == "#total":
            total = int(value)
            continue
        tokens.append(tok)
        durations.append(int(value))
    if total is None:
        raise InvalidInputError(f"{path}: missing #total line")
    dmap = DurationMap(tokens, durations, total)
    dmap.check(repaired=False)
    return dmap

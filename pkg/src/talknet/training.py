"""Training loops, duration augmentation, metrics, synthesis and latency timing."""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from talknet.align import DurationMap
from talknet.audio import MelConfig, MelSpectrogram, Waveform, griffin_lim
from talknet.errors import InvalidArgumentError, InvalidInputError, TrainingDivergedError
from talknet.models import (
    L2,
    XE,
    decode_durations,
    duration_to_class,
    duration_to_log_target,
)
from talknet.numeric import (
    Adam,
    LrSchedule,
    RngState,
    backward,
    clip_global_norm,
    lr_at,
    mse_loss,
    no_grad,
    xe_loss,
)
from talknet.text import TokenSequence, expand, insert_blanks, interpolation_plan, tokenize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_fraction: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    clip_norm: float = 1.0
    p_aug: float = 0.5
    aug_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be positive")
        if not 0 < self.aug_alpha < 1:
            raise InvalidArgumentError(f"aug_alpha must be in (0, 1), got {self.aug_alpha}")
        if not 0 <= self.p_aug <= 1:
            raise InvalidArgumentError(f"p_aug must be in [0, 1], got {self.p_aug}")
        if self.lr_max <= 0 or self.lr_min < 0 or self.clip_norm <= 0:
            raise InvalidArgumentError("learning rates and clip norm must be positive")


@dataclass
class Utterance:
    """One training example: blank-interleaved tokens, their durations, optional log-mel [T, n_mels]."""

    name: str
    tokens: TokenSequence
    durations: np.ndarray
    mel: np.ndarray | None = None

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if len(self.durations) != len(self.tokens):
            raise InvalidInputError(f"{self.name}: {len(self.tokens)} tokens vs {len(self.durations)} durations")

    @property
    def is_blank(self):
        return self.tokens.blank_positions()


def make_utterance(name, transcript, dmap, vocab, mel=None):
    tokens = insert_blanks(tokenize(transcript, vocab))
    if len(tokens) != len(dmap.durations):
        raise InvalidInputError(f"{name}: transcript has {len(tokens)} tokens, durations have {len(dmap.durations)}")
    return Utterance(name, tokens, dmap.durations, mel)


def check_corpus(utterances, need_mel=False):
    """Drop utterances whose durations do not sum to their mel frame count."""
    kept = []
    for u in utterances:
        if need_mel and u.mel is None:
            log.warning("rejecting %s: no mel spectrogram", u.name)
            continue
        if u.mel is not None and int(u.durations.sum()) != u.mel.shape[0]:
            log.warning("rejecting %s: durations sum to %d but mel has %d frames",
                        u.name, int(u.durations.sum()), u.mel.shape[0])
            continue
        kept.append(u)
    return kept


# Augmentation ---------------------------------------------------------------

def augment_durations(durations, alpha, rng, is_blank=None):
    """Random length-preserving transfers between neighbouring tokens.

    For each pair (i, i+1) a shift ``round(u * alpha * min(d_i, d_i+1))`` with
    ``u ~ U(-1, 1)`` moves frames from i to i+1, limited so no duration goes
    negative and no character drops below one frame.
    """
    as_map = isinstance(durations, DurationMap)
    d = (durations.durations if as_map else np.asarray(durations, dtype=np.int64)).copy()
    if is_blank is None:
        is_blank = durations.is_blank() if as_map else np.zeros(len(d), dtype=bool)
    floor = np.where(np.asarray(is_blank, dtype=bool), 0, 1)
    floor = np.minimum(floor, d)
    for i in range(len(d) - 1):
        u = rng.uniform(-1.0, 1.0)
        shift = int(np.rint(u * alpha * min(d[i], d[i + 1])))
        shift = min(shift, d[i] - floor[i])
        shift = max(shift, -(d[i + 1] - floor[i + 1]))
        d[i] -= shift
        d[i + 1] += shift
    if as_map:
        return DurationMap(durations.tokens, d, durations.total_frames)
    return d


# Packing --------------------------------------------------------------------

def max_padding(model):
    return max((spec.kernel - 1) // 2 for spec in (b.spec for b in model.encoder.blocks))


def pack(lengths, gap):
    """Offsets for laying sequences end to end with ``gap`` zero frames between them.

    With a gap at least the widest conv half-width, a packed [1, C, total]
    tensor behaves exactly like a padded batch but uses one GEMM per layer.
    """
    offsets, pos = [], 0
    for n in lengths:
        offsets.append(pos)
        pos += n + gap
    total = pos - gap if lengths else 0
    mask = np.zeros((1, total), dtype=bool)
    for off, n in zip(offsets, lengths):
        mask[0, off:off + n] = True
    return offsets, total, mask


def _duration_batch(model, batch):
    gap = max_padding(model)
    offsets, total, mask = pack([len(u.tokens) for u in batch], gap)
    ids = np.full((1, total), batch[0].tokens.vocab.blank_id, dtype=np.int64)
    target = np.zeros((1, total), dtype=np.int64)
    for off, u in zip(offsets, batch):
        ids[0, off:off + len(u.tokens)] = u.tokens.ids
        target[0, off:off + len(u.tokens)] = u.durations
    return ids, target, mask, offsets


def duration_loss(model, batch, rng):
    ids, target, mask, _ = _duration_batch(model, batch)
    out = model(ids, mask, rng)
    if model.head_type == L2:
        return mse_loss(out, duration_to_log_target(target)[:, None, :], mask)
    return xe_loss(out, duration_to_class(target), mask)


def _mel_batch(model, batch, durations):
    gap = max_padding(model)
    lengths = [int(d.sum()) for d in durations]
    offsets, total, mask = pack(lengths, gap)
    left = np.zeros((1, total), dtype=np.int64)
    right = np.zeros((1, total), dtype=np.int64)
    wl = np.zeros((1, total))
    wr = np.zeros((1, total))
    target = np.zeros((1, model.n_mels, total))
    for off, n, u, d in zip(offsets, lengths, batch, durations):
        a, b, x, y = interpolation_plan(u.tokens, d)
        left[0, off:off + n], right[0, off:off + n] = a, b
        wl[0, off:off + n], wr[0, off:off + n] = x, y
        if u.mel is not None:
            target[0, :, off:off + n] = u.mel.T
    return (left, right, wl, wr), target, mask


def mel_loss(model, batch, rng, durations=None):
    durations = durations or [u.durations for u in batch]
    plan, target, mask = _mel_batch(model, batch, durations)
    out = model(model.embed(*plan), mask, rng)
    return mse_loss(out, target, mask)


# Training loop --------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly."""

    optimizer: Adam
    rng: RngState
    epoch: int = 0
    step: int = 0
    curve: list = field(default_factory=list)  # (epoch, step, loss, lr)

    @classmethod
    def fresh(cls, model, cfg):
        opt = Adam(model.parameters(), betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
        return cls(opt, RngState(cfg.seed))


def steps_per_epoch(n, cfg):
    return math.ceil(n / cfg.batch_size)


def _run(model, corpus, cfg, loss_fn, state, on_epoch_end, stop_after):
    if not corpus:
        raise InvalidInputError("training corpus is empty")
    state = state or TrainState.fresh(model, cfg)
    schedule = LrSchedule(
        total_steps=cfg.epochs * steps_per_epoch(len(corpus), cfg),
        lr_max=cfg.lr_max,
        lr_min=cfg.lr_min,
        warmup_fraction=cfg.warmup_fraction,
    )
    model.train()
    params = model.parameters()
    last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < last_epoch:
        order = state.rng.permutation(len(corpus))
        for start in range(0, len(corpus), cfg.batch_size):
            batch = [corpus[i] for i in order[start:start + cfg.batch_size]]
            state.optimizer.zero_grad()
            loss = loss_fn(model, batch, state.rng)
            value = float(loss.data)
            lr = lr_at(schedule, state.step + 1)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {state.step} (epoch {state.epoch}, lr {lr:.3g})"
                )
            backward(loss)
            norm = clip_global_norm(params, cfg.clip_norm)
            if not math.isfinite(norm):
                raise TrainingDivergedError(
                    f"non-finite gradient norm at step {state.step} (epoch {state.epoch}, lr {lr:.3g})"
                )
            state.optimizer.step(lr)
            state.step += 1
            state.curve.append((state.epoch, state.step, value, lr))
        state.epoch += 1
        if on_epoch_end is not None:
            on_epoch_end(state)
    model.eval()
    return state


def train_duration(model, corpus, cfg, state=None, on_epoch_end=None, stop_after=None):
    """Fit the duration predictor on teacher durations (blanks included).

    ``stop_after`` ends the run early at that epoch (the schedule still spans
    ``cfg.epochs``), which is how resumable checkpoints are produced.
    Returns the :class:`TrainState`; its ``curve`` is the loss log.
    """
    return _run(model, corpus, cfg, duration_loss, state, on_epoch_end, stop_after)


def train_mel(model, corpus, cfg, augment=True, state=None, on_epoch_end=None, stop_after=None):
    """Fit the mel generator on teacher durations, optionally augmented."""
    corpus = check_corpus(corpus, need_mel=True)

    def loss_fn(model, batch, rng):
        durations = []
        for u in batch:
            d = u.durations
            if augment and rng.random() < cfg.p_aug:
                d = augment_durations(d, cfg.aug_alpha, rng, u.is_blank)
            durations.append(d)
        return mel_loss(model, batch, rng, durations)

    return _run(model, corpus, cfg, loss_fn, state, on_epoch_end, stop_after)


# Evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    mse: float
    accuracy_pct: float
    within_1_pct: float
    within_3_pct: float

    def line(self):
        return f"{self.mse:.6g}\t{self.accuracy_pct:.4f}\t{self.within_1_pct:.4f}\t{self.within_3_pct:.4f}"


EVAL_HEADER = "mse\tacc\twithin1\twithin3"


def duration_metrics(predicted, target):
    p = np.asarray(predicted, dtype=np.int64).ravel()
    t = np.asarray(target, dtype=np.int64).ravel()
    if p.shape != t.shape:
        raise InvalidArgumentError(f"{p.size} predictions for {t.size} targets")
    if t.size == 0:
        raise InvalidInputError("no tokens to evaluate")
    err = np.abs(p - t)
    return EvalReport(
        mse=float(np.mean((p - t) ** 2.0)),
        accuracy_pct=100.0 * float(np.mean(err == 0)),
        within_1_pct=100.0 * float(np.mean(err <= 1)),
        within_3_pct=100.0 * float(np.mean(err <= 3)),
    )


def predict_durations(model, tokens):
    """Head output for one blank-interleaved sequence, eval mode: [K, L]."""
    if not tokens.has_blanks:
        raise InvalidArgumentError("duration prediction expects blank-interleaved tokens")
    model.eval()
    with no_grad():
        return model(tokens.ids[None]).data[0]


def infer_durations(model, tokens):
    return decode_durations(predict_durations(model, tokens), model.head_type, tokens.blank_positions())


def evaluate_durations(model, corpus):
    if not corpus:
        raise InvalidInputError("evaluation corpus is empty")
    preds, targets = [], []
    for u in corpus:
        preds.append(infer_durations(model, u.tokens))
        targets.append(u.durations)
    return duration_metrics(np.concatenate(preds), np.concatenate(targets))


def evaluate_mel(model, corpus):
    """Teacher-forced masked MSE of the generator over a corpus (eval mode)."""
    model.eval()
    corpus = check_corpus(corpus, need_mel=True)
    total, count = 0.0, 0
    with no_grad():
        for u in corpus:
            frames = int(u.durations.sum())
            total += float(mel_loss(model, [u], None).data) * frames
            count += frames
    return total / count


# Synthesis ------------------------------------------------------------------

@dataclass
class SynthesisResult:
    mel: MelSpectrogram
    waveform: Waveform
    tokens: TokenSequence
    durations: np.ndarray


def scale_durations(durations, is_blank, speed):
    if speed <= 0:
        raise InvalidArgumentError(f"speed must be positive, got {speed}")
    d = np.rint(np.asarray(durations, dtype=np.float64) / speed).astype(np.int64)
    return np.where(~np.asarray(is_blank, dtype=bool) & (d < 1), 1, d)


def generate_mel(mel_model, tokens, durations):
    """One non-autoregressive forward pass -> log-mel [sum(durations), n_mels]."""
    mel_model.eval()
    plan = interpolation_plan(tokens, durations)
    with no_grad():
        out = mel_model(mel_model.embed(*(np.asarray(a)[None] for a in plan)))
    return out.data[0].T.astype(np.float64)


def synthesize(text, dur_model, mel_model, vocab, mel_config=None, speed=1.0, gl_iterations=60, seed=0,
               duration_transform=None):
    """Text -> durations -> expanded embedding -> log-mel -> Griffin-Lim audio."""
    mel_config = mel_config or MelConfig()
    tokens = insert_blanks(tokenize(text, vocab))
    durations = infer_durations(dur_model, tokens)
    durations = scale_durations(durations, tokens.blank_positions(), speed)
    if duration_transform is not None:
        durations = duration_transform(durations)
    if durations.sum() == 0:
        durations = np.where(tokens.blank_positions(), 0, 1)
    frames = generate_mel(mel_model, tokens, durations)
    mel = MelSpectrogram(frames, mel_config)
    wave = griffin_lim(mel, gl_iterations, RngState(seed))
    return SynthesisResult(mel, wave, tokens, durations)


def expanded_characters(tokens, durations):
    """The expanded id sequence (what the generator is conditioned on)."""
    return expand(tokens, durations)


# Latency --------------------------------------------------------------------

@dataclass
class LatencyReport:
    rows: list  # (length, median seconds, frames per second)
    exponent: float | None

    def lines(self):
        out = ["length\tseconds\tframes_per_s"]
        out += [f"{n}\t{t:.6f}\t{fps:.1f}" for n, t, fps in self.rows]
        if self.exponent is not None:
            out.append(f"#exponent\t{self.exponent:.4f}")
        return out


def benchmark_latency(mel_model, lengths, repeats=10, warmup=1, seed=0):
    """Median wall time of one generator pass (batch 1) per input length."""
    mel_model.eval()
    rng = RngState(seed)
    rows = []
    for n in lengths:
        ids = rng.integers(0, mel_model.vocab_size, size=(1, n))
        weights = np.ones((1, n))
        times = []
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            with no_grad():
                mel_model(mel_model.embed(ids, ids, weights, 1.0 - weights))
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
        med = float(np.median(times))
        rows.append((int(n), med, n / med))
    exponent = None
    if len(rows) >= 2:
        x = np.log([r[0] for r in rows])
        y = np.log([r[1] for r in rows])
        exponent = float(np.polyfit(x, y, 1)[0])
    return LatencyReport(rows, exponent)


def curve_lines(curve):
    return ["epoch\tstep\tloss\tlr"] + [f"{e}\t{s}\t{loss:.8g}\t{lr:.8g}" for e, s, loss, lr in curve]

"""Log-mel features, Griffin-Lim inversion, WAV/manifest I/O and a synthetic corpus."""

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from talknet.align import DurationMap, interleave_blanks
from talknet.errors import InvalidInputError, ManifestError
from talknet.text import BLANK


LOG_MEL_CEILING = 20.0


def _round_half_up(x):
    # 22050 Hz * 50 ms = 1102.5 samples -> 1103
    return int(math.floor(x + 0.5))


@dataclass
class MelConfig:
    sample_rate: int = 16000
    window_ms: float = 50.0
    hop_ms: float = 12.5
    n_mels: int = 80
    fft_size: int | None = None
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if self.fft_size is None:
            self.fft_size = 1 << (self.win_length - 1).bit_length()
        if self.fmax is None:
            self.fmax = self.sample_rate / 2
        if self.fft_size < self.win_length:
            raise InvalidInputError(f"fft_size {self.fft_size} < window length {self.win_length}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise InvalidInputError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")
        if self.hop_length < 1 or self.log_floor <= 0 or self.n_mels < 1:
            raise InvalidInputError("hop, log_floor and n_mels must be positive")

    @property
    def win_length(self):
        return _round_half_up(self.sample_rate * self.window_ms / 1000)

    @property
    def hop_length(self):
        return _round_half_up(self.sample_rate * self.hop_ms / 1000)

    def to_dict(self):
        return {
            "sample_rate": self.sample_rate,
            "window_ms": self.window_ms,
            "hop_ms": self.hop_ms,
            "n_mels": self.n_mels,
            "fft_size": self.fft_size,
            "fmin": self.fmin,
            "fmax": self.fmax,
            "log_floor": self.log_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def rms(self):
        return float(np.sqrt(np.mean(self.samples ** 2))) if len(self.samples) else 0.0


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, n_mels], natural-log magnitude
    config: MelConfig

    @property
    def num_frames(self):
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg):
    """Triangular filters [n_mels, fft_size // 2 + 1], unit peak, HTK mel scale."""
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def band_centers(cfg):
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))[1:-1]


def hann(n):
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_frames(n_samples, cfg):
    """Frames without centre padding: 1 + floor((n - win) / hop)."""
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def stft(samples, cfg):
    win = cfg.win_length
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::cfg.hop_length]
    return np.fft.rfft(frames * hann(win), n=cfg.fft_size, axis=1)


def istft(spec, cfg, length=None):
    """Weighted overlap-add inverse of :func:`stft`."""
    win, hop = cfg.win_length, cfg.hop_length
    n_frames = spec.shape[0]
    window = hann(win)
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, :win] * window
    out_len = (n_frames - 1) * hop + win
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    for i in range(n_frames):
        out[i * hop:i * hop + win] += frames[i]
        norm[i * hop:i * hop + win] += window ** 2
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    if length is not None:
        out = out[:length] if len(out) >= length else np.pad(out, (0, length - len(out)))
    return out


def mel_spectrogram(w, cfg=None):
    cfg = cfg or MelConfig(sample_rate=w.sample_rate)
    if w.sample_rate != cfg.sample_rate:
        raise InvalidInputError(f"waveform is {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    if len(w.samples) < cfg.win_length:
        raise InvalidInputError(f"signal has {len(w.samples)} samples, window needs {cfg.win_length}")
    mag = np.abs(stft(w.samples, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


def griffin_lim(mel, iterations=60, rng=None):
    """Waveform whose magnitude STFT approximates the (pseudo-inverted) mel spectrogram."""
    cfg = mel.config
    frames = np.asarray(mel.frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise InvalidInputError("mel spectrogram contains non-finite values")
    # clamp: an untrained generator can emit values far outside the feature range
    frames = np.clip(frames, np.log(cfg.log_floor), LOG_MEL_CEILING)
    linear_mel = np.maximum(np.exp(frames) - cfg.log_floor, 0.0)
    inverse = np.linalg.pinv(mel_filterbank(cfg))
    mag = np.maximum(linear_mel @ inverse.T, 0.0)
    n_frames = mag.shape[0]
    length = (n_frames - 1) * cfg.hop_length + cfg.win_length
    gen = rng.generator if rng is not None else np.random.default_rng(0)
    phase = np.exp(2j * np.pi * gen.random(mag.shape))
    samples = istft(mag * phase, cfg, length)
    for _ in range(iterations):
        rebuilt = stft(samples, cfg)
        phase = np.exp(1j * np.angle(rebuilt))
        samples = istft(mag * phase, cfg, length)
    return Waveform(np.clip(np.nan_to_num(samples), -1.0, 1.0), cfg.sample_rate)


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise InvalidInputError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(pcm, rate)


def write_wav(path, w):
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def load_manifest(path):
    """LJSpeech-style ``stem|transcript[|normalized]`` lines -> [(stem.wav, transcript)].

    The second field (the raw transcript) is used; text normalization is left
    to tokenization.
    """
    entries = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("|")
        if len(fields) < 2:
            raise ManifestError("expected at least 2 '|'-separated fields", lineno)
        stem = fields[0].strip()
        if not stem:
            raise ManifestError("empty audio file stem", lineno)
        entries.append((stem if stem.endswith(".wav") else stem + ".wav", fields[1]))
    return entries


def write_manifest(path, entries):
    lines = [f"{Path(audio).stem}|{text}" for audio, text in entries]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# Synthetic corpus -----------------------------------------------------------

SYNTH_ALPHABET = "abcdefghijklmnopqrstuvwxyz ,.!?'"


def symbol_tone(symbol):
    """(frequencies in Hz, amplitudes) of the tone standing in for a grapheme."""
    idx = SYNTH_ALPHABET.find(symbol)
    if idx < 0:
        idx = (ord(symbol) * 7) % len(SYNTH_ALPHABET)
    base = 220.0 * 2 ** (idx / 8.0)
    return (base, 2.0 * base), (0.3, 0.1)


def render_utterance(tokens, durations, cfg):
    """Waveform whose mel spectrogram has exactly ``sum(durations)`` frames.

    Each token occupies ``duration * hop`` samples; blanks are silent,
    characters are a two-partial tone.  The signal is offset by half of
    ``win - hop`` so frame i's window is centred on token slot i.
    """
    hop, win = cfg.hop_length, cfg.win_length
    durations = np.asarray(durations, dtype=np.int64)
    total = int(durations.sum())
    lead = (win - hop) // 2
    samples = np.zeros(total * hop + win - hop)
    pos = lead
    for tok, d in zip(tokens, durations):
        n = int(d) * hop
        if tok != BLANK and n:
            t = np.arange(n) / cfg.sample_rate
            freqs, amps = symbol_tone(tok)
            samples[pos:pos + n] = sum(a * np.sin(2 * np.pi * f * t) for f, a in zip(freqs, amps))
        pos += n
    return Waveform(samples, cfg.sample_rate)


@dataclass
class SynthUtterance:
    waveform: Waveform
    transcript: str
    durations: DurationMap


def _random_text(rng, min_chars, max_chars):
    n = int(rng.integers(min_chars, max_chars + 1))
    letters = SYNTH_ALPHABET[:26]
    chars = []
    for i in range(n):
        if 0 < i < n - 1 and chars[-1] not in " ,.!?'" and rng.random() < 0.15:
            chars.append(" ")
        else:
            chars.append(letters[int(rng.integers(0, 26))])
    if rng.random() < 0.3:
        chars[-1] = ".,!?"[int(rng.integers(0, 4))]
    return "".join(chars)


def synth_corpus(n, rng, cfg=None, min_chars=3, max_chars=8, char_range=(2, 6), blank_range=(0, 4)):
    """Deterministic toy corpus with exact per-token frame durations.

    Utterance i draws from ``rng.spawn(i)``, so content does not depend on how
    many utterances are generated or in which order.
    """
    if n < 1:
        raise InvalidInputError("corpus size must be at least 1")
    cfg = cfg or MelConfig()
    out = []
    for i in range(n):
        r = rng.spawn(i)
        text = _random_text(r, min_chars, max_chars)
        tokens = interleave_blanks(list(text))
        durations = np.zeros(len(tokens), dtype=np.int64)
        for p, tok in enumerate(tokens):
            if tok == BLANK:
                low = blank_range[0]
                edge = p == 0 or p == len(tokens) - 1
                same_neighbours = 0 < p < len(tokens) - 1 and tokens[p - 1] == tokens[p + 1]
                if edge or same_neighbours:
                    low = max(low, 1)
                durations[p] = r.integers(low, blank_range[1] + 1)
            else:
                durations[p] = r.integers(char_range[0], char_range[1] + 1)
        dmap = DurationMap(tokens, durations, int(durations.sum()))
        out.append(SynthUtterance(render_utterance(tokens, durations, cfg), text, dmap))
    return out


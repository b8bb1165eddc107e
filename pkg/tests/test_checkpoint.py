import struct

import numpy as np
import pytest

from talknet.audio import MelConfig, mel_spectrogram, synth_corpus
from talknet.checkpoint import (
    MAGIC,
    load_checkpoint,
    read_raw,
    restore_state,
    resave,
    save_checkpoint,
    write_raw,
)
from talknet.config import PipelineConfig, dump_config, load_config
from talknet.errors import CheckpointError, InvalidArgumentError
from talknet.models import XE, BlockSpec, DurationPredictor, MelGenerator
from talknet.numeric import RngState, precision
from talknet.text import Vocabulary
from talknet.training import TrainConfig, make_utterance, train_duration, train_mel

VOCAB = Vocabulary()
TINY = (BlockSpec(1, 8, 3, 0.1, False), BlockSpec(2, 8, 5, 0.1, True))


def corpus(n=5):
    return [make_utterance(str(i), s.transcript, s.durations, VOCAB, mel_spectrogram(s.waveform).frames)
            for i, s in enumerate(synth_corpus(n, RngState(2)))]


class TestRawFormat:
    def test_layout(self, tmp_path):
        write_raw(tmp_path / "c", {"kind": "x"}, {"b": np.ones((2, 3)), "a": np.zeros(1)})
        raw = (tmp_path / "c").read_bytes()
        assert raw[:4] == MAGIC
        version, n = struct.unpack_from("<II", raw, 4)
        assert version == 1
        assert raw[12:12 + n] == b'{"dtype":"f4","kind":"x"}'
        pos = 12 + n
        assert struct.unpack_from("<I", raw, pos)[0] == 1 and raw[pos + 4:pos + 5] == b"a"
        meta, tensors = read_raw(tmp_path / "c")
        assert list(tensors) == ["a", "b"] and tensors["b"].shape == (2, 3)

    def test_version_mismatch(self, tmp_path):
        write_raw(tmp_path / "c", {}, {})
        raw = bytearray((tmp_path / "c").read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        (tmp_path / "c").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version 99"):
            read_raw(tmp_path / "c")

    @pytest.mark.parametrize("mangle", [lambda r: b"NOPE" + r[4:], lambda r: r[:-2], lambda r: r[:10]])
    def test_corruption_detected(self, tmp_path, mangle):
        write_raw(tmp_path / "c", {"k": 1}, {"w": np.arange(6.0)})
        (tmp_path / "c").write_bytes(mangle((tmp_path / "c").read_bytes()))
        with pytest.raises(CheckpointError):
            read_raw(tmp_path / "c")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_raw(tmp_path / "absent")


class TestModelCheckpoint:
    @pytest.mark.parametrize("bits", [32, 64])
    def test_round_trip_bit_exact(self, tmp_path, bits):
        with precision(bits):
            m = DurationPredictor(len(VOCAB), XE, 8, TINY, seed=4)
            state = train_duration(m, corpus(), TrainConfig(epochs=1, batch_size=2))
            cfg = MelConfig(sample_rate=22050)
            save_checkpoint(tmp_path / "a", m, VOCAB, cfg, seed=4, state=state)
            ck = load_checkpoint(tmp_path / "a")
            resave(tmp_path / "b", ck)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        for (name, x), (_, y) in zip(m.state_arrays().items(), ck.model.state_arrays().items()):
            assert np.array_equal(x, y), name
        assert ck.vocab == VOCAB and ck.mel_config == cfg and ck.seed == 4
        assert ck.model.arch == m.arch
        assert ck.training["step"] == state.step

    def test_kind_checked(self, tmp_path):
        save_checkpoint(tmp_path / "m", MelGenerator(len(VOCAB), 80, 8, TINY), VOCAB)
        with pytest.raises(CheckpointError, match="expected duration"):
            load_checkpoint(tmp_path / "m", expect_kind="duration")

    def test_no_training_state(self, tmp_path):
        save_checkpoint(tmp_path / "m", MelGenerator(len(VOCAB), 80, 8, TINY), VOCAB)
        with pytest.raises(CheckpointError):
            restore_state(load_checkpoint(tmp_path / "m"))

    @pytest.mark.parametrize("kind", ["duration", "mel"])
    def test_resume_matches_uninterrupted(self, tmp_path, kind):
        data = corpus()
        cfg = TrainConfig(epochs=4, batch_size=2, seed=9)
        if kind == "duration":
            def make():
                return DurationPredictor(len(VOCAB), XE, 8, TINY)
            fit = train_duration
        else:
            def make():
                return MelGenerator(len(VOCAB), 80, 8, TINY)
            fit = train_mel
        full = make()
        full_state = fit(full, data, cfg)
        part = make()
        part_state = fit(part, data, cfg, stop_after=2)
        save_checkpoint(tmp_path / "mid", part, VOCAB, state=part_state)
        ck = load_checkpoint(tmp_path / "mid")
        resumed_state = fit(ck.model, data, cfg, state=restore_state(ck, cfg))
        for x, y in zip(full.state_arrays().values(), ck.model.state_arrays().values()):
            assert np.array_equal(x, y)
        assert resumed_state.curve == full_state.curve


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = PipelineConfig(manifest=tmp_path / "m.csv", out_dir=tmp_path / "o", head="l2",
                             train=TrainConfig(epochs=7, aug_alpha=0.2), mel=MelConfig(hop_ms=10.0))
        dump_config(cfg, tmp_path / "c.ini")
        back = load_config(tmp_path / "c.ini")
        assert back == cfg

    def test_relative_paths(self, tmp_path):
        (tmp_path / "c.ini").write_text("[paths]\nmanifest = data/m.csv\n", encoding="utf-8")
        assert load_config(tmp_path / "c.ini").manifest == tmp_path / "data" / "m.csv"

    @pytest.mark.parametrize("text", [
        "[train]\nepochs = many\n",
        "[train]\nbogus = 1\n",
        "[nope]\na = 1\n",
        "[model]\nhead = bce\n",
        "[train]\naug_alpha = 1.5\n",
        "[mel]\nfft_size = 16\n",
        "no section\n",
    ])
    def test_invalid(self, tmp_path, text):
        (tmp_path / "c.ini").write_text(text, encoding="utf-8")
        with pytest.raises(InvalidArgumentError):
            load_config(tmp_path / "c.ini")

    def test_require(self, tmp_path):
        cfg = PipelineConfig(manifest=tmp_path / "missing.csv")
        with pytest.raises(InvalidArgumentError, match="missing required setting 'out_dir'"):
            cfg.require("manifest", "out_dir")
        with pytest.raises(InvalidArgumentError, match="does not exist"):
            cfg.require(files=("manifest",))

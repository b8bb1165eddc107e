import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talknet.align import DurationMap
from talknet.audio import mel_spectrogram, synth_corpus
from talknet.errors import InvalidArgumentError, InvalidInputError, TrainingDivergedError
from talknet.models import L2, XE, BlockSpec, DurationPredictor, MelGenerator, duration_to_class
from talknet.numeric import RngState, mse_loss, precision, xe_loss
from talknet.text import Vocabulary, insert_blanks, tokenize
from talknet.training import (
    EvalReport,
    TrainConfig,
    Utterance,
    augment_durations,
    benchmark_latency,
    check_corpus,
    curve_lines,
    duration_loss,
    duration_metrics,
    evaluate_durations,
    make_utterance,
    mel_loss,
    pack,
    scale_durations,
    synthesize,
    train_duration,
    train_mel,
)

VOCAB = Vocabulary()
TINY = (BlockSpec(1, 8, 3, 0.1, False), BlockSpec(2, 8, 5, 0.1, True))
NO_DROPOUT = (BlockSpec(1, 8, 3, 0.0, False), BlockSpec(2, 8, 5, 0.0, True))


class FixedUniform:
    def __init__(self, u):
        self.u = u

    def uniform(self, low, high):
        return self.u


def small_corpus(n=4, seed=1):
    items = synth_corpus(n, RngState(seed))
    return [make_utterance(str(i), s.transcript, s.durations, VOCAB, mel_spectrogram(s.waveform).frames)
            for i, s in enumerate(items)]


def tiny_duration(head=XE, seed=0, blocks=TINY):
    return DurationPredictor(len(VOCAB), head, 8, blocks, seed=seed)


def tiny_mel(seed=0, blocks=TINY):
    return MelGenerator(len(VOCAB), 80, 8, blocks, seed=seed)


class TestAugment:
    def test_formula_example(self):
        assert list(augment_durations(np.array([10, 10]), 0.1, FixedUniform(1.0))) == [9, 11]

    def test_alpha_zero_identity(self):
        d = np.array([3, 1, 0, 5, 2])
        assert list(augment_durations(d, 0.0, RngState(0))) == list(d)

    def test_duration_map_in_out(self):
        dmap = DurationMap(list("~a~b~"), [2, 3, 0, 4, 1], 10)
        out = augment_durations(dmap, 0.5, RngState(3))
        assert isinstance(out, DurationMap) and out.tokens == dmap.tokens
        assert out.durations.sum() == 10

    def test_clamp_keeps_characters(self):
        # u = +1 would move 1 frame out of a 1-frame character
        out = augment_durations(np.array([2, 2]), 0.9, FixedUniform(1.0), is_blank=np.array([False, False]))
        assert list(out) == [1, 3]
        out = augment_durations(np.array([1, 5]), 0.9, FixedUniform(1.0), is_blank=np.array([False, True]))
        assert list(out) == [1, 5]

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=40), st.floats(0.01, 0.99), st.integers(0, 1000))
    @settings(max_examples=200, deadline=None)
    def test_conservation(self, d, alpha, seed):
        d = np.array(d)
        blank = np.arange(len(d)) % 2 == 0
        d[~blank] = np.maximum(d[~blank], 1)
        out = augment_durations(d, alpha, RngState(seed), blank)
        assert out.sum() == d.sum()
        assert np.all(out >= 0)
        assert np.all(out[~blank] >= 1)

    def test_unbiased(self):
        rng = RngState(0)
        d = np.array([6, 6, 6, 6, 6])
        total = np.zeros(5)
        for _ in range(4000):
            total += augment_durations(d, 0.5, rng)
        np.testing.assert_allclose(total / 4000, d, atol=0.15)


class TestMetrics:
    def test_fixture(self):
        r = duration_metrics([3, 5], [2, 5])
        assert (r.mse, r.accuracy_pct, r.within_1_pct, r.within_3_pct) == (0.5, 50.0, 100.0, 100.0)

    def test_perfect(self):
        r = duration_metrics([1, 2, 3], [1, 2, 3])
        assert (r.mse, r.accuracy_pct, r.within_1_pct, r.within_3_pct) == (0.0, 100.0, 100.0, 100.0)

    @given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_ordering(self, pairs):
        p, t = zip(*pairs)
        r = duration_metrics(p, t)
        assert 0 <= r.accuracy_pct <= r.within_1_pct <= r.within_3_pct <= 100

    def test_empty_and_mismatch(self):
        with pytest.raises(InvalidInputError):
            duration_metrics([], [])
        with pytest.raises(InvalidArgumentError):
            duration_metrics([1], [1, 2])
        with pytest.raises(InvalidInputError):
            evaluate_durations(tiny_duration(), [])

    def test_line_format(self):
        assert EvalReport(0.5, 50.0, 100.0, 100.0).line() == "0.5\t50.0000\t100.0000\t100.0000"


class TestPacking:
    def test_offsets_and_mask(self):
        offsets, total, mask = pack([3, 2], 4)
        assert offsets == [0, 7] and total == 9
        assert list(mask[0]) == [1, 1, 1, 0, 0, 0, 0, 1, 1]

    def test_packed_matches_padded_batch(self):
        corpus = small_corpus(3)
        with precision(64):
            m = tiny_duration(blocks=NO_DROPOUT)
            packed = float(duration_loss(m, corpus, None).data)
            lengths = [len(u.tokens) for u in corpus]
            width = max(lengths)
            ids = np.zeros((3, width), dtype=int)
            tgt = np.zeros((3, width), dtype=int)
            mask = np.zeros((3, width), dtype=bool)
            for i, u in enumerate(corpus):
                ids[i, :lengths[i]] = u.tokens.ids
                tgt[i, :lengths[i]] = u.durations
                mask[i, :lengths[i]] = True
            padded = float(xe_loss(m(ids, mask, None), duration_to_class(tgt), mask).data)
        assert packed == pytest.approx(padded, rel=1e-12)

    def test_masked_frames_do_not_matter(self):
        with precision(64):
            g = tiny_mel(blocks=NO_DROPOUT)
            ids = np.zeros((1, 4), dtype=int)
            pred = g(g.embed(ids, ids, np.ones((1, 4)), np.zeros((1, 4))))
            target = np.zeros((1, 80, 4))
            mask = np.array([[1, 1, 0, 0]], dtype=bool)
            garbage = target.copy()
            garbage[..., 2:] = 1e6
            assert float(mse_loss(pred, target, mask).data) == float(mse_loss(pred, garbage, mask).data)


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(aug_alpha=1.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(epochs=0)

    def test_default_epochs(self):
        assert TrainConfig().epochs == 200

    @pytest.mark.parametrize("head", [L2, XE])
    def test_deterministic_and_final_lr(self, head):
        corpus = small_corpus()
        cfg = TrainConfig(epochs=3, batch_size=2, seed=5)
        a, b = tiny_duration(head), tiny_duration(head)
        sa = train_duration(a, corpus, cfg)
        sb = train_duration(b, corpus, cfg)
        for x, y in zip(a.state_arrays().values(), b.state_arrays().values()):
            assert np.array_equal(x, y)
        assert sa.curve == sb.curve
        assert sa.curve[-1][3] == 1e-5
        assert all(np.isfinite(row[2]) for row in sa.curve)

    def test_mel_augment_changes_inputs_not_shapes(self):
        corpus = small_corpus()
        cfg = TrainConfig(epochs=2, batch_size=4, seed=0, p_aug=1.0, aug_alpha=0.5)
        plain = train_mel(tiny_mel(), corpus, cfg, augment=False)
        aug = train_mel(tiny_mel(), corpus, cfg, augment=True)
        assert len(plain.curve) == len(aug.curve)
        assert plain.curve[0][2] != aug.curve[0][2]

    def test_nan_aborts(self):
        corpus = small_corpus(2)
        m = tiny_duration()
        m.table.data[...] = np.nan
        with pytest.raises(TrainingDivergedError, match="step 0"):
            train_duration(m, corpus, TrainConfig(epochs=1))

    def test_rejects_mismatched_utterance(self, caplog):
        corpus = small_corpus(2)
        corpus[1].mel = corpus[1].mel[:-1]
        with caplog.at_level(logging.WARNING):
            kept = check_corpus(corpus, need_mel=True)
        assert len(kept) == 1
        assert "durations sum to" in caplog.text

    def test_utterance_length_check(self):
        tokens = insert_blanks(tokenize("ab", VOCAB))
        with pytest.raises(InvalidInputError):
            Utterance("x", tokens, [1, 1, 1])

    def test_curve_lines(self):
        assert curve_lines([(0, 1, 0.5, 1e-3)]) == ["epoch\tstep\tloss\tlr", "0\t1\t0.5\t0.001"]


class TestSynthesis:
    def test_lengths_and_audio(self):
        res = synthesize("hello world", tiny_duration(), tiny_mel(), VOCAB, gl_iterations=2)
        assert res.mel.num_frames == int(res.durations.sum())
        assert np.all(np.isfinite(res.waveform.samples))
        assert np.all(res.durations[1::2] >= 1)

    def test_doubling_durations_doubles_mel(self):
        one = synthesize("abc", tiny_duration(), tiny_mel(), VOCAB, gl_iterations=0)
        two = synthesize("abc", tiny_duration(), tiny_mel(), VOCAB, gl_iterations=0,
                         duration_transform=lambda d: 2 * d)
        assert two.mel.num_frames == 2 * one.mel.num_frames

    def test_speed_scaling(self):
        blank = np.array([True, False, True, False, True])
        d = np.array([4, 3, 0, 1, 5])
        assert list(scale_durations(d, blank, 0.5)) == [8, 6, 0, 2, 10]
        assert list(scale_durations(d, blank, 4.0)) == [1, 1, 0, 1, 1]
        with pytest.raises(InvalidArgumentError):
            scale_durations(d, blank, 0.0)

    def test_empty_text(self):
        with pytest.raises(InvalidInputError):
            synthesize("   ", tiny_duration(), tiny_mel(), VOCAB)


class TestBenchmark:
    def test_report(self):
        rep = benchmark_latency(tiny_mel(), [16, 32], repeats=2)
        assert [r[0] for r in rep.rows] == [16, 32]
        assert rep.exponent is not None
        lines = rep.lines()
        assert lines[0] == "length\tseconds\tframes_per_s"
        assert lines[-1].startswith("#exponent\t")

    def test_single_length_no_exponent(self):
        rep = benchmark_latency(tiny_mel(), [16], repeats=2)
        assert rep.exponent is None
        assert len(rep.lines()) == 2

import wave

import numpy as np
import pytest

from talknet.checkpoint import load_checkpoint, save_checkpoint
from talknet.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from talknet.models import BlockSpec, MelGenerator
from talknet.text import Vocabulary


def run(*argv):
    return main([str(a) for a in argv])


def wav_seconds(path):
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("--seed", 3, "make-synthetic-corpus", "--out-dir", out, "--count", 16) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(corpus_dir):
    """Full-size models after a couple of epochs on four utterances (enough for plumbing)."""
    ini = corpus_dir / "talknet.ini"
    assert run("extract-durations", "--config", ini) == EXIT_OK
    small = corpus_dir / "small.csv"
    small.write_text("".join((corpus_dir / "metadata.csv").read_text().splitlines(True)[:4]), encoding="utf-8")
    runs = corpus_dir / "runs"
    common = ["--config", ini, "--manifest", small, "--epochs", 2, "--out-dir", runs]
    assert run("train-duration", *common) == EXIT_OK
    assert run("train-mel", *common) == EXIT_OK
    return runs


class TestCorpusAndExtraction:
    def test_corpus_layout(self, corpus_dir):
        lines = (corpus_dir / "metadata.csv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 16
        assert len(list((corpus_dir / "wavs").glob("*.wav"))) == 16
        assert len(list((corpus_dir / "ctc").glob("*.ctcm"))) == 16

    def test_extract_all(self, corpus_dir, tmp_path):
        out = tmp_path / "dur"
        rc = run("extract-durations", "--manifest", corpus_dir / "metadata.csv", "--ctc-dir", corpus_dir / "ctc",
                 "--out-dir", out)
        assert rc == EXIT_OK
        assert len(list(out.glob("*.dur"))) == 16
        assert (out / "summary.tsv").read_text().splitlines()[-1] == "#extracted\t16\t#rejected\t0"
        assert (out / "durations.png").stat().st_size > 0
        for ref in (corpus_dir / "reference").glob("*.dur"):
            assert (out / ref.name).read_text() == ref.read_text()

    def test_one_corrupt_matrix(self, corpus_dir, tmp_path):
        ctc = tmp_path / "ctc"
        ctc.mkdir()
        for f in (corpus_dir / "ctc").glob("*.ctcm"):
            (ctc / f.name).write_bytes(f.read_bytes())
        victim = sorted(ctc.glob("*.ctcm"))[5]
        victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
        out = tmp_path / "dur"
        rc = run("extract-durations", "--manifest", corpus_dir / "metadata.csv", "--ctc-dir", ctc, "--out-dir", out)
        assert rc == EXIT_OK
        assert len(list(out.glob("*.dur"))) == 15
        summary = (out / "summary.tsv").read_text()
        assert "#extracted\t15\t#rejected\t1" in summary
        assert f"{victim.stem}\trejected" in summary

    def test_empty_manifest(self, corpus_dir, tmp_path):
        (tmp_path / "m.csv").write_text("", encoding="utf-8")
        rc = run("extract-durations", "--manifest", tmp_path / "m.csv", "--ctc-dir", corpus_dir / "ctc",
                 "--out-dir", tmp_path / "o")
        assert rc != EXIT_OK

    def test_all_rejected_is_failure(self, corpus_dir, tmp_path):
        (tmp_path / "ctc").mkdir()
        rc = run("extract-durations", "--manifest", corpus_dir / "metadata.csv", "--ctc-dir", tmp_path / "ctc",
                 "--out-dir", tmp_path / "o")
        assert rc == EXIT_FAILURE


class TestTrainCommands:
    def test_outputs(self, trained):
        for name in ("duration.ckpt", "duration_loss.tsv", "duration_loss.png", "duration_eval.tsv",
                     "mel.ckpt", "mel_loss.tsv", "mel_loss.png"):
            assert (trained / name).stat().st_size > 0
        log = (trained / "duration_loss.tsv").read_text().splitlines()
        assert log[0] == "epoch\tstep\tloss\tlr"
        assert len(log) == 1 + 2
        assert float(log[-1].split("\t")[3]) == 1e-5
        assert (trained / "duration_eval.tsv").read_text().splitlines()[0] == "mse\tacc\twithin1\twithin3"

    def test_bad_config_fails_before_training(self, corpus_dir, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\naug_alpha = 2\n", encoding="utf-8")
        assert run("train-mel", "--config", bad, "--out-dir", tmp_path / "o") == EXIT_USAGE
        assert not (tmp_path / "o").exists()

    def test_missing_duration_file_named(self, corpus_dir, tmp_path, caplog):
        rc = run("train-duration", "--config", corpus_dir / "talknet.ini", "--durations-dir", tmp_path,
                 "--out-dir", tmp_path / "o")
        assert rc == EXIT_USAGE
        assert str(tmp_path / "utt0000.dur") in caplog.text

    def test_resume_identical(self, corpus_dir, tmp_path, trained):
        small = corpus_dir / "small.csv"
        base = ["--config", corpus_dir / "talknet.ini", "--manifest", small, "--epochs", 2]
        assert run("train-duration", *base, "--out-dir", tmp_path / "full") == EXIT_OK
        assert run("train-duration", *base, "--out-dir", tmp_path / "half", "--stop-after", 1,
                   "--checkpoint-every", 1) == EXIT_OK
        mid = tmp_path / "half" / "duration_epoch0001.ckpt"
        assert run("train-duration", *base, "--out-dir", tmp_path / "rest", "--resume", mid) == EXIT_OK
        assert (tmp_path / "full" / "duration.ckpt").read_bytes() == (tmp_path / "rest" / "duration.ckpt").read_bytes()


class TestSynthesize:
    def test_speed_halves(self, trained, tmp_path):
        args = ["--dur-ckpt", trained / "duration.ckpt", "--mel-ckpt", trained / "mel.ckpt", "--gl-iterations", 2]
        assert run("synthesize", "--text", "abc", "--out", tmp_path / "a.wav", *args) == EXIT_OK
        assert run("synthesize", "--text", "abc", "--out", tmp_path / "b.wav", "--speed", 0.5, *args) == EXIT_OK
        a, b = wav_seconds(tmp_path / "a.wav"), wav_seconds(tmp_path / "b.wav")
        hop = 0.0125
        assert abs(b - 2 * a) <= 7 * hop + 0.05
        assert (tmp_path / "a.png").stat().st_size > 0

    def test_text_file(self, trained, tmp_path):
        (tmp_path / "t.txt").write_text("one\ntwo\nthree\n", encoding="utf-8")
        rc = run("synthesize", "--text-file", tmp_path / "t.txt", "--out", tmp_path / "o.wav",
                 "--dur-ckpt", trained / "duration.ckpt", "--mel-ckpt", trained / "mel.ckpt", "--gl-iterations", 1)
        assert rc == EXIT_OK
        assert sorted(p.name for p in tmp_path.glob("o_*.wav")) == ["o_1.wav", "o_2.wav", "o_3.wav"]

    def test_vocab_mismatch(self, trained, tmp_path):
        vocab = Vocabulary(list("~¤abc"))
        save_checkpoint(tmp_path / "m.ckpt", MelGenerator(len(vocab), 80, 4, (BlockSpec(1, 4, 3, 0.0, False),)), vocab)
        rc = run("synthesize", "--text", "a", "--out", tmp_path / "x.wav",
                 "--dur-ckpt", trained / "duration.ckpt", "--mel-ckpt", tmp_path / "m.ckpt")
        assert rc != EXIT_OK

    def test_needs_one_text_source(self, trained, tmp_path):
        rc = run("synthesize", "--out", tmp_path / "x.wav", "--dur-ckpt", trained / "duration.ckpt",
                 "--mel-ckpt", trained / "mel.ckpt")
        assert rc == EXIT_USAGE


class TestBenchmark:
    def test_table_to_stdout(self, trained, capsys):
        assert run("benchmark", "--mel-ckpt", trained / "mel.ckpt", "--lengths", "16,32,64", "--repeats", 2) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "length\tseconds\tframes_per_s"
        assert len(lines) == 5 and lines[-1].startswith("#exponent\t")

    def test_single_length_file(self, trained, tmp_path):
        out = tmp_path / "bench.tsv"
        assert run("benchmark", "--mel-ckpt", trained / "mel.ckpt", "--lengths", "16", "--repeats", 2,
                   "--out", out) == EXIT_OK
        assert len(out.read_text().splitlines()) == 2
        assert (tmp_path / "bench.png").stat().st_size > 0

    def test_bad_lengths(self, trained):
        assert run("benchmark", "--mel-ckpt", trained / "mel.ckpt", "--lengths", "a,b") == EXIT_USAGE


def test_precision_flag_sets_checkpoint_width(corpus_dir, tmp_path):
    small = corpus_dir / "small.csv"
    rc = run("--precision", 64, "train-duration", "--config", corpus_dir / "talknet.ini", "--manifest", small,
             "--epochs", 1, "--out-dir", tmp_path)
    main_rc_reset = run("--precision", 32, "benchmark", "--mel-ckpt", tmp_path / "missing", "--lengths", "4")
    assert rc == EXIT_OK
    assert main_rc_reset == EXIT_FAILURE
    ck = load_checkpoint(tmp_path / "duration.ckpt")
    assert ck.dtype == "f8"
    assert np.isfinite(ck.model.parameters()[0].data).all()


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE

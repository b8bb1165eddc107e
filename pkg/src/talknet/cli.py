"""``talknet`` command line.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
Logs go to stderr; tables, checkpoints, audio and figures go to files.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from talknet import align, audio, plotting, training
from talknet.checkpoint import load_checkpoint, restore_state, save_checkpoint
from talknet.config import PipelineConfig, dump_config, load_config
from talknet.errors import InvalidArgumentError, TalkNetError
from talknet.models import L2, XE, build_duration_predictor, build_mel_generator
from talknet.numeric import RngState, set_precision
from talknet.text import DEFAULT_SYMBOLS, Vocabulary

log = logging.getLogger("talknet")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_LENGTHS = (128, 256, 512, 1024, 2048)


class UsageError(Exception):
    pass


# Helpers --------------------------------------------------------------------

def _pipeline(args):
    """Config file (if any) overridden by explicit flags and the global seed."""
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    for key in ("manifest", "ctc_dir", "durations_dir", "wav_dir", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, Path(value))
    if getattr(args, "head", None):
        cfg.head = args.head
    if getattr(args, "checkpoint_every", None) is not None:
        cfg.checkpoint_every = args.checkpoint_every
    overrides = {}
    for key in ("epochs", "batch_size"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg.train = dataclasses.replace(cfg.train, **overrides)
    cfg = PipelineConfig(**{f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)})
    if cfg.wav_dir is None and cfg.manifest is not None:
        cfg.wav_dir = cfg.manifest.parent / "wavs"
    return cfg


def _write_lines(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _load_training_corpus(cfg, vocab, with_mel):
    entries = audio.load_manifest(cfg.manifest)
    if not entries:
        raise InvalidArgumentError(f"{cfg.manifest}: manifest has no entries")
    paths = [(Path(cfg.durations_dir) / (Path(wav).stem + ".dur"), wav, text) for wav, text in entries]
    for dur_path, wav, _ in paths:
        if not dur_path.is_file():
            raise InvalidArgumentError(f"missing duration file {dur_path} (run extract-durations first)")
        if with_mel and not (Path(cfg.wav_dir) / wav).is_file():
            raise InvalidArgumentError(f"missing audio file {Path(cfg.wav_dir) / wav}")
    corpus = []
    for dur_path, wav, text in paths:
        dmap = align.read_durations(dur_path)
        mel = None
        if with_mel:
            w = audio.read_wav(Path(cfg.wav_dir) / wav)
            mel = audio.mel_spectrogram(w, cfg.mel).frames
        try:
            corpus.append(training.make_utterance(Path(wav).stem, text, dmap, vocab, mel))
        except TalkNetError as exc:
            log.warning("rejecting %s: %s", wav, exc)
    return training.check_corpus(corpus, need_mel=with_mel)


# Commands -------------------------------------------------------------------

def cmd_make_synthetic_corpus(args):
    out = Path(args.out_dir)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    (out / "ctc").mkdir(exist_ok=True)
    (out / "reference").mkdir(exist_ok=True)
    rng = RngState(args.seed or 0)
    cfg = audio.MelConfig()
    items = audio.synth_corpus(args.count, rng, cfg)
    vocab = list(DEFAULT_SYMBOLS)
    entries = []
    for i, item in enumerate(items):
        stem = f"utt{i:04d}"
        audio.write_wav(out / "wavs" / f"{stem}.wav", item.waveform)
        matrix = align.oracle_matrix(item.durations.tokens, item.durations.durations, vocab, rng.spawn(10_000 + i))
        align.write_ctc_matrix(out / "ctc" / f"{stem}.ctcm", matrix)
        align.write_durations(out / "reference" / f"{stem}.dur", item.durations)
        entries.append((f"{stem}.wav", item.transcript))
    audio.write_manifest(out / "metadata.csv", entries)
    pipeline = PipelineConfig(
        manifest=Path("metadata.csv"),
        ctc_dir=Path("ctc"),
        durations_dir=Path("durations"),
        wav_dir=Path("wavs"),
        out_dir=Path("runs"),
        mel=cfg,
        train=training.TrainConfig(epochs=args.epochs, seed=args.seed or 0),
    )
    dump_config(pipeline, out / "talknet.ini")
    log.info("wrote %d utterances to %s", len(items), out)
    return EXIT_OK


def cmd_extract_durations(args):
    cfg = _pipeline(args)
    cfg.require("manifest", "ctc_dir", "durations_dir", files=("manifest",), dirs=("ctc_dir",))
    entries = audio.load_manifest(cfg.manifest)
    if not entries:
        raise UsageError(f"{cfg.manifest}: manifest has no entries")
    out = Path(cfg.durations_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = ["utterance\tstatus\tframes\tdetail"]
    ok = 0
    all_d, all_blank = [], []
    for wav, text in entries:
        stem = Path(wav).stem
        try:
            matrix = align.read_ctc_matrix(Path(cfg.ctc_dir) / f"{stem}.ctcm")
            dmap = align.extract_durations(matrix, text)
        except (OSError, TalkNetError) as exc:
            reason = exc.strerror if isinstance(exc, OSError) else str(exc)
            log.warning("skipping %s: %s", stem, reason)
            summary.append(f"{stem}\trejected\t0\t{reason}")
            continue
        align.write_durations(out / f"{stem}.dur", dmap)
        summary.append(f"{stem}\tok\t{dmap.total_frames}\t")
        all_d.append(dmap.durations)
        all_blank.append(dmap.is_blank())
        ok += 1
    rejected = len(entries) - ok
    summary.append(f"#extracted\t{ok}\t#rejected\t{rejected}")
    _write_lines(out / "summary.tsv", summary)
    if ok:
        plotting.plot_duration_histogram(np.concatenate(all_d), np.concatenate(all_blank), out / "durations.png")
    log.info("extracted %d, rejected %d", ok, rejected)
    return EXIT_OK if ok else EXIT_FAILURE


def _train(args, kind):
    cfg = _pipeline(args)
    cfg.require("manifest", "durations_dir", "out_dir", files=("manifest",), dirs=("durations_dir",))
    vocab = Vocabulary()
    with_mel = kind == "mel"
    if with_mel:
        cfg.require(dirs=("wav_dir",))
    corpus = _load_training_corpus(cfg, vocab, with_mel)
    if not corpus:
        raise InvalidArgumentError("no usable utterances after ingestion checks")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"{kind}.ckpt"

    state = None
    if args.resume:
        ckpt = load_checkpoint(args.resume, expect_kind="duration" if kind == "duration" else "mel")
        if ckpt.vocab != vocab:
            raise InvalidArgumentError(f"{args.resume}: vocabulary differs from the current one")
        model = ckpt.model
        state = restore_state(ckpt, cfg.train)
        log.info("resuming %s from epoch %d", args.resume, state.epoch)
    elif kind == "duration":
        model = build_duration_predictor(cfg.head, len(vocab), seed=cfg.train.seed)
    else:
        model = build_mel_generator(len(vocab), n_mels=cfg.mel.n_mels, seed=cfg.train.seed)

    def on_epoch_end(st):
        log.info("epoch %d step %d loss %.5g", st.epoch, st.step, st.curve[-1][2])
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            path = out / f"{kind}_epoch{st.epoch:04d}.ckpt"
            save_checkpoint(path, model, vocab, cfg.mel, cfg.train.seed, state=st)

    if kind == "duration":
        state = training.train_duration(model, corpus, cfg.train, state=state, on_epoch_end=on_epoch_end,
                                        stop_after=args.stop_after)
    else:
        state = training.train_mel(model, corpus, cfg.train, augment=not args.no_augment, state=state,
                                   on_epoch_end=on_epoch_end, stop_after=args.stop_after)
    save_checkpoint(ckpt_path, model, vocab, cfg.mel, cfg.train.seed, state=state)
    _write_lines(out / f"{kind}_loss.tsv", training.curve_lines(state.curve))
    plotting.plot_loss_curve(state.curve, out / f"{kind}_loss.png", title=f"{kind} training loss")
    if kind == "duration":
        report = training.evaluate_durations(model, corpus)
        _write_lines(out / "duration_eval.tsv", [training.EVAL_HEADER, report.line()])
        log.info("train-set %s", report)
    else:
        mse = training.evaluate_mel(model, corpus)
        _write_lines(out / "mel_eval.tsv", ["mse", f"{mse:.6g}"])
        log.info("train-set mel mse %.5g", mse)
    return EXIT_OK


def cmd_train_duration(args):
    return _train(args, "duration")


def cmd_train_mel(args):
    return _train(args, "mel")


def cmd_synthesize(args):
    if (args.text is None) == (args.text_file is None):
        raise UsageError("give exactly one of --text or --text-file")
    if args.speed <= 0:
        raise UsageError("--speed must be positive")
    dur = load_checkpoint(args.dur_ckpt, expect_kind="duration")
    mel = load_checkpoint(args.mel_ckpt, expect_kind="mel")
    if dur.vocab != mel.vocab:
        raise InvalidArgumentError("duration and mel checkpoints use different vocabularies")
    if args.text is not None:
        texts = [args.text]
    else:
        texts = [t for t in Path(args.text_file).read_text(encoding="utf-8").splitlines() if t.strip()]
        if not texts:
            raise InvalidArgumentError(f"{args.text_file}: no text lines")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for i, text in enumerate(texts, 1):
        target = out if len(texts) == 1 else out.with_name(f"{out.stem}_{i}{out.suffix}")
        result = training.synthesize(text, dur.model, mel.model, dur.vocab, mel.mel_config, speed=args.speed,
                                     gl_iterations=args.gl_iterations, seed=args.seed or 0)
        audio.write_wav(target, result.waveform)
        plotting.plot_mel(result.mel.frames, target.with_suffix(".png"), title=text[:60])
        log.info("%s: %d frames, %.2f s", target, result.mel.num_frames, result.waveform.duration)
    return EXIT_OK


def cmd_benchmark(args):
    ckpt = load_checkpoint(args.mel_ckpt, expect_kind="mel")
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--lengths: {exc}") from exc
    if not lengths or min(lengths) < 1:
        raise UsageError("--lengths needs positive integers")
    report = training.benchmark_latency(ckpt.model, lengths, repeats=args.repeats, seed=args.seed or 0)
    lines = report.lines()
    if args.out:
        _write_lines(args.out, lines)
        plotting.plot_latency(report, Path(args.out).with_suffix(".png"))
    else:
        sys.stdout.write("".join(line + "\n" for line in lines))
    return EXIT_OK


# Parser ---------------------------------------------------------------------

def _path_flags(p, *names):
    helps = {
        "manifest": "metadata file, stem|transcript per line",
        "ctc_dir": "directory of <stem>.ctcm matrices",
        "durations_dir": "directory of <stem>.dur files",
        "wav_dir": "directory of audio (default: <manifest dir>/wavs)",
        "out_dir": "output directory",
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, help=helps[name])


def _train_flags(p):
    p.add_argument("--config", help="INI file with [paths] [model] [mel] [train] sections")
    _path_flags(p, "manifest", "durations_dir", "wav_dir", "out_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--checkpoint-every", type=int, help="save a resumable checkpoint every K epochs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop after this epoch (schedule still spans --epochs)")


def build_parser():
    parser = argparse.ArgumentParser(prog="talknet", description="Non-autoregressive grapheme TTS toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=32, help="float width")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic-corpus", help="write a toy corpus with exact durations")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--epochs", type=int, default=200, help="epochs written into the generated config")
    p.set_defaults(func=cmd_make_synthetic_corpus)

    p = sub.add_parser("extract-durations", help="CTC matrices -> per-token durations")
    p.add_argument("--config")
    _path_flags(p, "manifest", "ctc_dir")
    p.add_argument("--out-dir", dest="durations_dir", help="where .dur files go")
    p.set_defaults(func=cmd_extract_durations)

    p = sub.add_parser("train-duration", help="train the duration predictor")
    _train_flags(p)
    p.add_argument("--head", choices=(L2, XE))
    p.set_defaults(func=cmd_train_duration)

    p = sub.add_parser("train-mel", help="train the mel generator")
    _train_flags(p)
    p.add_argument("--no-augment", action="store_true", help="disable duration augmentation")
    p.set_defaults(func=cmd_train_mel)

    p = sub.add_parser("synthesize", help="text -> WAV")
    p.add_argument("--text")
    p.add_argument("--text-file", help="one utterance per line; outputs get _1, _2, ... suffixes")
    p.add_argument("--dur-ckpt", required=True)
    p.add_argument("--mel-ckpt", required=True)
    p.add_argument("--out", required=True, help="output .wav path")
    p.add_argument("--speed", type=float, default=1.0)
    p.add_argument("--gl-iterations", type=int, default=60)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("benchmark", help="generator latency vs length")
    p.add_argument("--mel-ckpt", required=True)
    p.add_argument("--lengths", default=",".join(map(str, DEFAULT_LENGTHS)))
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", help="write the table (and a plot) here instead of stdout")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    set_precision(args.precision)
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (TalkNetError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

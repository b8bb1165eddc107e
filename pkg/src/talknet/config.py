"""Pipeline configuration from an INI-style ``key = value`` file."""

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from talknet.audio import MelConfig
from talknet.errors import InvalidArgumentError, InvalidInputError
from talknet.models import L2, XE
from talknet.training import TrainConfig

PATH_KEYS = ("manifest", "ctc_dir", "durations_dir", "wav_dir", "out_dir")


@dataclass
class PipelineConfig:
    manifest: Path | None = None
    ctc_dir: Path | None = None
    durations_dir: Path | None = None
    wav_dir: Path | None = None
    out_dir: Path | None = None
    head: str = XE
    checkpoint_every: int = 0
    mel: MelConfig = field(default_factory=MelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.head not in (L2, XE):
            raise InvalidArgumentError(f"head must be {L2!r} or {XE!r}, got {self.head!r}")
        if self.checkpoint_every < 0:
            raise InvalidArgumentError("checkpoint_every must be >= 0")

    def require(self, *names, dirs=(), files=()):
        """Check named paths are set (and exist when listed in dirs/files)."""
        for name in names:
            if getattr(self, name) is None:
                raise InvalidArgumentError(f"missing required setting {name!r}")
        for name in dirs:
            if not Path(getattr(self, name)).is_dir():
                raise InvalidArgumentError(f"{name}: directory {getattr(self, name)} does not exist")
        for name in files:
            if not Path(getattr(self, name)).is_file():
                raise InvalidArgumentError(f"{name}: file {getattr(self, name)} does not exist")


def _coerce(cls, section, values):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise InvalidArgumentError(f"[{section}] unknown key {key!r}")
        kind = str(types[key])
        try:
            if "int" in kind and "float" not in kind:
                out[key] = int(raw)
            elif "float" in kind:
                out[key] = float(raw)
            else:
                out[key] = raw
        except ValueError as exc:
            raise InvalidArgumentError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


def load_config(path):
    """Read sections [paths], [model], [mel] and [train]; relative paths resolve against the file."""
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc
    unknown = set(parser.sections()) - {"paths", "model", "mel", "train"}
    if unknown:
        raise InvalidArgumentError(f"{path}: unknown section(s) {sorted(unknown)}")
    kwargs = {}
    if parser.has_section("paths"):
        for key, value in parser.items("paths"):
            if key not in PATH_KEYS:
                raise InvalidArgumentError(f"[paths] unknown key {key!r}")
            p = Path(value)
            kwargs[key] = p if p.is_absolute() else path.parent / p
    if parser.has_section("model"):
        model = dict(parser.items("model"))
        if "head" in model:
            kwargs["head"] = model.pop("head")
        if "checkpoint_every" in model:
            every = {"checkpoint_every": model.pop("checkpoint_every")}
            kwargs.update(_coerce(PipelineConfig, "model", every))
        if model:
            raise InvalidArgumentError(f"[model] unknown key(s) {sorted(model)}")
    if parser.has_section("mel"):
        try:
            kwargs["mel"] = MelConfig(**_coerce(MelConfig, "mel", dict(parser.items("mel"))))
        except InvalidInputError as exc:
            raise InvalidArgumentError(f"[mel] {exc}") from exc
    if parser.has_section("train"):
        kwargs["train"] = TrainConfig(**_coerce(TrainConfig, "train", dict(parser.items("train"))))
    return PipelineConfig(**kwargs)


def dump_config(cfg, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser["paths"] = {k: str(getattr(cfg, k)) for k in PATH_KEYS if getattr(cfg, k) is not None}
    parser["model"] = {"head": cfg.head, "checkpoint_every": str(cfg.checkpoint_every)}
    parser["mel"] = {k: str(v) for k, v in cfg.mel.to_dict().items()}
    parser["train"] = {k: str(v) for k, v in dataclasses.asdict(cfg.train).items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)

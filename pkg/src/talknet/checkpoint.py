"""Binary checkpoints: model tensors, config and optional optimizer state.

Layout (little-endian)::

    b"TNET" | u32 version | u32 n | n bytes of UTF-8 JSON metadata
    repeated: u32 name_len | name | u32 rank | rank * u32 dims | raw floats

Metadata is dumped with sorted keys and tensors are written in sorted name
order, so saving a freshly loaded checkpoint reproduces the file byte for byte.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from talknet.audio import MelConfig
from talknet.errors import CheckpointError
from talknet.models import model_from_arch
from talknet.numeric import Adam, RngState
from talknet.text import Vocabulary

MAGIC = b"TNET"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}

OPT_M = "optim.m."
OPT_V = "optim.v."


def write_raw(path, meta, tensors, dtype="f4"):
    """Serialize a metadata dict and {name: array} mapping."""
    meta = dict(meta, dtype=dtype)
    doc = json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(doc)), doc]
    np_dtype = _DTYPES[dtype]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np_dtype)
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_raw(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    pos = 12 + n
    try:
        meta = json.loads(raw[12:pos].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    dtype = _DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise CheckpointError(f"{path}: unknown tensor dtype {meta.get('dtype')!r}")
    tensors = {}
    try:
        while pos < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + count * dtype.itemsize > len(raw):
                raise CheckpointError(f"{path}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += count * dtype.itemsize
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt tensor table") from exc
    return meta, tensors


@dataclass
class Checkpoint:
    kind: str
    model: object
    vocab: Vocabulary
    mel_config: MelConfig
    seed: int
    meta: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # raw m/v arrays by name
    dtype: str = "f4"

    @property
    def training(self):
        """Saved training progress (epoch, step, rng, adam_t, curve) or None."""
        return self.meta.get("training")


def save_checkpoint(path, model, vocab, mel_config=None, seed=0, state=None, extra=None, dtype=None):
    """Write ``model`` plus config.  ``state`` is an optional training.TrainState."""
    mel_config = mel_config or MelConfig()
    if dtype is None:
        dtype = "f8" if model.parameters()[0].data.dtype == np.float64 else "f4"
    meta = {
        "kind": model.kind,
        "arch": model.arch,
        "vocabulary": vocab.serialize(),
        "mel_config": mel_config.to_dict(),
        "seed": int(seed),
    }
    if extra:
        meta["extra"] = extra
    tensors = dict(model.state_arrays())
    if state is not None:
        names = [name for name, _ in model.named_parameters()]
        for name, m, v in zip(names, state.optimizer.m, state.optimizer.v):
            tensors[OPT_M + name] = m
            tensors[OPT_V + name] = v
        meta["training"] = {
            "epoch": state.epoch,
            "step": state.step,
            "adam_t": state.optimizer.t,
            "rng": state.rng.get_state(),
            "curve": [list(row) for row in state.curve],
        }
    write_raw(path, meta, tensors, dtype)


def resave(path, ckpt):
    """Write a loaded checkpoint back out unchanged."""
    tensors = dict(ckpt.model.state_arrays())
    tensors.update(ckpt.optimizer)
    write_raw(path, {k: v for k, v in ckpt.meta.items() if k != "dtype"}, tensors, ckpt.dtype)


def load_checkpoint(path, expect_kind=None):
    meta, tensors = read_raw(path)
    for key in ("kind", "arch", "vocabulary", "mel_config", "seed"):
        if key not in meta:
            raise CheckpointError(f"{path}: metadata lacks {key!r}")
    if expect_kind is not None and meta["kind"] != expect_kind:
        raise CheckpointError(f"{path}: holds a {meta['kind']} model, expected {expect_kind}")
    try:
        model = model_from_arch(meta["kind"], meta["arch"])
        optimizer = {k: v for k, v in tensors.items() if k.startswith("optim.")}
        model.load_state_arrays({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        vocab = Vocabulary.deserialize(meta["vocabulary"])
        mel_config = MelConfig.from_dict(meta["mel_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    model.eval()
    return Checkpoint(meta["kind"], model, vocab, mel_config, meta["seed"], meta, optimizer, meta["dtype"])


def restore_state(ckpt, cfg=None):
    """Rebuild a training.TrainState (optimizer moments, rng, counters) from a checkpoint."""
    from talknet.training import TrainState

    saved = ckpt.training
    if saved is None:
        raise CheckpointError("checkpoint carries no training state")
    kwargs = {}
    if cfg is not None:
        kwargs = dict(betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, weight_decay=cfg.weight_decay)
    opt = Adam(ckpt.model.parameters(), **kwargs)
    names = [name for name, _ in ckpt.model.named_parameters()]
    for i, name in enumerate(names):
        try:
            opt.m[i][...] = ckpt.optimizer[OPT_M + name]
            opt.v[i][...] = ckpt.optimizer[OPT_V + name]
        except KeyError as exc:
            raise CheckpointError(f"optimizer state lacks {exc.args[0]!r}") from exc
    opt.t = int(saved["adam_t"])
    return TrainState(
        optimizer=opt,
        rng=RngState.from_state(saved["rng"]),
        epoch=int(saved["epoch"]),
        step=int(saved["step"]),
        curve=[tuple(row) for row in saved["curve"]],
    )

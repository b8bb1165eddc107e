"""QuartzNet-style duration predictor and mel-spectrogram generator.

Both networks are stacks of time-channel separable sub-blocks: depthwise
conv over time, 1x1 pointwise conv, batch norm, ReLU, dropout.  Residual
blocks add a 1x1 conv + batch-norm projection of their input before the last
ReLU.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from talknet.errors import InvalidArgumentError
from talknet.numeric import ops
from talknet.numeric.ops import BatchNormState
from talknet.numeric.rng import RngState
from talknet.numeric.tensor import Tensor, get_dtype

L2 = "l2"
XE = "xe"
XE_CLASSES = 32


@dataclass(frozen=True)
class BlockSpec:
    n_sub_blocks: int
    out_channels: int
    kernel: int
    dropout: float
    residual: bool

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise InvalidArgumentError(f"kernel must be odd, got {self.kernel}")
        if not 0 <= self.dropout < 1:
            raise InvalidArgumentError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_sub_blocks < 1 or self.out_channels < 1:
            raise InvalidArgumentError("n_sub_blocks and out_channels must be positive")


def _blocks(rows, dropout):
    return tuple(BlockSpec(n, c, k, dropout, res) for n, c, k, res in rows)


# Conv1, B1..B5, Conv2; the output conv is added by the model.
DURATION_BLOCKS = _blocks(
    [(3, 256, 3, False), (5, 256, 5, True), (5, 256, 7, True), (5, 256, 9, True),
     (5, 256, 11, True), (5, 256, 13, True), (1, 512, 1, False)],
    dropout=0.1,
)

# Conv1, B1..B9, Conv2.
MEL_BLOCKS = _blocks(
    [(3, 256, 3, False), (5, 256, 5, True), (5, 256, 7, True), (5, 256, 9, True),
     (5, 256, 13, True), (5, 256, 15, True), (5, 256, 17, True), (5, 512, 21, True),
     (5, 512, 23, True), (5, 512, 25, True), (1, 1024, 1, False)],
    dropout=0.0,
)


class Module:
    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}
        self.training = True

    def add_param(self, name, data):
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        """Batch-norm running statistics, as (name, ndarray) pairs."""
        for name, state in self._buffers.items():
            yield f"{prefix}{name}.running_mean", state.running_mean
            yield f"{prefix}{name}.running_var", state.running_var
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_arrays(self):
        """Every parameter and buffer, by name, in a fixed order."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays):
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise InvalidArgumentError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, value in arrays.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != value.shape:
                raise InvalidArgumentError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def kaiming_uniform(shape, fan_in, rng):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm(Module):
    def __init__(self, channels):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.state = BatchNormState.fresh(channels)
        self._buffers["bn"] = self.state

    def __call__(self, x, mask):
        return ops.batch_norm1d(x, self.gamma, self.beta, self.state, self.training, mask)


class Pointwise(Module):
    def __init__(self, c_in, c_out, rng, bias=False):
        super().__init__()
        self.weight = self.add_param("weight", kaiming_uniform((c_out, c_in, 1), c_in, rng))
        self.bias = self.add_param("bias", np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return ops.conv1d(x, self.weight, self.bias)


class SubBlock(Module):
    """[depthwise conv(k)] -> pointwise conv -> BN -> (+residual) -> ReLU -> dropout."""

    def __init__(self, c_in, c_out, kernel, dropout, rng):
        super().__init__()
        self.kernel = kernel
        self.dropout = dropout
        self.groups = c_in
        self.depthwise = None
        if kernel > 1:
            self.depthwise = self.add_param("depthwise.weight", kaiming_uniform((c_in, 1, kernel), kernel, rng))
        self.pointwise = self.add_child("pointwise", Pointwise(c_in, c_out, rng))
        self.norm = self.add_child("norm", BatchNorm(c_out))

    def __call__(self, x, mask, rng, residual=None):
        if self.depthwise is not None:
            x = ops.conv1d(x, self.depthwise, groups=self.groups)
        h = self.norm(self.pointwise(x), mask)
        if residual is not None:
            h = ops.add(h, residual)
        h = ops.relu(h)
        return ops.dropout(h, self.dropout, rng, self.training)


class Block(Module):
    def __init__(self, c_in, spec, rng):
        super().__init__()
        self.spec = spec
        self.subs = []
        ch = c_in
        for i in range(spec.n_sub_blocks):
            self.subs.append(self.add_child(str(i), SubBlock(ch, spec.out_channels, spec.kernel, spec.dropout, rng)))
            ch = spec.out_channels
        if spec.residual:
            self.res_conv = self.add_child("residual", Pointwise(c_in, spec.out_channels, rng))
            self.res_norm = self.add_child("residual_norm", BatchNorm(spec.out_channels))

    def __call__(self, x, mask, rng):
        residual = None
        if self.spec.residual:
            residual = self.res_norm(self.res_conv(x), mask)
        h = x
        last = len(self.subs) - 1
        for i, sub in enumerate(self.subs):
            h = sub(h, mask, rng, residual if i == last else None)
        return h


class Encoder(Module):
    def __init__(self, c_in, blocks, c_out, rng):
        super().__init__()
        self.blocks = []
        ch = c_in
        for i, spec in enumerate(blocks):
            self.blocks.append(self.add_child(f"block{i}", Block(ch, spec, rng)))
            ch = spec.out_channels
        self.head = self.add_child("head", Pointwise(ch, c_out, rng, bias=True))

    def __call__(self, x, mask, rng):
        h = ops.mask_time(x, mask)
        for block in self.blocks:
            h = block(h, mask, rng)
        return self.head(h)


def _arch_dict(embed_dim, blocks, out_channels, **extra):
    return {"embed_dim": embed_dim, "blocks": [asdict(b) for b in blocks], "out_channels": out_channels, **extra}


def _blocks_from(arch):
    return tuple(BlockSpec(**b) for b in arch["blocks"])


class DurationPredictor(Module):
    kind = "duration"

    def __init__(self, vocab_size, head=L2, embed_dim=64, blocks=DURATION_BLOCKS, seed=0):
        super().__init__()
        if vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be at least 2")
        if head not in (L2, XE):
            raise InvalidArgumentError(f"head must be {L2!r} or {XE!r}, got {head!r}")
        rng = RngState(seed)
        self.vocab_size = vocab_size
        self.head_type = head
        out = 1 if head == L2 else XE_CLASSES
        self.arch = _arch_dict(embed_dim, blocks, out, head=head, vocab_size=vocab_size)
        self.table = self.add_param("embedding", rng.normal(0.0, 1.0, (vocab_size, embed_dim)) * 0.02)
        self.encoder = self.add_child("encoder", Encoder(embed_dim, blocks, out, rng))

    @classmethod
    def from_arch(cls, arch):
        return cls(arch["vocab_size"], arch["head"], arch["embed_dim"], _blocks_from(arch))

    def __call__(self, ids, mask=None, rng=None):
        """Token ids [L] or [B, L] -> head output [B, K, L]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        x = ops.embedding(ids, self.table)
        return self.encoder(x, mask, rng)


class MelGenerator(Module):
    kind = "mel"

    def __init__(self, vocab_size, n_mels=80, embed_dim=256, blocks=MEL_BLOCKS, seed=0):
        super().__init__()
        if vocab_size < 2:
            raise InvalidArgumentError("vocab_size must be at least 2")
        rng = RngState(seed)
        self.vocab_size = vocab_size
        self.n_mels = n_mels
        self.arch = _arch_dict(embed_dim, blocks, n_mels, vocab_size=vocab_size)
        self.table = self.add_param("embedding", rng.normal(0.0, 1.0, (vocab_size, embed_dim)) * 0.02)
        self.encoder = self.add_child("encoder", Encoder(embed_dim, blocks, n_mels, rng))

    @classmethod
    def from_arch(cls, arch):
        return cls(arch["vocab_size"], arch["out_channels"], arch["embed_dim"], _blocks_from(arch))

    def embed(self, left, right, w_left, w_right):
        return ops.interp_embedding(self.table, left, right, w_left, w_right)

    def __call__(self, embedded, mask=None, rng=None):
        """Expanded embedding [B, D, L] -> log-mel [B, n_mels, L] in one pass."""
        if embedded.ndim == 2:
            embedded = ops.reshape(embedded, (1,) + embedded.shape)
        if mask is None:
            mask = np.ones((embedded.shape[0], embedded.shape[2]), dtype=bool)
        return self.encoder(embedded, mask, rng)


def build_duration_predictor(head, vocab_size, **kwargs):
    return DurationPredictor(vocab_size, head=head, **kwargs)


def build_mel_generator(vocab_size, **kwargs):
    return MelGenerator(vocab_size, **kwargs)


def model_from_arch(kind, arch):
    if kind == DurationPredictor.kind:
        return DurationPredictor.from_arch(arch)
    if kind == MelGenerator.kind:
        return MelGenerator.from_arch(arch)
    raise InvalidArgumentError(f"unknown model kind {kind!r}")


# Duration targets ------------------------------------------------------------

def _bucket_edges():
    # classes 16..31: geometric bins from 16 to 512
    edges = np.round(16.0 * 32.0 ** (np.arange(17) / 16.0)).astype(np.int64)
    return edges


XE_EDGES = _bucket_edges()
XE_REPRESENTATIVES = np.concatenate([
    np.arange(16),
    np.round(np.sqrt(XE_EDGES[:-1] * XE_EDGES[1:])).astype(np.int64),
])


def duration_to_class(durations):
    d = np.asarray(durations, dtype=np.int64)
    geometric = 16 + np.searchsorted(XE_EDGES, d, side="right") - 1
    return np.where(d < 16, d, np.minimum(geometric, XE_CLASSES - 1))


def class_to_duration(classes):
    return XE_REPRESENTATIVES[np.asarray(classes, dtype=np.int64)]


def duration_to_log_target(durations):
    return np.log1p(np.asarray(durations, dtype=np.float64))


def decode_durations(head_output, head, is_blank=None):
    """Integer durations from head output ([L] for L2 or [K, L] / [1, L]).

    Non-blank tokens decoded as 0 are raised to 1 (no borrowing at inference).
    """
    y = np.asarray(head_output, dtype=np.float64)
    if head == L2:
        y = y.reshape(-1)
        d = np.maximum(np.rint(np.expm1(np.minimum(y, 20.0))), 0).astype(np.int64)
    elif head == XE:
        d = class_to_duration(np.argmax(y, axis=0))
    else:
        raise InvalidArgumentError(f"unknown head {head!r}")
    if is_blank is not None:
        d = np.where(~np.asarray(is_blank, dtype=bool) & (d < 1), 1, d)
    return d

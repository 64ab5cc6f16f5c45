"""Full encoder/decoder network, parameter accounting and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import blocks
from .blocks import (
    BatchNorm,
    CoBlockParams,
    Conv,
    DecoderBlockParams,
    IdentityBlockParams,
    MultiResBlockParams,
)
from .tensor_core import BatchNormState, ShapeError, Tensor, conv2d, default_dtype, dropout, maxpool2d, relu, sigmoid

REFERENCE_PARAMS = 8.88e6
PARAM_BAND = (7.1e6, 10.7e6)

CHECKPOINT_MAGIC = b"CRUN"
CHECKPOINT_VERSION = 1
_META_PREFIX = "__meta__:"
_END = "__end__"


class CheckpointError(ValueError):
    """Base class for unreadable or incompatible checkpoints."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the network.

    Level lists are ordered 1..5 (shallow to deep). ``decoder_skips[i]`` says
    whether decoder level i+1 fuses the encoder output O_E and the pooled
    output of the level above it, O_ME.
    """

    in_channels: int = 1
    input_size: tuple[int, int] = (256, 256)
    encoder_kinds: tuple[str, ...] = ("co", "co", "identity", "co", "multires")
    encoder_filters: tuple[int, ...] = (16, 32, 64, 128, 256)
    bottleneck_filters: int = 512
    decoder_kinds: tuple[str, ...] = ("co", "co", "identity", "co", "multires")
    decoder_filters: tuple[int, ...] = (4, 8, 16, 32, 64)
    decoder_skips: tuple[tuple[bool, bool], ...] = (
        (True, False),
        (True, True),
        (False, False),
        (True, True),
        (True, False),
    )
    dropout_rate: float = 0.5
    alpha: float = blocks.MULTIRES_ALPHA
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    bn_before_act: bool = False

    def __post_init__(self):
        levels = len(self.encoder_kinds)
        for name in ("encoder_filters", "decoder_kinds", "decoder_filters", "decoder_skips"):
            if len(getattr(self, name)) != levels:
                raise ValueError(f"{name} must have {levels} entries")
        for k in self.encoder_kinds + self.decoder_kinds:
            if k not in blocks.INNER_PARAMS:
                raise ValueError(f"unknown block kind {k!r}")
        if self.decoder_skips[0][1]:
            raise ValueError("decoder level 1 has no pooled encoder output above it")

    @property
    def levels(self) -> int:
        return len(self.encoder_kinds)

    @property
    def downsample(self) -> int:
        return 2**self.levels

    def with_input(self, h: int, w: int | None = None) -> ModelSpec:
        return dataclasses.replace(self, input_size=(h, w if w is not None else h))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(map(list, v)) if k == "decoder_skips" else list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        kw = dict(d)
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        return cls(**kw)

    def block_kw(self) -> dict:
        return {"momentum": self.bn_momentum, "eps": self.bn_eps}


def _make_block(kind: str, cin: int, filters: int, spec: ModelSpec, rng: np.random.Generator):
    bn = spec.block_kw()
    if kind == "co":
        return CoBlockParams.init(cin, filters, rng, bn_before_act=spec.bn_before_act, **bn)
    if kind == "identity":
        return IdentityBlockParams.init(cin, filters, rng, **bn)
    return MultiResBlockParams.init(cin, filters, rng, alpha=spec.alpha, **bn)


def _block_kw(kind: str, spec: ModelSpec) -> dict:
    kw = spec.block_kw()
    if kind == "co":
        kw["bn_before_act"] = spec.bn_before_act
    elif kind == "multires":
        kw["alpha"] = spec.alpha
    return kw


class Model:
    """Parameters and running statistics of one network instance."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        h, w = spec.input_size
        if h % spec.downsample or w % spec.downsample:
            raise ShapeError(f"input size {h}x{w} must be divisible by {spec.downsample}")
        self.spec = spec
        self.seed = seed
        self.epoch = 0
        rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])

        self.encoder = []
        enc_out = []
        cin = spec.in_channels
        for kind, f in zip(spec.encoder_kinds, spec.encoder_filters):
            blk = _make_block(kind, cin, f, spec, rng)
            self.encoder.append(blk)
            cin = blk.out_channels
            enc_out.append(cin)
        bf = spec.bottleneck_filters
        self.bottleneck = [Conv.init(cin, bf, 3, rng), Conv.init(bf, bf, 3, rng)]

        decoder = {}
        below = bf
        for i in range(spec.levels, 0, -1):
            use_e, use_me = spec.decoder_skips[i - 1]
            skip = (enc_out[i - 1] if use_e else 0) + (enc_out[i - 2] if use_me else 0)
            kind = spec.decoder_kinds[i - 1]
            d = DecoderBlockParams.init(below, skip, spec.decoder_filters[i - 1], kind, rng, **_block_kw(kind, spec))
            decoder[i] = d
            below = d.out_channels
        self.decoder = [decoder[i] for i in range(1, spec.levels + 1)]
        self.head = Conv.init(below, 1, 1, rng)

    # -- enumeration -------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.encoder, start=1):
            yield from blk.named_parameters(f"enc{i}")
        for j, conv in enumerate(self.bottleneck, start=1):
            yield from conv.named_parameters(f"bottleneck.conv{j}")
        for i, blk in enumerate(self.decoder, start=1):
            yield from blk.named_parameters(f"dec{i}")
        yield from self.head.named_parameters("head")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, BatchNormState, str]]:
        for i, blk in enumerate(self.encoder, start=1):
            yield from blk.named_buffers(f"enc{i}")
        for i, blk in enumerate(self.decoder, start=1):
            yield from blk.named_buffers(f"dec{i}")

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        """Every parameter and running statistic, in a stable order."""
        out = [(n, t.data) for n, t in self.named_parameters()]
        out += [(n, getattr(st, attr)) for n, st, attr in self.named_buffers()]
        return out

    def load_state(self, entries: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data = np.array(entries[name], dtype=t.data.dtype).reshape(t.shape)
        for name, st, attr in self.named_buffers():
            cur = getattr(st, attr)
            setattr(st, attr, np.array(entries[name], dtype=cur.dtype).reshape(cur.shape))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = np.zeros_like(t.data)

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        trace: dict[str, tuple[int, ...]] | None = None,
    ) -> Tensor:
        """Per-pixel lesion probabilities, same spatial size as ``x``.

        ``trace``, when given, receives the shape of every named feature map
        (O_E1.., O_ME1.., O_D6.., output).
        """
        spec = self.spec
        if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(f"model expects N x {spec.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % spec.downsample or w % spec.downsample:
            raise ShapeError(f"input {h}x{w} must be divisible by {spec.downsample}")
        rng = rng if rng is not None else self.dropout_rng
        rate = spec.dropout_rate
        record = trace if trace is not None else {}

        oe, ome = [], []
        cur = x
        for i, (kind, blk) in enumerate(zip(spec.encoder_kinds, self.encoder), start=1):
            out = blocks.inner_forward(kind, cur, blk, mode)
            if i == spec.levels:
                out = dropout(out, rate, mode, rng)
            oe.append(out)
            cur = maxpool2d(out)
            ome.append(cur)
            record[f"O_E{i}"] = out.shape
            record[f"O_ME{i}"] = cur.shape

        for conv in self.bottleneck:
            cur = dropout(relu(conv(cur)), rate, mode, rng)
        record[f"O_D{spec.levels + 1}"] = cur.shape

        for i in range(spec.levels, 0, -1):
            use_e, use_me = spec.decoder_skips[i - 1]
            cur = blocks.decoder_block_forward(
                cur,
                oe[i - 1] if use_e else None,
                ome[i - 2] if use_me else None,
                self.decoder[i - 1],
                mode,
            )
            record[f"O_D{i}"] = cur.shape

        out = sigmoid(self.head(cur))
        record["output"] = out.shape
        return out

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Eval-mode probabilities for an (N, C, H, W) array."""
        from .tensor_core import no_grad

        outs = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                outs.append(self.forward(Tensor(images[s : s + batch_size]), "eval").data)
        return np.concatenate(outs, axis=0)


def build(spec: ModelSpec | None = None, seed: int = 0) -> Model:
    return Model(spec or ModelSpec(), seed)


def param_count(m: Model) -> int:
    """Trainable parameters: conv weights/biases and BN gamma/beta."""
    return sum(t.size for _, t in m.named_parameters())


def closed_form_param_count(spec: ModelSpec) -> int:
    """Parameter total from per-block formulas, without building anything."""
    total = 0
    cin = spec.in_channels
    enc_out = []
    for kind, f in zip(spec.encoder_kinds, spec.encoder_filters):
        if kind == "co":
            total += CoBlockParams.count(cin, f)
            cin = 7 * f
        elif kind == "identity":
            total += IdentityBlockParams.count(cin, f)
            cin = f
        else:
            total += MultiResBlockParams.count(cin, f, spec.alpha)
            cin = sum(blocks.multires_widths(f, spec.alpha))
        enc_out.append(cin)
    bf = spec.bottleneck_filters
    total += cin * bf * 9 + bf + bf * bf * 9 + bf
    below = bf
    for i in range(spec.levels, 0, -1):
        use_e, use_me = spec.decoder_skips[i - 1]
        skip = (enc_out[i - 1] if use_e else 0) + (enc_out[i - 2] if use_me else 0)
        kind, f = spec.decoder_kinds[i - 1], spec.decoder_filters[i - 1]
        total += DecoderBlockParams.count(below, skip, f, kind, spec.alpha)
        below = {"co": 7 * f, "identity": f}.get(kind) or sum(blocks.multires_widths(f, spec.alpha))
    total += below + 1
    return total


@dataclass
class LayerRow:
    name: str
    kind: str
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    params: int


def layer_table(m: Model) -> list[LayerRow]:
    """Shape trace (C, H, W) of every stage, computed without running the network."""
    spec = m.spec
    h, w = spec.input_size
    rows = []

    def psum(obj, prefix) -> int:
        return sum(t.size for _, t in obj.named_parameters(prefix))

    c = spec.in_channels
    enc = []
    for i, (kind, blk) in enumerate(zip(spec.encoder_kinds, m.encoder), start=1):
        s = 2 ** (i - 1)
        rows.append(LayerRow(f"enc{i}", f"{kind}(F={spec.encoder_filters[i-1]})", (c, h // s, w // s), (blk.out_channels, h // s, w // s), psum(blk, "")))
        c = blk.out_channels
        enc.append(c)
        rows.append(LayerRow(f"pool{i}", "maxpool2d", (c, h // s, w // s), (c, h // (2 * s), w // (2 * s)), 0))
    s = spec.downsample
    for j, conv in enumerate(m.bottleneck, start=1):
        rows.append(LayerRow(f"bottleneck.conv{j}", "conv3x3+relu+dropout", (c, h // s, w // s), (conv.cout, h // s, w // s), psum(conv, "")))
        c = conv.cout
    for i in range(spec.levels, 0, -1):
        d = m.decoder[i - 1]
        s = 2 ** (i - 1)
        rows.append(LayerRow(f"dec{i}", f"decoder[{d.kind}](F={spec.decoder_filters[i-1]})", (c, h // (2 * s), w // (2 * s)), (d.out_channels, h // s, w // s), psum(d, "")))
        c = d.out_channels
    rows.append(LayerRow("head", "conv1x1+sigmoid", (c, h, w), (1, h, w), psum(m.head, "")))
    return rows


# ---------------------------------------------------------------------------
# checkpoint I/O
#
# "CRUN" | u32 version | entries...
# entry: u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload (little-endian)
# Metadata travels as entries named "__meta__:<json>" with an empty payload;
# an "__end__" entry terminates the stream so truncation is detectable.


def _write_entry(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save(m: Model, path: str | Path, extra: dict | None = None) -> None:
    meta = {"spec": m.spec.to_dict(), "seed": m.seed, "epoch": m.epoch}
    if extra:
        meta.update(extra)
    empty = np.zeros((0,), np.float32)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_entry(fh, _META_PREFIX + json.dumps(meta, sort_keys=True), empty)
        for name, arr in m.state_entries():
            _write_entry(fh, name, arr)
        _write_entry(fh, _END, empty)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return data


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (metadata, name -> array) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        meta: dict = {}
        entries: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if len(head) < 4:
                raise CheckpointTruncatedError(f"{path}: missing end marker")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen, "entry name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}"))
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(_read_exact(fh, 4 * count, f"payload of {name}"), dtype="<f4").reshape(dims)
            if name == _END:
                break
            if name.startswith(_META_PREFIX):
                meta.update(json.loads(name[len(_META_PREFIX):]))
            else:
                entries[name] = payload.astype(np.float32)
        return meta, entries


def load(path: str | Path, expected_spec: ModelSpec | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    With ``expected_spec`` the stored tensors must fit that architecture;
    the first parameter whose shape differs is named in the error.
    """
    meta, entries = read_checkpoint(path)
    if "spec" not in meta:
        raise CheckpointFormatError(f"{path}: no model spec in checkpoint metadata")
    spec = expected_spec or ModelSpec.from_dict(meta["spec"])
    m = Model(spec, seed=int(meta.get("seed", 0)))
    m.epoch = int(meta.get("epoch", 0))
    for name, arr in m.state_entries():
        if name not in entries:
            raise SpecMismatchError(f"{path}: checkpoint has no entry for {name}")
        if tuple(entries[name].shape) != tuple(arr.shape):
            raise SpecMismatchError(f"{path}: {name} has shape {tuple(entries[name].shape)} in checkpoint, model expects {tuple(arr.shape)}")
    extra = set(entries) - {n for n, _ in m.state_entries()}
    if extra:
        raise SpecMismatchError(f"{path}: checkpoint has unexpected entries, first {sorted(extra)[0]}")
    m.load_state(entries)
    return m

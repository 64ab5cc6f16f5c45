"""Composite building blocks: Co-Block, identity block, MultiRes block, decoder block."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor_core import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    batchnorm,
    concat_channels,
    conv2d,
    default_dtype,
    relu,
    upsample2x,
)

MULTIRES_ALPHA = 1.67


# ---------------------------------------------------------------------------
# leaf layers


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor | None

    @classmethod
    def init(cls, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True) -> Conv:
        # He-uniform over fan-in
        limit = math.sqrt(6.0 / (cin * k * k))
        dt = default_dtype()
        w = Tensor(rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dt), requires_grad=True)
        b = Tensor(np.zeros(cout, dt), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding="same")

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState

    @classmethod
    def init(cls, channels: int, momentum: float = 0.99, eps: float = 1e-3) -> BatchNorm:
        dt = default_dtype()
        return cls(
            Tensor(np.ones(channels, dt), requires_grad=True),
            Tensor(np.zeros(channels, dt), requires_grad=True),
            BatchNormState.fresh(channels, momentum, eps),
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, mode)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, BatchNormState, str]]:
        yield f"{prefix}.running_mean", self.state, "mean"
        yield f"{prefix}.running_var", self.state, "var"


class _Params:
    """Mixin: walk dataclass fields to enumerate parameters and BN buffers."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name in self.__dataclass_fields__:  # type: ignore[attr-defined]
            yield name, getattr(self, name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, child in self._children():
            if hasattr(child, "named_parameters"):
                yield from child.named_parameters(f"{prefix}{name}" if not prefix else f"{prefix}.{name}")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState, str]]:
        for name, child in self._children():
            if hasattr(child, "named_buffers"):
                yield from child.named_buffers(f"{prefix}{name}" if not prefix else f"{prefix}.{name}")

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def _conv_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


# ---------------------------------------------------------------------------
# Co-Block


@dataclass
class CoBlockParams(_Params):
    conv1: Conv
    bn1: BatchNorm
    conv2: Conv
    bn2: BatchNorm
    conv3: Conv
    bn3: BatchNorm
    filters: int = field(default=16, metadata={"static": True})
    bn_before_act: bool = field(default=False, metadata={"static": True})

    @classmethod
    def init(cls, cin: int, filters: int, rng: np.random.Generator, bn_before_act: bool = False, **bn) -> CoBlockParams:
        f = filters
        return cls(
            Conv.init(cin, f, 3, rng),
            BatchNorm.init(f, **bn),
            Conv.init(f, 2 * f, 3, rng),
            BatchNorm.init(2 * f, **bn),
            Conv.init(3 * f, 4 * f, 3, rng),
            BatchNorm.init(4 * f, **bn),
            filters=f,
            bn_before_act=bn_before_act,
        )

    @property
    def out_channels(self) -> int:
        return 7 * self.filters

    @staticmethod
    def count(cin: int, filters: int) -> int:
        f = filters
        return (
            _conv_count(cin, f, 3) + 2 * f
            + _conv_count(f, 2 * f, 3) + 4 * f
            + _conv_count(3 * f, 4 * f, 3) + 8 * f
        )


def _conv_act_bn(x: Tensor, conv: Conv, bn: BatchNorm, mode: str, bn_first: bool) -> Tensor:
    if bn_first:
        return relu(bn(conv(x), mode))
    return bn(relu(conv(x)), mode)


def co_block_forward(x: Tensor, p: CoBlockParams, mode: str = "train") -> Tensor:
    """F -> 2F -> 4F convolutions with dense concatenation; 7F channels out."""
    x1 = _conv_act_bn(x, p.conv1, p.bn1, mode, p.bn_before_act)
    x2 = _conv_act_bn(x1, p.conv2, p.bn2, mode, p.bn_before_act)
    c1 = concat_channels([x1, x2])
    x3 = _conv_act_bn(c1, p.conv3, p.bn3, mode, p.bn_before_act)
    return concat_channels([c1, x3])


# ---------------------------------------------------------------------------
# identity (residual) block


@dataclass
class IdentityBlockParams(_Params):
    conv_a: Conv
    bn_a: BatchNorm
    conv_b: Conv
    bn_b: BatchNorm
    projection: Conv | None = None
    filters: int = field(default=16, metadata={"static": True})

    @classmethod
    def init(cls, cin: int, filters: int, rng: np.random.Generator, **bn) -> IdentityBlockParams:
        f = filters
        # convs feeding straight into BN carry no bias: BN's mean removal cancels it
        return cls(
            Conv.init(cin, f, 3, rng, bias=False),
            BatchNorm.init(f, **bn),
            Conv.init(f, f, 3, rng, bias=False),
            BatchNorm.init(f, **bn),
            Conv.init(cin, f, 1, rng) if cin != f else None,
            filters=f,
        )

    @property
    def out_channels(self) -> int:
        return self.filters

    @staticmethod
    def count(cin: int, filters: int) -> int:
        f = filters
        proj = _conv_count(cin, f, 1) if cin != f else 0
        return _conv_count(cin, f, 3, False) + 2 * f + _conv_count(f, f, 3, False) + 2 * f + proj


def identity_block_forward(x: Tensor, p: IdentityBlockParams, mode: str = "train") -> Tensor:
    y = relu(p.bn_a(p.conv_a(x), mode))
    y = p.bn_b(p.conv_b(y), mode)
    skip = p.projection(x) if p.projection is not None else x
    return relu(add(y, skip))


# ---------------------------------------------------------------------------
# MultiRes block


def multires_widths(filters: int, alpha: float = MULTIRES_ALPHA) -> tuple[int, int, int]:
    w = alpha * filters
    return int(w // 6), int(w // 3), int(w // 2)


@dataclass
class MultiResBlockParams(_Params):
    conv1: Conv
    bn1: BatchNorm
    conv2: Conv
    bn2: BatchNorm
    conv3: Conv
    bn3: BatchNorm
    residual: Conv
    bn_out: BatchNorm
    filters: int = field(default=16, metadata={"static": True})
    alpha: float = field(default=MULTIRES_ALPHA, metadata={"static": True})

    @classmethod
    def init(cls, cin: int, filters: int, rng: np.random.Generator, alpha: float = MULTIRES_ALPHA, **bn) -> MultiResBlockParams:
        w1, w2, w3 = multires_widths(filters, alpha)
        if min(w1, w2, w3) < 1:
            raise ShapeError(f"MultiRes block with F={filters}, alpha={alpha} has an empty stage {(w1, w2, w3)}")
        total = w1 + w2 + w3
        return cls(
            Conv.init(cin, w1, 3, rng, bias=False),
            BatchNorm.init(w1, **bn),
            Conv.init(w1, w2, 3, rng, bias=False),
            BatchNorm.init(w2, **bn),
            Conv.init(w2, w3, 3, rng, bias=False),
            BatchNorm.init(w3, **bn),
            Conv.init(cin, total, 1, rng),
            BatchNorm.init(total, **bn),
            filters=filters,
            alpha=alpha,
        )

    @property
    def widths(self) -> tuple[int, int, int]:
        return self.conv1.cout, self.conv2.cout, self.conv3.cout

    @property
    def out_channels(self) -> int:
        return sum(self.widths)

    @staticmethod
    def count(cin: int, filters: int, alpha: float = MULTIRES_ALPHA) -> int:
        w1, w2, w3 = multires_widths(filters, alpha)
        total = w1 + w2 + w3
        return (
            _conv_count(cin, w1, 3, False) + 2 * w1
            + _conv_count(w1, w2, 3, False) + 2 * w2
            + _conv_count(w2, w3, 3, False) + 2 * w3
            + _conv_count(cin, total, 1) + 2 * total
        )


def multires_block_forward(x: Tensor, p: MultiResBlockParams, mode: str = "train") -> Tensor:
    s1 = relu(p.bn1(p.conv1(x), mode))
    s2 = relu(p.bn2(p.conv2(s1), mode))
    s3 = relu(p.bn3(p.conv3(s2), mode))
    main = concat_channels([s1, s2, s3])
    return p.bn_out(relu(add(main, p.residual(x))), mode)


# ---------------------------------------------------------------------------
# decoder block

INNER_FORWARD = {
    "co": co_block_forward,
    "identity": identity_block_forward,
    "multires": multires_block_forward,
}
INNER_PARAMS = {
    "co": CoBlockParams,
    "identity": IdentityBlockParams,
    "multires": MultiResBlockParams,
}


def inner_forward(kind: str, x: Tensor, p, mode: str) -> Tensor:
    return INNER_FORWARD[kind](x, p, mode)


@dataclass
class DecoderBlockParams(_Params):
    up_conv: Conv
    inner: CoBlockParams | IdentityBlockParams | MultiResBlockParams
    projection: Conv
    kind: str = field(default="co", metadata={"static": True})

    @classmethod
    def init(
        cls,
        below_channels: int,
        skip_channels: int,
        filters: int,
        kind: str,
        rng: np.random.Generator,
        **block_kw,
    ) -> DecoderBlockParams:
        """``below_channels``: channels of the coarser decoder output;
        ``skip_channels``: total channels of the encoder features fused in."""
        up = Conv.init(below_channels, filters, 3, rng)
        fused = skip_channels + filters
        inner = INNER_PARAMS[kind].init(fused, filters, rng, **block_kw)
        proj = Conv.init(fused, inner.out_channels, 1, rng)
        return cls(up, inner, proj, kind=kind)

    @property
    def out_channels(self) -> int:
        return self.inner.out_channels

    @staticmethod
    def count(below_channels: int, skip_channels: int, filters: int, kind: str, alpha: float = MULTIRES_ALPHA) -> int:
        fused = skip_channels + filters
        if kind == "co":
            inner, out = CoBlockParams.count(fused, filters), 7 * filters
        elif kind == "identity":
            inner, out = IdentityBlockParams.count(fused, filters), filters
        else:
            inner, out = MultiResBlockParams.count(fused, filters, alpha), sum(multires_widths(filters, alpha))
        return _conv_count(below_channels, filters, 3) + inner + _conv_count(fused, out, 1)


def decoder_block_forward(
    od_next: Tensor,
    oe_i: Tensor | None,
    ome_prev: Tensor | None,
    p: DecoderBlockParams,
    mode: str = "train",
) -> Tensor:
    """Upsample the coarser decoder output, fuse encoder features, refine.

    The fused map is (O_E^i, O_ME^{i-1}, up-conv output) in that order, with
    absent inputs skipped. The result is the inner block's output plus a 1x1
    projection of the fused map.
    """
    u = p.up_conv(upsample2x(od_next))
    target = u.shape[2:]
    parts = []
    for label, t in (("encoder", oe_i), ("pooled encoder", ome_prev)):
        if t is None:
            continue
        if t.shape[2:] != target:
            raise ShapeError(f"decoder: {label} features {t.shape} do not match upsampled resolution {target}")
        parts.append(t)
    fb = concat_channels(parts + [u]) if parts else u
    y = inner_forward(p.kind, fb, p.inner, mode)
    return add(p.projection(fb), y)

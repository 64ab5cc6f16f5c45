"""Dense NCHW tensors with reverse-mode automatic differentiation.

Only the primitives the segmentation network needs are provided: 2-D
convolution, 2x2 max pooling, nearest-neighbour upsampling, batch
normalization, ReLU/sigmoid, channel concatenation, addition, dropout and a
handful of reductions used by losses and tests.

Every op records its inputs and a backward closure on the output tensor.
``backward`` walks that graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "branch_trace",
    "same_branches",
    "Tensor",
    "ShapeError",
    "BatchNormState",
    "GradCheckReport",
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "batchnorm",
    "relu",
    "sigmoid",
    "activation",
    "concat_channels",
    "add",
    "mul",
    "sum_all",
    "dropout",
    "backward",
    "tape",
    "no_grad",
    "grad_enabled",
    "grad_check",
    "inject_fault",
    "default_dtype",
    "set_float64",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DTYPE = np.float64 if os.environ.get("CRESUNET_FLOAT64", "") not in ("", "0") else np.float32
_GRAD_ENABLED = True
# ops whose backward is deliberately corrupted (negative-control testing)
# while a list, piecewise-linear ops append their branch choices (see grad_check)
_KINKS: list[np.ndarray] | None = None
_FAULTS: set[str] = {s for s in os.environ.get("CRESUNET_BREAK_OP", "").split(",") if s}


def default_dtype() -> type:
    return _DTYPE


def set_float64(enabled: bool) -> None:
    """Switch the engine between 32-bit (default) and 64-bit buffers."""
    global _DTYPE
    _DTYPE = np.float64 if enabled else np.float32


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording the graph (inference, numeric differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def inject_fault(*ops: str) -> Iterator[None]:
    """Corrupt the backward rule of the named ops while the context is active."""
    added = set(ops) - _FAULTS
    _FAULTS.update(added)
    try:
        yield
    finally:
        _FAULTS.difference_update(added)


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def sum(self) -> Tensor:
        return sum_all(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, back) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        if op in _FAULTS:
            inner = back

            def back(g, _inner=inner):
                return [None if r is None else r * 1.5 + 0.1 for r in _inner(g)]

        out._backward = back
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _pad_amount(k: int, padding) -> int:
    if padding == "same":
        return k // 2
    if isinstance(padding, (int, np.integer)) and padding >= 0:
        return int(padding)
    raise ValueError(f"padding must be 'same' or a non-negative int, got {padding!r}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlation of an NCHW input with a (Cout, Cin, kH, kW) kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but weight {weight.shape} expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding == "same" and stride != 1:
        raise ValueError("'same' padding requires stride 1")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")

    parents = [x, weight] + ([bias] if bias is not None else [])
    if kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0:
        out, back = _conv1x1(x, weight)
    elif stride == 1:
        out, back = _conv_shifted(x, weight, ph, pw)
    else:
        out, back = _conv_im2col(x, weight, stride, ph, pw, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

        def back(g, _inner=back):
            return list(_inner(g)) + [g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype)]

    return _result(out, parents, "conv2d", back)


def _conv1x1(x: Tensor, weight: Tensor):
    n, cin, h, w = x.shape
    cout = weight.shape[0]
    w2 = weight.data.reshape(cout, cin)
    xf = x.data.reshape(n, cin, h * w)
    out = np.matmul(w2, xf).reshape(n, cout, h, w)

    def back(g):
        g2 = g.reshape(n, cout, h * w)
        gw = np.zeros((cout, cin), dtype=weight.data.dtype)
        for k in range(n):
            gw += g2[k] @ xf[k].T
        gx = np.matmul(w2.T, g2).reshape(x.shape) if x.requires_grad else None
        return [gx, gw.reshape(weight.shape)]

    return out, back


def _conv_shifted(x: Tensor, weight: Tensor, ph: int, pw: int):
    """Stride-1 convolution on a flattened, channel-major padded input.

    With the padded input flattened to (Cin, N*Hp*Wp), kernel tap (i, j) reads
    the column range shifted by i*Wp + j. Outputs that land in padding
    positions are computed and dropped. The taps are stacked on whichever side
    has fewer channels so each pass is a single GEMM.
    """
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    dt = x.data.dtype
    hp, wp = h + 2 * ph, w + 2 * pw
    oh, ow = hp - kh + 1, wp - kw + 1
    kk = kh * kw
    xp = np.zeros((cin, n, hp, wp), dtype=dt)
    xp[:, :, ph : ph + h, pw : pw + w] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(cin, -1)
    total = xf.shape[1]
    span = total - ((kh - 1) * wp + (kw - 1))
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    stack_input = cin < cout

    if stack_input:
        # (Cout, kk*Cin) @ (kk*Cin, span), tap-major rows
        wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, kk * cin)
        cols = np.empty((kk * cin, span), dtype=dt)
        for t, off in enumerate(offsets):
            cols[t * cin : (t + 1) * cin] = xf[:, off : off + span]
        acc = np.zeros((cout, total), dtype=dt)
        np.matmul(wmat, cols, out=acc[:, :span])
    else:
        # (kk*Cout, Cin) @ (Cin, total), then shift-add each tap's slab
        wmat = weight.data.transpose(2, 3, 0, 1).reshape(kk * cout, cin)
        z = wmat @ xf
        acc = np.zeros((cout, total), dtype=dt)
        for t, off in enumerate(offsets):
            acc[:, :span] += z[t * cout : (t + 1) * cout, off : off + span]
        del z
    out = acc.reshape(cout, n, hp, wp)[:, :, :oh, :ow].transpose(1, 0, 2, 3).copy()

    def back(g):
        gfull = np.zeros((cout, n, hp, wp), dtype=dt)
        gfull[:, :, :oh, :ow] = g.transpose(1, 0, 2, 3)
        gf = gfull.reshape(cout, -1)
        gx = None
        if stack_input:
            gspan = gf[:, :span]
            gw = (gspan @ cols.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            if x.requires_grad:
                gcols = wmat.T @ gspan
                gxf = np.zeros((cin, total), dtype=dt)
                for t, off in enumerate(offsets):
                    gxf[:, off : off + span] += gcols[t * cin : (t + 1) * cin]
        else:
            shifted = np.zeros((kk * cout, total), dtype=dt)
            for t, off in enumerate(offsets):
                shifted[t * cout : (t + 1) * cout, off : off + span] = gf[:, :span]
            gw = (shifted @ xf.T).reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
            if x.requires_grad:
                gxf = wmat.T @ shifted
        if x.requires_grad:
            gx = gxf.reshape(cin, n, hp, wp)[:, :, ph : ph + h, pw : pw + w].transpose(1, 0, 2, 3).copy()
        return [gx, np.ascontiguousarray(gw, dtype=weight.data.dtype)]

    return out, back


def _conv_im2col(x: Tensor, weight: Tensor, stride: int, ph: int, pw: int, oh: int, ow: int):
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(n, cout, oh, ow)

    def back(g):
        g2 = g.reshape(n, cout, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape).astype(weight.data.dtype)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, oh, ow)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return [gx, gw]

    return out, back


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    if window != 2:
        raise ValueError("only a 2x2 window is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    if _KINKS is not None:
        _KINKS.append(idx.astype(np.uint8))
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return [gx]

    return _result(out, [x], "maxpool2d", back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling: each pixel becomes a 2x2 block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return [g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))]

    return _result(out, [x], "upsample2x", back)


# ---------------------------------------------------------------------------
# normalization


@dataclass
class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.99, eps: float = 1e-3) -> BatchNormState:
        dt = default_dtype()
        return cls(np.zeros(channels, dt), np.ones(channels, dt), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In ``train`` mode the batch statistics normalize the input and the running
    statistics are updated in place; ``eval`` uses the running statistics.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta {gamma.shape}/{beta.shape} do not match {c} channels")
    eps = state.eps
    dt = x.data.dtype
    g = gamma.data[None, :, None, None]
    b = beta.data[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batchnorm train mode needs at least 2 values per channel, got {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        # normalize in 64-bit and round once, so the output carries a single
        # 32-bit rounding per element
        centered = x.data - mean[None, :, None, None]
        var = np.mean(np.square(centered), axis=(0, 2, 3))
        inv64 = 1.0 / np.sqrt(var + eps)
        inv_std = inv64.astype(dt)
        xhat64 = centered * inv64[None, :, None, None]
        del centered
        out = xhat64 * gamma.data.astype(np.float64)[None, :, None, None] + beta.data.astype(np.float64)[None, :, None, None]
        xhat = xhat64.astype(dt)
        del xhat64
        mom = state.momentum
        state.mean = (mom * state.mean + (1 - mom) * mean).astype(state.mean.dtype)
        state.var = (mom * state.var + (1 - mom) * var).astype(state.var.dtype)

        def back(gy):
            dxhat = gy * g
            s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)[None, :, None, None]
            gx = inv_std[None, :, None, None] * (dxhat - s1 / m - xhat * (s2 / m))
            ggamma = (gy * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
            gbeta = gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
            return [gx, ggamma, gbeta]

    elif mode == "eval":
        inv64 = 1.0 / np.sqrt(state.var.astype(np.float64) + eps)
        inv_std = inv64.astype(dt)
        centered = x.data - state.mean.astype(dt)[None, :, None, None]
        scale = (gamma.data.astype(np.float64) * inv64).astype(dt)[None, :, None, None]
        out = centered * scale + b
        xhat = centered * inv_std[None, :, None, None]

        def back(gy):
            gx = gy * scale
            ggamma = (gy * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
            gbeta = gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dt)
            return [gx, ggamma, gbeta]

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return _result(out.astype(dt, copy=False), [x, gamma, beta], "batchnorm", back)


# ---------------------------------------------------------------------------
# element-wise ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(np.packbits(mask))
    # np.maximum keeps NaN visible so a diverged run is caught downstream
    out = np.maximum(x.data, 0).astype(x.data.dtype, copy=False)
    return _result(out, [x], "relu", lambda g: [g * mask])


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.data.dtype)
    return _result(out, [x], "sigmoid", lambda g: [g * out * (1 - out)])


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in argument order."""
    if len(xs) < 2:
        raise ShapeError("concat_channels needs at least two inputs")
    ref = xs[0].shape
    for i, t in enumerate(xs[1:], start=1):
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: input {i} has shape {t.shape}, incompatible with input 0 shape {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def back(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return _result(out, list(xs), "concat", back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, [a, b], "add", lambda g: [g, g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, [a, b], "mul", lambda g: [g * b.data, g * a.data])


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, accumulated and returned in 64-bit."""
    out = np.asarray(x.data.sum(dtype=np.float64)).reshape(1, 1, 1, 1)
    return _result(out, [x], "sum", lambda g: [np.full(x.shape, g.reshape(-1)[0], dtype=x.data.dtype)])


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / np.asarray(1.0 - rate, dtype=x.data.dtype)
    return _result(x.data * keep, [x], "dropout", lambda g: [g * keep])


# ---------------------------------------------------------------------------
# reverse pass


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``params`` that are not on any path from the loss get a
    zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Relative error per checked input.

    With ``pooled`` set, pass/fail is judged on one norm-wise error over the
    concatenation of all checked entries instead of the worst single input.
    """

    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-3
    checked: dict[str, int] = field(default_factory=dict)
    pooled: bool = False
    skipped: dict[str, int] = field(default_factory=dict)
    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def pooled_error(self) -> float:
        if not self.pairs:
            return 0.0
        a = np.concatenate([p[0] for p in self.pairs.values()])
        n = np.concatenate([p[1] for p in self.pairs.values()])
        return relative_error(a, n)

    @property
    def max_error(self) -> float:
        if self.pooled:
            return self.pooled_error
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        e = self.max_error
        return bool(np.isfinite(e) and e <= self.tol) and all(np.isfinite(v) for v in self.errors.values())

    def summary(self) -> str:
        parts = [f"{k}={v:.2e}" for k, v in self.errors.items()]
        status = "PASS" if self.passed else "FAIL"
        label = "pooled_rel_err" if self.pooled else "max_rel_err"
        return f"{status} {label}={self.max_error:.2e} (tol {self.tol:.0e}) " + " ".join(parts)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, np.float64).ravel()
    n = np.asarray(numeric, np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def branch_trace(f, inputs) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f(*inputs)`` and the relu/maxpool branch choices it made."""
    global _KINKS
    _KINKS = []
    try:
        value = f(*inputs).data.astype(np.float64).sum()
        return value, _KINKS
    finally:
        _KINKS = None


def same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    h: float | None = None,
    names: Sequence[str] | None = None,
    exclude: Callable[[int, np.ndarray], np.ndarray] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    pooled: bool = False,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare backward() against central differences for each input.

    ``f`` maps the inputs to a scalar tensor. ``exclude(i, data)`` may return a
    boolean mask of entries of input ``i`` to skip (non-differentiable points).
    ``max_entries`` samples that many entries per input instead of all.
    With ``skip_kinks``, an entry whose +h or -h perturbation flips any relu
    sign or maxpool winner anywhere inside ``f`` is skipped, since the central
    difference then straddles a kink; skipped counts land in ``report.skipped``.
    """
    if h is None:
        h = 1e-6 if default_dtype() == np.float64 else 1e-3
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    rng = rng or np.random.default_rng(0)

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss, params=list(inputs))
    analytic = [t.grad.copy() for t in inputs]
    for t, flag in zip(inputs, saved):
        t.requires_grad = flag

    report = GradCheckReport(tol=tol, pooled=pooled)
    base: list[np.ndarray] = []
    if skip_kinks:
        with no_grad():
            _, base = branch_trace(f, inputs)
    for i, (t, name) in enumerate(zip(inputs, names)):
        flat = t.data.reshape(-1)
        candidates = np.arange(flat.size)
        if exclude is not None:
            skip = np.asarray(exclude(i, t.data)).reshape(-1)
            candidates = candidates[~skip]
        limit = candidates.size if max_entries is None else min(max_entries, candidates.size)
        if limit < candidates.size or skip_kinks:
            candidates = rng.permutation(candidates)
        used, numeric, skipped = [], [], 0
        with no_grad():
            for idx in candidates:
                if len(used) == limit:
                    break
                orig = flat[idx]
                flat[idx] = orig + h
                fp, kp = branch_trace(f, inputs) if skip_kinks else (f(*inputs).data.astype(np.float64).sum(), base)
                flat[idx] = orig - h
                fm, km = branch_trace(f, inputs) if skip_kinks else (f(*inputs).data.astype(np.float64).sum(), base)
                flat[idx] = orig
                if skip_kinks and not (same_branches(kp, base) and same_branches(km, base)):
                    skipped += 1
                    continue
                used.append(idx)
                numeric.append((fp - fm) / (2 * h))
        order = np.argsort(used)
        used_arr = np.asarray(used, dtype=np.intp)[order]
        num_arr = np.asarray(numeric, dtype=np.float64)[order]
        picked = analytic[i].reshape(-1)[used_arr].astype(np.float64)
        report.pairs[name] = (picked, num_arr)
        report.errors[name] = relative_error(picked, num_arr)
        report.checked[name] = int(used_arr.size)
        report.skipped[name] = skipped
    return report

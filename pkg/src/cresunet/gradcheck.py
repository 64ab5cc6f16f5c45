"""Finite-difference gradient checks for every primitive, block and the network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import blocks
from .metrics import dice_loss
from .model import ModelSpec, build
from .tensor_core import (
    BatchNormState,
    GradCheckReport,
    Tensor,
    add,
    backward,
    batchnorm,
    branch_trace,
    concat_channels,
    conv2d,
    default_dtype,
    dropout,
    grad_check,
    maxpool2d,
    mul,
    no_grad,
    relative_error,
    relu,
    same_branches,
    sigmoid,
    sum_all,
    upsample2x,
)

OP_TOL = 1e-3
NETWORK_TOL = 5e-2


def _rand(rng: np.random.Generator, shape, scale: float = 1.0) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(default_dtype()))


def _projected(fn: Callable[..., Tensor], out_shape, rng: np.random.Generator) -> Callable[..., Tensor]:
    """Reduce an op's output to a scalar with a fixed random weighting.

    The weights are 64-bit so the projection itself adds no 32-bit rounding
    to the finite differences.
    """
    weights = Tensor(rng.standard_normal(out_shape), dtype=np.float64)
    return lambda *xs: sum_all(mul(fn(*xs), weights))


def _shape(rng, lo=1, hi=3, spatial=(2, 5)) -> tuple[int, int, int, int]:
    n = int(rng.integers(lo, hi + 1))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(*spatial))
    w = 2 * int(rng.integers(*spatial))
    return n, c, h, w


def near_relu_kink(h: float) -> Callable[[int, np.ndarray], np.ndarray]:
    return lambda i, d: np.abs(d) < 2 * h


def near_pool_tie(h: float) -> Callable[[int, np.ndarray], np.ndarray]:
    """Mask whole 2x2 windows whose two largest entries are within 2h."""

    def mask(i, d):
        n, c, hh, ww = d.shape
        win = d.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // 2, ww // 2, 4)
        top = np.sort(win, axis=-1)
        close = (top[..., 3] - top[..., 2]) < 2 * h
        return np.repeat(np.repeat(close, 2, axis=2), 2, axis=3)

    return mask


def _h() -> float:
    return 1e-6 if default_dtype() == np.float64 else 1e-3


# -- primitives --------------------------------------------------------------


def check_conv2d(rng: np.random.Generator) -> GradCheckReport:
    n, cin, h, w = _shape(rng)
    cout = int(rng.integers(1, 5))
    k = int(rng.choice([1, 3, 5]))
    x, wt, b = _rand(rng, (n, cin, h, w)), _rand(rng, (cout, cin, k, k), 0.5), _rand(rng, (cout,))
    f = _projected(lambda x, wt, b: conv2d(x, wt, b), (n, cout, h, w), rng)
    return grad_check(f, [x, wt, b], OP_TOL, names=["x", "weight", "bias"], pooled=True)


def check_maxpool2d(rng: np.random.Generator) -> GradCheckReport:
    n, c, h, w = _shape(rng)
    x = _rand(rng, (n, c, h, w))
    f = _projected(maxpool2d, (n, c, h // 2, w // 2), rng)
    return grad_check(f, [x], OP_TOL, names=["x"], exclude=near_pool_tie(_h()))


def check_upsample2x(rng: np.random.Generator) -> GradCheckReport:
    n, c, h, w = _shape(rng)
    x = _rand(rng, (n, c, h, w))
    f = _projected(upsample2x, (n, c, 2 * h, 2 * w), rng)
    return grad_check(f, [x], OP_TOL, names=["x"])


def check_batchnorm(rng: np.random.Generator, mode: str = "train") -> GradCheckReport:
    n, c, h, w = _shape(rng, lo=2)
    x = _rand(rng, (n, c, h, w))
    # |gamma| bounded away from 0: a vanishing scale leaves the x-gradient
    # below the 32-bit rounding floor of the outputs
    gamma = Tensor((rng.uniform(0.5, 2.0, c) * rng.choice([-1.0, 1.0], c)).astype(default_dtype()))
    beta = _rand(rng, (c,))
    state = BatchNormState.fresh(c)
    if mode == "eval":
        state.mean = rng.standard_normal(c).astype(default_dtype())
        state.var = rng.uniform(0.5, 2.0, c).astype(default_dtype())
    f = _projected(lambda x, g, b: batchnorm(x, g, b, state, mode), (n, c, h, w), rng)
    return grad_check(f, [x, gamma, beta], OP_TOL, names=["x", "gamma", "beta"], pooled=True)


def check_relu(rng: np.random.Generator) -> GradCheckReport:
    shape = _shape(rng)
    x = _rand(rng, shape)
    return grad_check(_projected(relu, shape, rng), [x], OP_TOL, names=["x"], exclude=near_relu_kink(_h()))


def check_sigmoid(rng: np.random.Generator) -> GradCheckReport:
    shape = _shape(rng)
    x = _rand(rng, shape, 2.0)
    return grad_check(_projected(sigmoid, shape, rng), [x], OP_TOL, names=["x"])


def check_concat(rng: np.random.Generator) -> GradCheckReport:
    n, _, h, w = _shape(rng)
    chans = [int(c) for c in rng.integers(1, 4, size=int(rng.integers(2, 4)))]
    xs = [_rand(rng, (n, c, h, w)) for c in chans]
    f = _projected(lambda *xs: concat_channels(xs), (n, sum(chans), h, w), rng)
    return grad_check(f, xs, OP_TOL, names=[f"x{i}" for i in range(len(xs))], pooled=True)


def check_add(rng: np.random.Generator) -> GradCheckReport:
    shape = _shape(rng)
    a, b = _rand(rng, shape), _rand(rng, shape)
    return grad_check(_projected(add, shape, rng), [a, b], OP_TOL, names=["a", "b"], pooled=True)


def check_dropout(rng: np.random.Generator) -> GradCheckReport:
    shape = _shape(rng)
    x = _rand(rng, shape)
    rate = float(rng.uniform(0.1, 0.7))
    seed = int(rng.integers(2**31))
    f = _projected(lambda x: dropout(x, rate, "train", np.random.default_rng(seed)), shape, rng)
    return grad_check(f, [x], OP_TOL, names=["x"])


def check_dice_loss(rng: np.random.Generator) -> GradCheckReport:
    shape = (int(rng.integers(1, 3)), 1, 8, 8)
    p = Tensor(rng.uniform(0.05, 0.95, size=shape).astype(default_dtype()))
    t = (rng.random(shape) > 0.5).astype(default_dtype())
    return grad_check(lambda p: dice_loss(p, t), [p], OP_TOL, names=["pred"])


# -- blocks ------------------------------------------------------------------


def _block_check(make, forward, cin: int, rng: np.random.Generator, tol: float) -> GradCheckReport:
    p = make(cin, rng)
    x = _rand(rng, (1, cin, 8, 8))
    named = list(p.named_parameters())
    out_shape = forward(x, p, "train").shape
    weights = _rand(rng, out_shape)
    tensors = [x] + [t for _, t in named]

    def f(*ts):
        return sum_all(mul(forward(ts[0], p, "train"), weights))

    return grad_check(f, tensors, tol, names=["x"] + [n for n, _ in named], max_entries=24, rng=rng, pooled=True, skip_kinks=True)


def check_co_block(rng: np.random.Generator, tol: float = OP_TOL) -> GradCheckReport:
    return _block_check(lambda c, r: blocks.CoBlockParams.init(c, 3, r), blocks.co_block_forward, 2, rng, tol)


def check_identity_block(rng: np.random.Generator, tol: float = OP_TOL) -> GradCheckReport:
    cin = int(rng.choice([3, 5]))
    return _block_check(lambda c, r: blocks.IdentityBlockParams.init(c, 3, r), blocks.identity_block_forward, cin, rng, tol)


def check_multires_block(rng: np.random.Generator, tol: float = OP_TOL) -> GradCheckReport:
    return _block_check(lambda c, r: blocks.MultiResBlockParams.init(c, 8, r), blocks.multires_block_forward, 3, rng, tol)


def check_decoder_block(rng: np.random.Generator, tol: float = OP_TOL) -> GradCheckReport:
    kind = str(rng.choice(["co", "identity", "multires"]))
    filters = 8 if kind == "multires" else 3
    below, enc = 4, 2
    p = blocks.DecoderBlockParams.init(below, enc, filters, kind, rng)
    od = _rand(rng, (1, below, 4, 4))
    oe = _rand(rng, (1, enc, 8, 8))
    named = list(p.named_parameters())
    out_shape = blocks.decoder_block_forward(od, oe, None, p, "train").shape
    weights = _rand(rng, out_shape)

    def f(od, oe, *params):
        return sum_all(mul(blocks.decoder_block_forward(od, oe, None, p, "train"), weights))

    return grad_check(f, [od, oe] + [t for _, t in named], tol, names=["od_next", "oe"] + [n for n, _ in named], max_entries=24, rng=rng, pooled=True, skip_kinks=True)


# -- whole network -----------------------------------------------------------


def check_network(rng: np.random.Generator, size: int = 32, n_params: int = 20, spec: ModelSpec | None = None) -> GradCheckReport:
    """Dice-loss gradient of the full network at ``n_params`` random scalar parameters.

    Training mode with a fixed dropout mask. Parameters whose perturbation
    flips a relu or maxpool branch anywhere in the network are skipped and
    replaced by the next random draw.
    """
    spec = (spec or ModelSpec()).with_input(size)
    model = build(spec, seed=int(rng.integers(2**31)))
    x = Tensor(rng.random((1, 1, size, size)).astype(default_dtype()))
    target = (rng.random((1, 1, size, size)) > 0.6).astype(default_dtype())
    drop_seed = int(rng.integers(2**31))
    named = list(model.named_parameters())
    params = [t for _, t in named]
    offsets = np.concatenate([[0], np.cumsum([p.size for p in params])])
    order = rng.permutation(int(offsets[-1]))

    def loss():
        return dice_loss(model.forward(x, "train", rng=np.random.default_rng(drop_seed)), target)

    model.zero_grad()
    backward(loss(), params)
    h = _h()
    report = GradCheckReport(tol=NETWORK_TOL, pooled=True)
    with no_grad():
        _, base = branch_trace(loss, [])
        for fi in order:
            if len(report.pairs) == n_params:
                break
            k = int(np.searchsorted(offsets, fi, side="right") - 1)
            j = int(fi - offsets[k])
            flat = params[k].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp, kp = branch_trace(loss, [])
            flat[j] = orig - h
            fm, km = branch_trace(loss, [])
            flat[j] = orig
            key = f"{named[k][0]}[{j}]"
            if not (same_branches(kp, base) and same_branches(km, base)):
                report.skipped[key] = 1
                continue
            a = np.array([params[k].grad.reshape(-1)[j]], dtype=np.float64)
            n = np.array([(fp - fm) / (2 * h)])
            report.pairs[key] = (a, n)
            report.errors[key] = relative_error(a, n)
            report.checked[key] = 1
    return report


PRIMITIVES: dict[str, Callable[[np.random.Generator], GradCheckReport]] = {
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool2d,
    "upsample2x": check_upsample2x,
    "batchnorm": check_batchnorm,
    "batchnorm_eval": lambda r: check_batchnorm(r, "eval"),
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "concat": check_concat,
    "add": check_add,
    "dropout": check_dropout,
    "dice_loss": check_dice_loss,
}
BLOCKS: dict[str, Callable[[np.random.Generator], GradCheckReport]] = {
    "co_block": check_co_block,
    "identity_block": check_identity_block,
    "multires_block": check_multires_block,
    "decoder_block": check_decoder_block,
}
ALL_CHECKS = {**PRIMITIVES, **BLOCKS, "network": check_network}


@dataclass
class SuiteResult:
    name: str
    worst: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return np.isfinite(self.worst) and self.worst <= self.tol


def run_suite(names=None, cases: int = 5, seed: int = 0) -> list[SuiteResult]:
    """Run each named check ``cases`` times on fresh random shapes."""
    out = []
    for name in names or list(ALL_CHECKS):
        if name not in ALL_CHECKS:
            raise KeyError(f"unknown gradient check {name!r}; choose from {', '.join(ALL_CHECKS)}")
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        n = 1 if name == "network" else cases
        reports = [ALL_CHECKS[name](rng) for _ in range(n)]
        out.append(SuiteResult(name, max(r.max_error for r in reports), reports[0].tol, n))
    return out

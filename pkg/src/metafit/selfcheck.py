"""Finite-difference verification of every primitive and of the composed losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .metaloss import cross_entropy, da_task_loss, inner_adapt, task_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    trials: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max rel err {self.max_error:.3e}  ({self.trials} trials)"


def _away_from(rng, shape, kink: float, margin: float = 1e-3) -> np.ndarray:
    x = rng.standard_normal(shape)
    close = np.abs(x - kink) < margin
    x[close] += np.sign(x[close] - kink + 1e-12) * 2 * margin
    return x


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _dims(rng, lo=1, hi=4, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


# each case builder draws one random instance: (point, fn)
def _binary(op):
    def build(rng):
        shape = _dims(rng)
        bshape = shape if rng.random() < 0.7 else shape[1:]
        a = rng.standard_normal(shape)
        b = rng.standard_normal(bshape)
        if op is ad.div:
            b = np.sign(b + 1e-12) * rng.uniform(0.5, 2.0, bshape)
        w = rng.standard_normal(shape)
        return {"a": a, "b": b}, lambda p: _weighted(op(p["a"], p["b"]), w)

    return build


def _unary(op, sampler):
    def build(rng):
        shape = _dims(rng)
        x = sampler(rng, shape)
        w = rng.standard_normal(shape)
        return {"x": x}, lambda p: _weighted(op(p["x"]), w)

    return build


def _matmul(rng):
    m, n, k = _dims(rng, n=3)
    a, b = rng.standard_normal((m, n)), rng.standard_normal((n, k))
    w = rng.standard_normal((m, k))
    return {"a": a, "b": b}, lambda p: _weighted(ad.matmul(p["a"], p["b"]), w)


def _conv(rng):
    n, c, f = _dims(rng, 1, 2, 3)
    h, wd = _dims(rng, 2, 4)
    pt = {
        "x": rng.standard_normal((n, c, h, wd)),
        "w": rng.standard_normal((f, c, 3, 3)),
        "b": rng.standard_normal(f),
    }
    wts = rng.standard_normal((n, f, h, wd))
    return pt, lambda p: _weighted(ad.conv2d(p["x"], p["w"], p["b"]), wts)


def _maxpool(rng):
    n, c = _dims(rng, 1, 2)
    h, w = _dims(rng, 2, 5)
    # distinct values spaced far beyond the FD step, so no argmax flips
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.01 + rng.uniform(-0.001, 0.001)
    wts = rng.standard_normal((n, c, h // 2, w // 2))
    return {"x": x}, lambda p: _weighted(ad.maxpool2d(p["x"]), wts)


def _softmax(rng):
    shape = _dims(rng)
    x, w = rng.standard_normal(shape), rng.standard_normal(shape)
    return {"x": x}, lambda p: _weighted(ad.softmax(p["x"]), w)


def _pow(rng):
    shape = _dims(rng)
    c = float(rng.choice([-1.5, 0.5, 2.0, 3.0, 2.7]))
    x = rng.uniform(0.5, 2.0, shape)
    w = rng.standard_normal(shape)
    return {"x": x}, lambda p: _weighted(ad.pow(p["x"], c), w)


def _reduce(op):
    def build(rng):
        shape = _dims(rng, n=3)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
        x = rng.standard_normal(shape)
        out_shape = np.sum(x, axis=axis).shape
        w = rng.standard_normal(out_shape)
        return {"x": x}, lambda p: _weighted(op(p["x"], axis=axis), w)

    return build


def _clamp(rng):
    shape = _dims(rng)
    x = _away_from(rng, shape, 0.3)
    w = rng.standard_normal(shape)
    return {"x": x}, lambda p: _weighted(ad.clamp_min(p["x"], 0.3), w)


def _batchnorm(rng):
    n, c = _dims(rng, 1, 3)
    h, w = _dims(rng, 2, 3)
    pt = {"x": rng.standard_normal((n, c, h, w)), "scale": rng.standard_normal(c), "shift": rng.standard_normal(c)}
    wts = rng.standard_normal((n, c, h, w))
    return pt, lambda p: _weighted(ad.batchnorm2d(p["x"], p["scale"], p["shift"]), wts)


PRIMITIVE_CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "matmul": _matmul,
    "conv2d": _conv,
    "maxpool2d": _maxpool,
    "relu": _unary(ad.relu, lambda rng, s: _away_from(rng, s, 0.0)),
    "sigmoid": _unary(ad.sigmoid, lambda rng, s: 2 * rng.standard_normal(s)),
    "softmax": _softmax,
    "log": _unary(ad.log, lambda rng, s: rng.uniform(0.5, 3.0, s)),
    "exp": _unary(ad.exp, lambda rng, s: rng.standard_normal(s)),
    "pow": _pow,
    "sum": _reduce(ad.tsum),
    "mean": _reduce(ad.mean),
    "clamp_min": _clamp,
    "batchnorm2d": _batchnorm,
}


def _mlp_ce(rng):
    spec = nn.ArchSpec.mlp(3, (5,))
    params = nn.init_params(spec, int(rng.integers(1 << 30)))
    x = rng.standard_normal((6, 3))
    y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
    return params.arrays(), lambda p: task_loss(spec, p, x, y)


def _sigmoid_mlp(rng):
    w1, w2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 1))
    x = rng.standard_normal((5, 3))
    return {"w1": w1, "w2": w2}, lambda p: ad.sigmoid((ad.sigmoid(Tensor(x) @ p["w1"])) @ p["w2"]).sum()


def _da_through_adaptation(rng):
    spec = nn.ArchSpec.mlp(2, (8,))
    params = nn.init_params(spec, int(rng.integers(1 << 30)))
    sx, qx = rng.standard_normal((4, 2)), rng.standard_normal((6, 2))
    sy = np.array([0, 0, 1, 1], dtype=float)
    qy = np.array([0, 0, 0, 1, 1, 1], dtype=float)

    def fn(p):
        adapted = inner_adapt(spec, nn.ParamSet(p.items()), sx, sy, 0.5, 1, second_order=True)
        return da_task_loss(task_loss(spec, adapted, qx, qy), 5.0, 1e-6)

    return params.arrays(), fn


def _ce_direct(rng):
    n = int(rng.integers(2, 8))
    logits = rng.standard_normal((n, 2))
    y = rng.integers(0, 2, n).astype(float)
    return {"z": logits}, lambda p: cross_entropy(ad.softmax(p["z"])[:, 1], y)


COMPOSITE_CASES: dict[str, Callable] = {
    "cross_entropy": _ce_direct,
    "cross_entropy(mlp)": _mlp_ce,
    "sigmoid_mlp": _sigmoid_mlp,
    "da_loss(inner_step,2nd)": _da_through_adaptation,
}


def run_case(name: str, builder: Callable, trials: int, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(trials):
        point, fn = builder(rng)
        worst = max(worst, ad.gradcheck(fn, point, STEP))
    return CheckResult(name, worst, trials)


def run_suite(trials: int = 100, composite_trials: int = 10, seed: int = 0, only=None) -> list[CheckResult]:
    """Check every primitive (``trials`` random instances each) and the composed losses."""
    results = []
    for name, builder in PRIMITIVE_CASES.items():
        if only is None or name in only:
            results.append(run_case(name, builder, trials, seed))
    for name, builder in COMPOSITE_CASES.items():
        if only is None or name in only:
            results.append(run_case(name, builder, composite_trials, seed))
    return results

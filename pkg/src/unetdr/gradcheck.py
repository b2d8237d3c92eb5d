"""Finite-difference gradient checks for every layer and both loss terms (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .layers import batchnorm3d, concat_channels, conv3d, maxpool3d, upsample_trilinear
from .losses import bce_loss, combined_loss, dice_loss
from .tensor import Tensor, finite_difference_gradient

TOLERANCE = 1e-5


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} max rel err {self.max_rel_err:.2e}"


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_gradients(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    tol: float = TOLERANCE,
    wrt: Sequence[int] | None = None,
) -> GradCheckResult:
    """Compare autodiff against central differences for each input in ``wrt``."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    fn(*tensors).backward()
    worst = 0.0
    for k in wrt:
        def f(t, k=k):
            args = [t if i == k else Tensor(inputs[i]) for i in range(len(inputs))]
            return fn(*args)

        fd = finite_difference_gradient(f, Tensor(inputs[k]), eps)
        auto = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(fd)
        worst = max(worst, float(relative_error(auto, fd).max()))
    return GradCheckResult(name, worst, worst < tol)


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return (out * r).sum()


def suite(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray], float, Sequence[int] | None]]:
    """The gradient-check problems: (name, function, inputs, eps, checked input indices)."""
    rng = np.random.default_rng(seed)
    cases = []

    for d in (1, 2, 3, 4):
        x = rng.standard_normal((1, 2, 4, 4, 4))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        r = rng.standard_normal((1, 3, 4, 4, 4))
        cases.append((f"conv3d d={d}", lambda x, w, b, d=d, r=r: _weighted(conv3d(x, w, b, padding=d, dilation=d), r),
                      [x, w, b], 1e-5, None))

    # distinct values spaced far beyond eps keep the argmax fixed under perturbation
    x = rng.permutation(64).reshape(1, 1, 4, 4, 4) * 0.1 + rng.uniform(0, 0.01, (1, 1, 4, 4, 4))
    r = rng.standard_normal((1, 1, 2, 2, 2))
    cases.append(("maxpool3d", lambda x, r=r: _weighted(maxpool3d(x), r), [x], 1e-5, None))

    x = rng.standard_normal((2, 2, 2, 2, 2)) * 2 + 1
    g = rng.uniform(0.5, 1.5, 2)
    bt = rng.standard_normal(2)
    r = rng.standard_normal((2, 2, 2, 2, 2))

    def bn(x, g, bt, r=r):
        return _weighted(batchnorm3d(x, g, bt, np.zeros(2), np.ones(2), training=True), r)

    cases.append(("batchnorm3d (train)", bn, [x, g, bt], 1e-6, None))

    def bn_inf(x, g, bt, r=r):
        return _weighted(batchnorm3d(x, g, bt, np.full(2, 0.3), np.full(2, 1.7), training=False), r)

    cases.append(("batchnorm3d (inference)", bn_inf, [x, g, bt], 1e-6, None))

    x = rng.standard_normal((1, 2, 2, 3, 2))
    r = rng.standard_normal((1, 2, 4, 6, 4))
    cases.append(("upsample_trilinear", lambda x, r=r: _weighted(upsample_trilinear(x), r), [x], 1e-5, None))

    a = rng.standard_normal((1, 2, 3, 3, 3))
    b = rng.standard_normal((1, 3, 3, 3, 3))
    r = rng.standard_normal((1, 5, 3, 3, 3))
    cases.append(("concat_channels", lambda a, b, r=r: _weighted(concat_channels(a, b), r), [a, b], 1e-5, None))

    # keep inputs away from the ReLU kink
    x = rng.uniform(0.2, 2.0, (1, 2, 3, 3, 3)) * rng.choice([-1.0, 1.0], (1, 2, 3, 3, 3))
    r = rng.standard_normal((1, 2, 3, 3, 3))
    cases.append(("sigmoid(relu(x)) * sigmoid(x)", lambda x, r=r: _weighted(x.relu().sigmoid() * x.sigmoid(), r),
                  [x], 1e-6, None))

    a = rng.uniform(0.5, 2.0, (2, 3, 2, 2, 2))
    vec = rng.uniform(0.5, 2.0, 3)
    r = rng.standard_normal((2, 3, 2, 2, 2))
    cases.append(("add/sub/mul/div/log/neg + channel broadcast",
                  lambda a, v, r=r: _weighted(-(((a * v) + a) / (a + v)).log() + a / v - (a - v) * 0.5, r),
                  [a, vec], 1e-6, None))

    y = (rng.random((4, 4, 4)) < 0.4).astype(float)
    p = rng.uniform(0.05, 0.95, (4, 4, 4))
    cases.append(("dice_loss", lambda p, y=y: dice_loss(y, p), [p], 1e-6, None))
    cases.append(("bce_loss", lambda p, y=y: bce_loss(y, p), [p], 1e-6, None))
    cases.append(("combined_loss", lambda p, y=y: combined_loss(y, p).total, [p], 1e-6, None))

    # loss through a dilated conv and a sigmoid head
    x = rng.standard_normal((1, 2, 4, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3, 3)) * 0.3
    b = rng.standard_normal(1) * 0.1
    y = (rng.random((1, 1, 4, 4, 4)) < 0.3).astype(float)

    def head(x, w, b, y=y):
        z = conv3d(x, w, b, padding=2, dilation=2)
        return combined_loss(y, z.sigmoid()).total

    cases.append(("dilated conv -> sigmoid -> combined loss", head, [x, w, b], 1e-6, None))
    return cases


def run_gradcheck(seed: int = 0, tol: float = TOLERANCE) -> list[GradCheckResult]:
    return [check_gradients(name, fn, inputs, eps, tol, wrt) for name, fn, inputs, eps, wrt in suite(seed)]

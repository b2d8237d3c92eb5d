"""Forward/backward kernels for the 3D layers and small parameter-holding modules.

All spatial tensors use the ``(N, C, D, H, W)`` layout.

The convolution lowers each dilated 3x3x3 window into a column matrix
(im2col) so that the forward pass is one batched matmul per call and the
backward pass is two matmuls plus a scatter-add back into the padded input.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, elementwise, make_result

__all__ = [
    "conv3d",
    "conv3d_output_shape",
    "maxpool3d",
    "batchnorm3d",
    "upsample_trilinear",
    "interpolation_matrix",
    "concat_channels",
    "add_tensors",
    "Module",
    "Conv3dSpec",
    "Conv3d",
    "BatchNorm3d",
    "ConvBNReLU",
]


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 per-axis values, got {v!r}")
    return t


def conv3d_output_shape(in_extents: Sequence[int], kernel=3, padding=0, dilation=1, stride=1) -> tuple[int, ...]:
    """Per-axis output extents of a (possibly dilated) convolution.

    ``kernel``, ``padding``, ``dilation`` and ``stride`` may be scalars or
    per-axis sequences matching ``in_extents``.
    """
    n = len(in_extents)

    def per_axis(v):
        return (int(v),) * n if isinstance(v, (int, np.integer)) else tuple(int(x) for x in v)

    ks, ps, ds, ss = per_axis(kernel), per_axis(padding), per_axis(dilation), per_axis(stride)
    out = []
    for axis, (e, k, p, d, s) in enumerate(zip(in_extents, ks, ps, ds, ss)):
        if d < 1 or s < 1 or k < 1 or p < 0:
            raise ValueError(f"axis {axis}: invalid kernel={k} padding={p} dilation={d} stride={s}")
        eff = k + (k - 1) * (d - 1)
        o = (e + 2 * p - eff) // s + 1
        if o < 1:
            raise ValueError(
                f"axis {axis}: non-positive output extent {o} "
                f"(input {e}, padding {p}, effective kernel extent {eff})"
            )
        out.append(o)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=0, dilation=1, stride=1) -> Tensor:
    """Zero-padded, dilated 3D cross-correlation.

    ``weight`` has shape ``(out_ch, in_ch, kd, kh, kw)``; ``bias`` ``(out_ch,)``.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d expects (N,C,D,H,W) input, got shape {x.shape}")
    n, c = x.shape[:2]
    o, ci = weight.shape[:2]
    if c != ci:
        raise ValueError(f"channel mismatch: input has {c} channels, weight expects {ci}")
    ks = weight.shape[2:]
    ps, ds, ss = _triple(padding), _triple(dilation), _triple(stride)
    out_sp = conv3d_output_shape(x.shape[2:], ks, ps, ds, ss)
    taps = list(itertools.product(*(range(k) for k in ks)))

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in ps)) if any(ps) else x.data

    def window(i: int, j: int, l: int) -> tuple[slice, ...]:
        starts = (i * ds[0], j * ds[1], l * ds[2])
        return tuple(slice(st, st + s * (e - 1) + 1, s) for st, s, e in zip(starts, ss, out_sp))

    windows = [window(*t) for t in taps]
    vol = int(np.prod(out_sp))
    cols = np.empty((n, c, len(taps)) + out_sp, dtype=x.dtype)
    for t, w in enumerate(windows):
        cols[:, :, t] = xp[(slice(None), slice(None)) + w]
    cols = cols.reshape(n, c * len(taps), vol)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)
    out = out.reshape((n, o) + out_sp)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(n, o, vol)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape((n, c, len(taps)) + out_sp)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, w in enumerate(windows):
                gxp[(slice(None), slice(None)) + w] += gcols[:, :, t]
            crop = tuple(slice(p, p + e) for p, e in zip(ps, x.shape[2:]))
            gx = gxp[(slice(None), slice(None)) + crop]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return make_result(out, "conv3d", inputs, vjp)


def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first voxel in scan order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    if x.ndim != 5:
        raise ValueError(f"maxpool3d expects (N,C,D,H,W) input, got shape {x.shape}")
    k = window
    n, c, d, h, w = x.shape
    for axis, e in zip("DHW", (d, h, w)):
        if e % k:
            raise ValueError(f"maxpool3d: extent {e} on axis {axis} is not divisible by {k}")
    od, oh, ow = d // k, h // k, w // k
    blocks = (
        x.data.reshape(n, c, od, k, oh, k, ow, k)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, od, oh, ow, k**3)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, od, oh, ow, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape)
        return (gx,)

    return make_result(out, "maxpool3d", (x,), vjp)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over ``(N, D, H, W)``.

    In training mode the running statistics are updated in place with the
    biased batch variance.
    """
    if x.ndim != 5:
        raise ValueError(f"batchnorm3d expects (N,C,D,H,W) input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"channel mismatch: input has {c} channels, parameters have {gamma.shape[0]}")
    axes = (0, 2, 3, 4)
    m = x.size // c
    if training:
        if m < 2:
            raise ValueError("batchnorm3d in training mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    view = (1, c, 1, 1, 1)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * invstd.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def vjp(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(view)
        if training:
            gx = (invstd.reshape(view) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(view)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(view)
            )
        else:
            gx = gxhat * invstd.reshape(view)
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), "batchnorm3d", (x, gamma, beta), vjp)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights, shape ``(n_out, n_in)``, half-pixel centers.

    Output sample ``i`` reads source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``. Every row sums to one.
    """
    mat = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def apply_separable(data: np.ndarray, mats: Sequence[np.ndarray], first_axis: int) -> np.ndarray:
    """Apply one matrix per axis starting at ``first_axis`` (``out = M @ x`` along each)."""
    out = data
    for k, mat in enumerate(mats):
        axis = first_axis + k
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [axis])), 0, axis)
    return out


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"upsample_trilinear expects (N,C,D,H,W) input, got shape {x.shape}")
    mats = [interpolation_matrix(e, e * factor, x.dtype) for e in x.shape[2:]]
    out = np.ascontiguousarray(apply_separable(x.data, mats, 2))

    def vjp(g):
        return (np.ascontiguousarray(apply_separable(g, [m.T for m in mats], 2)),)

    return make_result(out, "upsample_trilinear", (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ValueError(f"concat_channels: non-channel extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add_tensors(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = elementwise("add", out, t)
    return out


# parameter-holding modules


class Module:
    """Minimal container: children and parameters are kept in registration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()
        self.training = True

    def add_param(self, name: str, t: Tensor) -> Tensor:
        t.requires_grad = True
        self._params[name] = t
        return t

    def add_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        self._buffers[name] = arr
        return arr

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{k}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{k}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for k, child in self._children.items():
            yield from child.named_modules(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, v.data) for k, v in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)
        for k, b in buffers.items():
            b[...] = state[k]

    def __call__(self, *args) -> Tensor:
        return self.forward(*args)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


@dataclass
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    dilation: int = 1


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        dilation: int = 1,
        padding: int | None = None,
        stride: int = 1,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if padding is None:
            # shape-preserving for odd kernels
            padding = dilation * (kernel - 1) // 2
        self.spec = Conv3dSpec(in_channels, out_channels, kernel, stride, padding, dilation)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel**3
        w = rng.standard_normal((out_channels, in_channels, kernel, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.weight = self.add_param("weight", Tensor(w, dtype=dtype))
        self.bias = self.add_param("bias", Tensor(np.zeros(out_channels), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return conv3d(x, self.weight, self.bias, padding=s.padding, dilation=s.dilation, stride=s.stride)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = self.add_param("gamma", Tensor(np.ones(channels), dtype=dtype))
        self.beta = self.add_param("beta", Tensor(np.zeros(channels), dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm3d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class ConvBNReLU(Module):
    """conv(3x3x3, shape-preserving) -> batch norm -> ReLU."""

    def __init__(self, in_ch: int, out_ch: int, dilation: int = 1, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = self.add_child("conv", Conv3d(in_ch, out_ch, 3, dilation, rng=rng, dtype=dtype))
        self.bn = self.add_child("bn", BatchNorm3d(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).relu()

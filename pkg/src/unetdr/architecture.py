"""3D U-Net and 3D U-Net+DR assembly, parameter counting, receptive-field probes
and the binary checkpoint container.

Channel plan with ``F = base_channels``::

    encoder   F, 2F, 4F     (each block followed by 2x max pooling)
    bottleneck 8F            baseline: double conv
               8F / n_rates  unet_dr: one conv per dilation rate, summed
    decoder   4F, 2F, F     (trilinear x2 -> concat skip -> double conv)
    head      1x1x1 conv -> sigmoid

In the unet_dr encoder each block's input is concatenated with the output of
its second convolution, so a block mapping ``c_in -> c_out`` emits
``c_in + c_out`` channels. That concatenated tensor is also the skip
connection handed to the decoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .layers import (
    BatchNorm3d,
    Conv3d,
    ConvBNReLU,
    Module,
    add_tensors,
    concat_channels,
    maxpool3d,
    upsample_trilinear,
)
from .tensor import Tensor, no_grad

VARIANTS = ("baseline_unet", "unet_dr")
CHECKPOINT_MAGIC = b"VSDR1"
# initial foreground probability; a zero head bias lets narrow nets stall at DC 0
HEAD_PRIOR = 0.05


@dataclass
class NetworkConfig:
    base_channels: int = 24
    levels: int = 3
    dilation_rates: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    variant: str = "unet_dr"
    input_channels: int = 1
    output_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not self.dilation_rates or any(r < 1 for r in self.dilation_rates):
            raise ValueError(f"dilation_rates must be non-empty and >= 1, got {self.dilation_rates}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.levels

    @property
    def branch_channels(self) -> int:
        # the summed dilated branches split the bottleneck width between them
        return max(1, self.bottleneck_channels // len(self.dilation_rates))


class EncoderBlock(Module):
    """Two conv-BN-ReLU layers; the unet_dr variant appends its input to the output."""

    def __init__(self, in_ch: int, out_ch: int, variant: str, rng=None, dtype=np.float64):
        super().__init__()
        self.residual_concat = variant == "unet_dr"
        self.conv1 = self.add_child("conv1", ConvBNReLU(in_ch, out_ch, rng=rng, dtype=dtype))
        self.conv2 = self.add_child("conv2", ConvBNReLU(out_ch, out_ch, rng=rng, dtype=dtype))
        self.out_channels = in_ch + out_ch if self.residual_concat else out_ch

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        return concat_channels(x, y) if self.residual_concat else y


class DoubleConv(Module):
    def __init__(self, in_ch: int, out_ch: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv1 = self.add_child("conv1", ConvBNReLU(in_ch, out_ch, rng=rng, dtype=dtype))
        self.conv2 = self.add_child("conv2", ConvBNReLU(out_ch, out_ch, rng=rng, dtype=dtype))
        self.out_channels = out_ch

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class DilatedBottleneck(Module):
    """Parallel dilated conv-BN-ReLU branches over the same input, summed."""

    def __init__(self, in_ch: int, out_ch: int, rates: Sequence[int] = (1, 2, 3, 4), rng=None, dtype=np.float64):
        super().__init__()
        if not rates:
            raise ValueError("at least one dilation rate is required")
        self.rates = list(rates)
        self.branches = [
            self.add_child(f"branch{k}", ConvBNReLU(in_ch, out_ch, dilation=r, rng=rng, dtype=dtype))
            for k, r in enumerate(self.rates)
        ]
        self.out_channels = out_ch

    def forward(self, x: Tensor) -> Tensor:
        return add_tensors([b(x) for b in self.branches])


class DecoderStage(Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, rng=None, dtype=np.float64):
        super().__init__()
        self.block = self.add_child("block", DoubleConv(in_ch + skip_ch, out_ch, rng=rng, dtype=dtype))
        self.out_channels = out_ch

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.block(concat_channels(upsample_trilinear(x, 2), skip))


def build_encoder_block(in_ch: int, out_ch: int, variant: str, rng=None, dtype=np.float64) -> EncoderBlock:
    if in_ch < 1 or out_ch < 1:
        raise ValueError("channel counts must be >= 1")
    return EncoderBlock(in_ch, out_ch, variant, rng=rng, dtype=dtype)


def build_dilated_bottleneck(in_ch: int, out_ch: int, rates=(1, 2, 3, 4), rng=None, dtype=np.float64) -> DilatedBottleneck:
    return DilatedBottleneck(in_ch, out_ch, rates, rng=rng, dtype=dtype)


class Model(Module):
    def __init__(self, config: NetworkConfig, dtype=np.float64):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        f = config.base_channels
        ch = config.input_channels
        self.encoders: list[EncoderBlock] = []
        for level in range(config.levels):
            blk = self.add_child(f"enc{level + 1}", build_encoder_block(ch, f * 2**level, config.variant, rng, dtype))
            self.encoders.append(blk)
            ch = blk.out_channels
        if config.variant == "unet_dr":
            self.bottleneck = self.add_child(
                "bottleneck",
                build_dilated_bottleneck(ch, config.branch_channels, config.dilation_rates, rng, dtype),
            )
        else:
            self.bottleneck = self.add_child("bottleneck", DoubleConv(ch, config.bottleneck_channels, rng, dtype))
        ch = self.bottleneck.out_channels
        self.decoders: list[DecoderStage] = []
        for level in reversed(range(config.levels)):
            skip = self.encoders[level].out_channels
            stage = self.add_child(f"dec{level + 1}", DecoderStage(ch, skip, f * 2**level, rng, dtype))
            self.decoders.append(stage)
            ch = stage.out_channels
        self.head = self.add_child("head", Conv3d(ch, config.output_channels, kernel=1, rng=rng, dtype=dtype))
        self.head.bias.data[...] = np.log(HEAD_PRIOR / (1 - HEAD_PRIOR))

    def check_input(self, shape: Sequence[int]) -> None:
        if len(shape) != 5:
            raise ValueError(f"model input must be (N,C,D,H,W), got shape {tuple(shape)}")
        if shape[1] != self.config.input_channels:
            raise ValueError(f"model expects {self.config.input_channels} input channel(s), got {shape[1]}")
        step = 2**self.config.levels
        for axis, e in zip("DHW", shape[2:]):
            if e % step:
                raise ValueError(f"spatial extent {e} on axis {axis} is not divisible by {step}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = maxpool3d(x)
        x = self.bottleneck(x)
        for stage, skip in zip(self.decoders, reversed(skips)):
            x = stage(x, skip)
        return self.head(x).sigmoid()

    def predict(self, volume: np.ndarray) -> np.ndarray:
        """Probability map for one ``(D, H, W)`` volume, inference-mode batch norm."""
        was_training = self.training
        self.eval()
        try:
            dtype = self.head.weight.dtype
            x = Tensor(volume[None, None], dtype=dtype)
            with no_grad():
                return self.forward(x).data[0, 0]
        finally:
            self.train(was_training)


def build_model(config: NetworkConfig, input_extents: Sequence[int] | None = None, dtype=np.float64) -> Model:
    if input_extents is not None:
        step = 2**config.levels
        for axis, e in zip("DHW", input_extents):
            if e % step:
                raise ValueError(f"spatial extent {e} on axis {axis} is not divisible by {step}")
    return Model(config, dtype=dtype)


def count_parameters(model: Module) -> int:
    """Trainable scalars: conv weights and biases, batch-norm gamma and beta."""
    return int(sum(p.size for p in model.parameters()))


def parameter_table(model: Module) -> list[tuple[str, int]]:
    """Per-layer (module path, trainable scalar count) for every conv and batch norm."""
    rows = []
    for name, m in model.named_modules():
        if isinstance(m, (Conv3d, BatchNorm3d)):
            rows.append((name, int(sum(p.size for p in m._params.values()))))
    return rows


def receptive_field_probe(
    fragment: Callable[[Tensor], Tensor],
    input_extents: Sequence[int],
    in_channels: int = 1,
    dtype=np.float64,
) -> tuple[int, ...]:
    """Bounding-box extent of the output change caused by one centred input voxel.

    Both a positive and a negative unit impulse are applied against a zero
    input so a ReLU cannot hide a reachable voxel; the union of changed
    voxels (over every output channel) is measured.
    """
    extents = tuple(input_extents)
    base_in = np.zeros((1, in_channels) + extents, dtype=dtype)
    baseline = fragment(Tensor(base_in)).data
    center = tuple(e // 2 for e in extents)
    changed = np.zeros(baseline.shape[2:], dtype=bool)
    for sign in (1.0, -1.0):
        probe = base_in.copy()
        probe[(0, slice(None)) + center] = sign
        out = fragment(Tensor(probe)).data
        changed |= np.any(out[0] != baseline[0], axis=0)
    if not changed.any():
        raise ValueError("perturbation produced no output change (are all weights zero?)")
    idx = np.nonzero(changed)
    return tuple(int(a.max() - a.min() + 1) for a in idx)


# checkpoint container
#
#   magic "VSDR1"
#   u32 x 8: base_channels, levels, variant index, input_channels,
#            output_channels, seed, scalar width in bytes, number of rates
#   u32 x n_rates: dilation rates
#   u32: entry count
#   per entry: u32 name length, name (utf-8), u32 rank, u32 x rank extents,
#              little-endian scalars


def _config_ints(config: NetworkConfig, width: int) -> list[int]:
    return [
        config.base_channels,
        config.levels,
        VARIANTS.index(config.variant),
        config.input_channels,
        config.output_channels,
        config.seed,
        width,
        len(config.dilation_rates),
    ] + list(config.dilation_rates)


def write_checkpoint(path, config: NetworkConfig, entries: dict[str, np.ndarray], width: int = 8) -> None:
    if width not in (4, 8):
        raise ValueError("scalar width must be 4 or 8 bytes")
    dt = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    chunks = [CHECKPOINT_MAGIC]
    ints = _config_ints(config, width)
    chunks.append(struct.pack(f"<{len(ints)}I", *ints))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[NetworkConfig, dict[str, np.ndarray], int]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: missing VSDR1 magic")
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    base, levels, variant, cin, cout, seed, width, nrates = take("<8I")
    rates = list(take(f"<{nrates}I"))
    if width not in (4, 8) or variant >= len(VARIANTS):
        raise CheckpointError(f"{path}: corrupt header")
    config = NetworkConfig(base, levels, rates, VARIANTS[variant], cin, cout, seed)
    dt = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    (count,) = take("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(take(f"<{nlen}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        nbytes = n * width
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: entry {name!r} truncated")
        entries[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += nbytes
    return config, entries, width


def save_model(path, model: Model, extra: dict[str, np.ndarray] | None = None) -> None:
    width = model.head.weight.dtype.itemsize
    entries = dict(model.state_dict())
    if extra:
        entries.update(extra)
    write_checkpoint(path, model.config, entries, width=width)


def load_model(path) -> tuple[Model, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns it with any non-model entries."""
    config, entries, width = read_checkpoint(path)
    model = Model(config, dtype=np.float32 if width == 4 else np.float64)
    names = set(model.state_dict())
    model.load_state_dict({k: v for k, v in entries.items() if k in names})
    return model, {k: v for k, v in entries.items() if k not in names}

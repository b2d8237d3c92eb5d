"""Slice-wise CLAHE, min-max normalization, centre crop and resampling."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .layers import apply_separable, interpolation_matrix
from .volume import Volume

DEFAULT_CROP = (88, 400, 400)
DEFAULT_TARGET = (80, 256, 256)


@dataclass(frozen=True)
class ClaheParams:
    tiles: tuple[int, int] = (8, 8)
    clip_limit: float = 2.0
    bins: int = 256

    def __post_init__(self):
        if len(self.tiles) != 2 or min(self.tiles) < 1:
            raise ValueError(f"tiles must be two counts >= 1, got {self.tiles}")
        if not self.clip_limit >= 1.0:
            raise ValueError(f"clip_limit must be >= 1.0, got {self.clip_limit}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")


def tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def clip_histogram(hist: np.ndarray, limit: float) -> tuple[np.ndarray, float]:
    """Clip at ``limit`` and hand the excess back without pushing any bin over it.

    One uniform pass adds ``excess / bins`` to every bin (capped at the
    limit); what did not fit is then spread at most one count per bin,
    starting at bin 0. Returns the new histogram and the mass left over.
    """
    h = np.asarray(hist, dtype=np.float64)
    excess = float(np.maximum(h - limit, 0).sum())
    h = np.minimum(h, limit)
    add = np.minimum(excess / h.size, limit - h)
    h = h + add
    residual = excess - float(add.sum())
    if residual > 0:
        steps = np.minimum(1.0, limit - h)
        before = np.cumsum(steps) - steps
        give = np.clip(residual - before, 0, steps)
        h = h + give
        residual -= float(give.sum())
    return h, max(residual, 0.0)


def tile_mappings(binned: np.ndarray, params: ClaheParams) -> np.ndarray:
    """Per-tile equalization lookup tables, shape ``(tiles_y, tiles_x, bins)``."""
    ty, tx = params.tiles
    ey, ex = tile_edges(binned.shape[0], ty), tile_edges(binned.shape[1], tx)
    maps = np.empty((ty, tx, params.bins))
    for i in range(ty):
        for j in range(tx):
            tile = binned[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=params.bins)
            limit = params.clip_limit * tile.size / params.bins
            clipped, _ = clip_histogram(hist, limit)
            cdf = np.cumsum(clipped)
            maps[i, j] = cdf / cdf[-1]
    return maps


def _neighbours(n: int, tiles: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # lower/upper tile index and weight of the upper tile for each pixel row/column
    edges = tile_edges(n, tiles)
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = hi - 1
    lo_c = np.clip(lo, 0, tiles - 1)
    hi_c = np.clip(hi, 0, tiles - 1)
    inner = (lo >= 0) & (hi <= tiles - 1)
    w = np.zeros(n)
    w[inner] = (pos[inner] - centers[lo_c[inner]]) / (centers[hi_c[inner]] - centers[lo_c[inner]])
    return lo_c, hi_c, w


def bin_indices(scaled: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((scaled * bins).astype(np.int64), bins - 1)


def clahe_slice(img: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of one 2D slice.

    Output lies in ``[0, 1]``; a constant slice is returned unchanged.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"clahe_slice expects a 2D slice, got shape {img.shape}")
    ty, tx = params.tiles
    if img.shape[0] < ty or img.shape[1] < tx:
        raise ValueError(f"slice {img.shape} is smaller than the tile grid {params.tiles}")
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return img.copy()
    binned = bin_indices((img.astype(np.float64) - lo) / (hi - lo), params.bins)
    maps = tile_mappings(binned, params)
    y0, y1, wy = _neighbours(img.shape[0], ty)
    x0, x1, wx = _neighbours(img.shape[1], tx)
    wy, wx = wy[:, None], wx[None, :]
    top = (1 - wx) * maps[y0[:, None], x0[None, :], binned] + wx * maps[y0[:, None], x1[None, :], binned]
    bot = (1 - wx) * maps[y1[:, None], x0[None, :], binned] + wx * maps[y1[:, None], x1[None, :], binned]
    return np.clip((1 - wy) * top + wy * bot, 0.0, 1.0)


def clahe_volume(v: Volume, params: ClaheParams = ClaheParams()) -> Volume:
    out = np.empty(v.data.shape, dtype=np.float64)
    for k in range(v.data.shape[0]):
        out[k] = clahe_slice(v.data[k], params)
    return Volume(out, v.spacing, v.kind)


def normalize_volume(v: Volume) -> Volume:
    """Min-max rescale to ``[0, 1]``; a constant volume becomes all zeros."""
    if v.kind != "intensity":
        raise ValueError("normalize_volume applies to intensity volumes only")
    d = v.data.astype(np.float64)
    lo, hi = d.min(), d.max()
    out = np.zeros_like(d) if hi == lo else (d - lo) / (hi - lo)
    return Volume(out, v.spacing, v.kind)


def crop_offsets(extents, target) -> tuple[int, ...]:
    offs = []
    for axis, (e, t) in enumerate(zip(extents, target)):
        if t > e:
            raise ValueError(f"crop target {t} exceeds extent {e} on axis {axis}")
        if t < 1:
            raise ValueError(f"crop target on axis {axis} must be >= 1")
        offs.append((e - t) // 2)
    return tuple(offs)


def center_crop(v: Volume, target) -> Volume:
    offs = crop_offsets(v.data.shape, target)
    sl = tuple(slice(o, o + t) for o, t in zip(offs, target))
    return Volume(v.data[sl].copy(), v.spacing, v.kind)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resample(v: Volume, target) -> Volume:
    """Trilinear for intensity volumes, nearest-neighbour for masks."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"resample target must be three extents >= 1, got {target}")
    spacing = tuple(s * e / t for s, e, t in zip(v.spacing, v.data.shape, target))
    if v.kind == "mask":
        idx = [nearest_indices(e, t) for e, t in zip(v.data.shape, target)]
        out = v.data[np.ix_(*idx)]
    else:
        mats = [interpolation_matrix(e, t) for e, t in zip(v.data.shape, target)]
        out = apply_separable(v.data.astype(np.float64), mats, 0)
    return Volume(np.ascontiguousarray(out), spacing, v.kind)


@dataclass(frozen=True)
class PreprocessConfig:
    clahe: ClaheParams = field(default_factory=ClaheParams)
    crop: tuple[int, int, int] | None = DEFAULT_CROP
    target: tuple[int, int, int] | None = DEFAULT_TARGET

    @classmethod
    def from_file(cls, path, base: "PreprocessConfig | None" = None) -> "PreprocessConfig":
        return cls.from_mapping(read_key_values(path), base)

    @classmethod
    def from_mapping(cls, kv: dict[str, str], base: "PreprocessConfig | None" = None) -> "PreprocessConfig":
        cfg = base or cls()
        clahe = cfg.clahe
        for key, val in kv.items():
            if key == "tiles":
                clahe = replace(clahe, tiles=_ints(val, 2, key))
            elif key == "clip_limit":
                clahe = replace(clahe, clip_limit=float(val))
            elif key == "bins":
                clahe = replace(clahe, bins=int(val))
            elif key == "crop":
                cfg = replace(cfg, crop=None if val.lower() == "none" else _ints(val, 3, key))
            elif key in ("resample", "target"):
                cfg = replace(cfg, target=None if val.lower() == "none" else _ints(val, 3, key))
            else:
                allowed = ["tiles", "clip_limit", "bins", "crop", "resample"]
                raise ValueError(f"unknown preprocessing key {key!r} (allowed: {allowed})")
        return replace(cfg, clahe=clahe)


def _ints(text: str, n: int, key: str) -> tuple[int, ...]:
    parts = [p for p in text.replace("x", ",").replace(" ", ",").split(",") if p]
    if len(parts) != n:
        raise ValueError(f"{key}: expected {n} integers, got {text!r}")
    return tuple(int(p) for p in parts)


def read_key_values(path) -> dict[str, str]:
    """Parse a ``key=value`` text file; ``#`` starts a comment."""
    kv = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


def preprocess_case(
    intensity: Volume, mask: Volume | None = None, config: PreprocessConfig = PreprocessConfig()
) -> tuple[Volume, Volume | None]:
    """CLAHE per slice -> normalize -> centre crop -> resample. Masks skip the first two."""
    img = normalize_volume(clahe_volume(intensity, config.clahe))
    if mask is not None and mask.data.shape != intensity.data.shape:
        raise ValueError(f"mask extents {mask.data.shape} differ from image extents {intensity.data.shape}")
    if config.crop is not None:
        img = center_crop(img, config.crop)
        mask = center_crop(mask, config.crop) if mask is not None else None
    if config.target is not None:
        img = resample(img, config.target)
        mask = resample(mask, config.target) if mask is not None else None
    return img, mask

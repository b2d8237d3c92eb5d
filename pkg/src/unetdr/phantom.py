"""Synthetic atrium-like phantoms: an oriented ellipsoid body with a few
cylindrical "veins", a smooth multiplicative bias field and Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


@dataclass(frozen=True)
class PhantomParams:
    radius_range: tuple[float, float] = (0.16, 0.26)  # semi-axes as fractions of the smallest extent
    vein_count: tuple[int, int] = (2, 4)
    vein_radius: tuple[float, float] = (0.04, 0.07)
    vein_length: tuple[float, float] = (0.15, 0.3)
    noise_sigma: float = 0.08
    bias_amplitude: float = 0.3
    base_level: float = 0.25
    contrast: float = 0.5
    fg_fraction: tuple[float, float] = (0.01, 0.10)
    max_attempts: int = 50


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _draw_mask(rng: np.random.Generator, extents, p: PhantomParams) -> np.ndarray:
    shape = np.array(extents, dtype=np.float64)
    scale = shape.min()
    grid = np.stack(np.meshgrid(*(np.arange(e) + 0.5 for e in extents), indexing="ij"), axis=-1)
    center = shape / 2 + rng.uniform(-0.08, 0.08, 3) * shape
    semi = rng.uniform(*p.radius_range, 3) * scale
    rot = _random_rotation(rng)
    local = (grid - center) @ rot
    mask = ((local / semi) ** 2).sum(axis=-1) <= 1.0

    n_veins = int(rng.integers(p.vein_count[0], p.vein_count[1] + 1))
    for _ in range(n_veins):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        # start on the ellipsoid surface along d (in the body frame)
        d_local = d @ rot
        t_surf = 1.0 / np.sqrt(((d_local / semi) ** 2).sum())
        start = center + 0.7 * t_surf * d
        length = rng.uniform(*p.vein_length) * scale + 0.3 * t_surf
        radius = rng.uniform(*p.vein_radius) * scale
        rel = grid - start
        along = rel @ d
        perp = np.linalg.norm(rel - along[..., None] * d, axis=-1)
        mask |= (along >= 0) & (along <= length) & (perp <= radius)
    return mask


def _bias_field(rng: np.random.Generator, extents) -> np.ndarray:
    # smooth field in [-1, 1]: sum of a few low-frequency cosines
    coords = np.meshgrid(*(np.linspace(0, 1, e) for e in extents), indexing="ij")
    field = np.zeros(extents)
    for _ in range(3):
        freq = rng.uniform(0.3, 1.2, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)
        term = np.ones(extents)
        for c, f, ph in zip(coords, freq, phase):
            term = term * np.cos(2 * np.pi * f * c + ph)
        field += term
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def generate_phantom(seed: int, extents=(32, 32, 32), params: PhantomParams = PhantomParams(),
                     spacing=(0.625, 0.625, 0.625)) -> tuple[Volume, Volume]:
    """Deterministic (intensity, mask) pair for ``seed``.

    Shapes are redrawn until the foreground fraction lands inside
    ``params.fg_fraction``.
    """
    extents = tuple(int(e) for e in extents)
    if len(extents) != 3 or min(extents) < 16:
        raise ValueError(f"phantom extents must be three values >= 16, got {extents}")
    rng = np.random.default_rng(seed)
    lo, hi = params.fg_fraction
    for _ in range(params.max_attempts):
        mask = _draw_mask(rng, extents, params)
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    else:
        if not mask.any():
            raise ValueError("phantom parameters produce an empty mask")
        raise ValueError(
            f"no phantom with foreground fraction in [{lo}, {hi}] after {params.max_attempts} draws "
            f"(last {frac:.4f})"
        )
    img = params.base_level + params.contrast * mask.astype(np.float64)
    if params.bias_amplitude:
        img = img * (1 + params.bias_amplitude * _bias_field(rng, extents))
    if params.noise_sigma:
        img = img + rng.normal(0, params.noise_sigma, extents)
    return Volume(img, spacing, "intensity"), Volume(mask.astype(np.float64), spacing, "mask")

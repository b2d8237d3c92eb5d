"""Small phantom benchmark comparing the two architectures at equal budget.

Both variants train on one fixed phantom dataset; only the initialization
and shuffle seed change between runs, so the comparison is paired.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .architecture import VARIANTS, Model, NetworkConfig, count_parameters
from .dataset import Case
from .phantom import generate_phantom
from .preprocess import normalize_volume
from .training import TrainConfig, TrainLog, train_fold


@dataclass(frozen=True)
class BenchmarkConfig:
    extents: tuple[int, int, int] = (16, 16, 16)
    n_train: int = 16
    n_val: int = 6
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 30
    base_channels: int = 4
    dtype: str = "float32"


@dataclass
class RunResult:
    variant: str
    seed: int
    n_params: int
    best_val_dc: float
    best_epoch: int
    seconds: float
    log: TrainLog


def phantom_cases(n: int, data_seed: int, offset: int, extents) -> list[Case]:
    out = []
    for i in range(n):
        img, mask = generate_phantom(np.random.default_rng([data_seed, offset + i]).integers(2**63), extents)
        out.append(Case(f"p{offset + i:04d}", normalize_volume(img).data, mask.data))
    return out


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), variants=VARIANTS, progress=None) -> list[RunResult]:
    train = phantom_cases(cfg.n_train, cfg.data_seed, 0, cfg.extents)
    val = phantom_cases(cfg.n_val, cfg.data_seed, 10_000, cfg.extents)
    results = []
    for variant in variants:
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            tc = TrainConfig(epochs=cfg.epochs, seed=seed, dtype=cfg.dtype)
            model = Model(NetworkConfig(base_channels=cfg.base_channels, variant=variant, seed=seed), tc.np_dtype)
            model, log = train_fold(model, train, val, tc)
            r = RunResult(variant, seed, count_parameters(model), max(log.column("val_dc")), log.best_epoch,
                          time.perf_counter() - t0, log)
            results.append(r)
            if progress:
                progress(r)
    return results


def summarize(results: list[RunResult]) -> dict[str, float]:
    """Mean best validation Dice per variant."""
    out = {}
    for r in results:
        out.setdefault(r.variant, []).append(r.best_val_dc)
    return {k: float(np.mean(v)) for k, v in out.items()}

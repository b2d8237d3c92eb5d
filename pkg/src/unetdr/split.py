"""Held-out test set plus k-fold cross-validation partition of case ids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DatasetSplit:
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def val_ids(self, fold: int) -> tuple[str, ...]:
        return self.folds[fold]

    def train_ids(self, fold: int) -> tuple[str, ...]:
        return tuple(c for i, f in enumerate(self.folds) if i != fold for c in f)

    def all_ids(self) -> tuple[str, ...]:
        return self.test_ids + tuple(c for f in self.folds for c in f)


def make_split(case_ids: Sequence[str], test_fraction: float = 0.2, k: int = 5, seed: int = 0) -> DatasetSplit:
    ids = [str(c) for c in case_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ids) < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} cases, got {len(ids)}")
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = int(round(test_fraction * len(ids)))
    n_test = min(n_test, len(ids) - k)
    rest = shuffled[n_test:]
    folds = tuple(tuple(rest[i] for i in part) for part in np.array_split(np.arange(len(rest)), k))
    return DatasetSplit(tuple(shuffled[:n_test]), folds, seed)


def write_manifest(path, split: DatasetSplit) -> None:
    lines = [f"# seed={split.seed} k={split.k}"]
    lines += [f"{cid}\ttest" for cid in split.test_ids]
    for i, fold in enumerate(split.folds):
        lines += [f"{cid}\tfold-{i}" for cid in fold]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetSplit:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# seed="):
        raise ValueError(f"{path}: missing '# seed=... k=...' header line")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    seed, k = int(meta["seed"]), int(meta["k"])
    test: list[str] = []
    folds: list[list[str]] = [[] for _ in range(k)]
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cid, role = line.split("\t")
        if role == "test":
            test.append(cid)
        elif role.startswith("fold-") and 0 <= int(role[5:]) < k:
            folds[int(role[5:])].append(cid)
        else:
            raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
    return DatasetSplit(tuple(test), tuple(tuple(f) for f in folds), seed)

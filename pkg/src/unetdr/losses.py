"""Training loss (two-class Dice + binary cross-entropy) and evaluation metrics."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor

DICE_SMOOTH = 1e-12
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossValue:
    total: Tensor
    dice_term: float
    bce_term: float


def _check_pair(y: np.ndarray, p: Tensor) -> None:
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: target {y.shape} vs prediction {p.shape}")


def dice_loss(y, p, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - sum over {fg, bg} of overlap / (|y| + |p|)``.

    The background class is ``(1 - y, 1 - p)``. A perfect prediction with
    both classes present scores 0 since each ratio is one half.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    p = as_tensor(p)
    _check_pair(y, p)
    for name, arr in (("target", y), ("prediction", p.data)):
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise ValueError(f"{name} values must lie in [0, 1]")
    y = y.astype(p.dtype, copy=False)
    yb = 1 - y
    pb = 1 - p
    fg = ((p * y).sum() + smooth) / (p.sum() + (float(y.sum()) + smooth))
    bg = ((pb * yb).sum() + smooth) / (pb.sum() + (float(yb.sum()) + smooth))
    return 1.0 - (fg + bg)


def bce_loss(y, p, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean voxelwise binary cross-entropy with ``p`` clamped to ``[clamp, 1 - clamp]``."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y)
    p = as_tensor(p)
    _check_pair(y, p)
    y = y.astype(p.dtype, copy=False)
    pc = p.clip(clamp, 1 - clamp)
    ll = pc.log() * y + (1.0 - pc).log() * (1 - y)
    return -ll.mean()


def combined_loss(y, p) -> LossValue:
    d = dice_loss(y, p)
    b = bce_loss(y, p)
    return LossValue(d + b, float(d.data), float(b.data))


def evaluate_metrics(y, p, threshold: float = 0.5) -> tuple[float, float, float]:
    """Dice, Jaccard and voxel accuracy of ``p >= threshold`` against ``y``.

    Two empty masks count as a perfect match.
    """
    y = np.asarray(y) > 0.5
    p = np.asarray(p)
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: target {y.shape} vs prediction {p.shape}")
    pb = p >= threshold
    inter = int(np.count_nonzero(y & pb))
    sy, sp = int(np.count_nonzero(y)), int(np.count_nonzero(pb))
    union = sy + sp - inter
    if union == 0:
        dc = ji = 1.0
    else:
        dc = 2 * inter / (sy + sp)
        ji = inter / union
    ac = int(np.count_nonzero(y == pb)) / y.size
    return dc, ji, ac


@dataclass
class MetricsReport:
    per_case: list[tuple[str, float, float, float]] = field(default_factory=list)

    def add(self, case_id: str, y, p, threshold: float = 0.5) -> tuple[float, float, float]:
        m = evaluate_metrics(y, p, threshold)
        self.per_case.append((case_id, *m))
        return m

    @property
    def aggregate(self) -> tuple[float, float, float]:
        if not self.per_case:
            return (float("nan"),) * 3
        arr = np.array([r[1:] for r in self.per_case], dtype=np.float64)
        return tuple(float(v) for v in arr.mean(axis=0))

    def to_text(self, sep: str = "\t") -> str:
        buf = io.StringIO()
        buf.write(sep.join(("case", "dc", "ji", "ac")) + "\n")
        for cid, dc, ji, ac in self.per_case:
            buf.write(sep.join((cid, f"{dc:.17g}", f"{ji:.17g}", f"{ac:.17g}")) + "\n")
        dc, ji, ac = self.aggregate
        buf.write(sep.join(("mean", f"{dc:.17g}", f"{ji:.17g}", f"{ac:.17g}")) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, sep: str = "\t") -> "MetricsReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].split(sep) != ["case", "dc", "ji", "ac"]:
            raise ValueError("not a metrics table (bad header)")
        rep = cls()
        for ln in lines[1:]:
            cid, dc, ji, ac = ln.split(sep)
            if cid == "mean":
                continue
            rep.per_case.append((cid, float(dc), float(ji), float(ac)))
        return rep

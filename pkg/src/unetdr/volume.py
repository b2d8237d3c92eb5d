from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("intensity", "mask")


@dataclass
class Volume:
    """A ``(D, H, W)`` scalar grid with per-axis voxel spacing in mm.

    ``D`` is the slice axis. Mask volumes hold only 0 and 1.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be rank 3, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "mask":
            bad = ~np.isin(self.data, (0, 1))
            if bad.any():
                raise ValueError(
                    f"mask volume is not binary: found value {self.data[bad].flat[0]!r}"
                )

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

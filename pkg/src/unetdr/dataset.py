"""Case directories: ``<case_id>_image.nrrd`` next to ``<case_id>_mask.nrrd``."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nrrd import read_volume, write_volume
from .volume import Volume

DATA_ROOT_ENV = "UNETDR_DATA_ROOT"


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    mask: np.ndarray | None


def resolve(path) -> Path:
    """Relative paths are taken under ``$UNETDR_DATA_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def image_path(directory, case_id: str) -> Path:
    return Path(directory) / f"{case_id}_image.nrrd"


def mask_path(directory, case_id: str) -> Path:
    return Path(directory) / f"{case_id}_mask.nrrd"


def list_cases(directory) -> list[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    return sorted(p.name[: -len("_image.nrrd")] for p in directory.glob("*_image.nrrd"))


def write_case(directory, case_id: str, image: Volume, mask: Volume | None) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    # images are stored as 32-bit floats; quantize explicitly so the writer's exactness check holds
    image = Volume(image.data.astype(np.float32), image.spacing, image.kind)
    write_volume(image_path(directory, case_id), image, "float")
    if mask is not None:
        write_volume(mask_path(directory, case_id), mask, "uchar")


def read_case_volumes(directory, case_id: str) -> tuple[Volume, Volume | None]:
    img = read_volume(image_path(directory, case_id))
    mp = mask_path(directory, case_id)
    mask = read_volume(mp, kind="mask") if mp.exists() else None
    return img, mask


def load_cases(directory, case_ids=None) -> dict[str, Case]:
    ids = list_cases(directory) if case_ids is None else list(case_ids)
    out = {}
    for cid in ids:
        img, mask = read_case_volumes(directory, cid)
        out[cid] = Case(cid, img.data, None if mask is None else mask.data)
    return out

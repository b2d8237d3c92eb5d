"""Reader and writer for the subset of NRRD used by the challenge volumes.

Supported: dimension 3; types short, ushort, uchar, float; raw or gzip
encoding; little or big endian; attached or detached data. NRRD lists axes
fastest-first (x y z); in memory volumes are ``(D, H, W) == (z, y, x)``, so
the size list is reversed at this boundary.
"""

from __future__ import annotations

import gzip
import logging
import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Volume

logger = logging.getLogger(__name__)

_TYPE_ALIASES = {
    "short": "short", "short int": "short", "signed short": "short", "signed short int": "short",
    "int16": "short", "int16_t": "short",
    "ushort": "ushort", "unsigned short": "ushort", "unsigned short int": "ushort",
    "uint16": "ushort", "uint16_t": "ushort",
    "uchar": "uchar", "unsigned char": "uchar", "uint8": "uchar", "uint8_t": "uchar",
    "float": "float",
}
SCALAR_TYPES = {"short": "i2", "ushort": "u2", "uchar": "u1", "float": "f4"}
ENCODINGS = {"raw": "raw", "gzip": "gzip", "gz": "gzip"}
REQUIRED = ("dimension", "sizes", "type", "encoding")
_MAGIC = re.compile(rb"NRRD000[1-9]\r?\n")


class NrrdError(ValueError):
    """Any malformed or unsupported NRRD input."""


@dataclass
class NrrdHeader:
    dimension: int
    sizes: tuple[int, ...]  # NRRD order, fastest axis first
    type: str
    encoding: str
    endian: str = "little"
    spacings: tuple[float, ...] | None = None
    data_file: str | None = None
    data_offset: int = 0

    @property
    def extents(self) -> tuple[int, ...]:
        """Extents in (D, H, W) order."""
        return tuple(reversed(self.sizes))

    @property
    def dtype(self) -> np.dtype:
        code = SCALAR_TYPES[self.type]
        order = "<" if self.endian == "little" else ">"
        return np.dtype(order + code) if code != "u1" else np.dtype("u1")


def _parse_floats(text: str) -> list[float | None]:
    return [None if t.lower() == "nan" else float(t) for t in text.split()]


def _spacing_from_directions(text: str, dim: int) -> tuple[float, ...]:
    vecs = re.findall(r"\(([^)]*)\)|none", text)
    if len(vecs) != dim:
        raise NrrdError(f"space directions lists {len(vecs)} vectors, expected {dim}")
    out = []
    for v in vecs:
        if not v:
            out.append(1.0)
            continue
        comps = [float(c) for c in v.split(",")]
        out.append(float(np.sqrt(sum(c * c for c in comps))))
    return tuple(out)


def parse_nrrd_header(raw: bytes) -> NrrdHeader:
    """Parse the text header; ``data_offset`` points just past the blank line."""
    try:
        return _parse_header(raw)
    except NrrdError:
        raise
    except (ValueError, TypeError, OverflowError, UnicodeError) as exc:
        raise NrrdError(f"malformed NRRD header: {exc}") from exc


def _parse_header(raw: bytes) -> NrrdHeader:
    if not isinstance(raw, (bytes, bytearray)):
        raise NrrdError("header input must be bytes")
    m = _MAGIC.match(raw)
    if not m:
        raise NrrdError("missing NRRD magic (expected 'NRRD000<digit>')")
    pos = m.end()
    fields: dict[str, str] = {}
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            line, nxt = raw[pos:], len(raw)
        else:
            line, nxt = raw[pos:nl], nl + 1
        line = line.rstrip(b"\r").decode("latin-1")
        pos = nxt
        if line == "":
            break
        if line.startswith("#"):
            continue
        if ":=" in line:
            continue  # key/value pairs carry no structure we need
        if ": " not in line:
            raise NrrdError(f"malformed header line {line!r}")
        key, val = line.split(": ", 1)
        key = key.strip().lower()
        if key in ("data file", "datafile"):
            key = "data file"
        fields[key] = val.strip()
        if nl < 0:
            break
    for req in REQUIRED:
        if req not in fields:
            raise NrrdError(f"missing required field {req!r}")
    known = set(REQUIRED) | {"endian", "spacings", "space directions", "data file", "space", "space origin",
                             "kinds", "space dimension", "content", "units", "space units"}
    for k in fields:
        if k not in known:
            logger.warning("ignoring unsupported NRRD field %r", k)

    dim = int(fields["dimension"])
    if dim != 3:
        raise NrrdError(f"unsupported dimension {dim} (only 3 is supported)")
    sizes = tuple(int(s) for s in fields["sizes"].split())
    if len(sizes) != dim:
        raise NrrdError(f"sizes lists {len(sizes)} extents but dimension is {dim}")
    if any(s < 1 for s in sizes):
        raise NrrdError(f"sizes must be positive, got {sizes}")
    tname = _TYPE_ALIASES.get(fields["type"].strip().lower())
    if tname is None:
        raise NrrdError(f"unsupported type {fields['type']!r} (supported: {sorted(SCALAR_TYPES)})")
    enc = ENCODINGS.get(fields["encoding"].strip().lower())
    if enc is None:
        raise NrrdError(f"unsupported encoding {fields['encoding']!r} (supported: raw, gzip)")
    endian = fields.get("endian", "little").strip().lower()
    if endian not in ("little", "big"):
        raise NrrdError(f"unsupported endian {endian!r}")
    spacings = None
    if "spacings" in fields:
        vals = _parse_floats(fields["spacings"])
        if len(vals) != dim:
            raise NrrdError(f"spacings lists {len(vals)} values, expected {dim}")
        spacings = tuple(1.0 if v is None else v for v in vals)
    elif "space directions" in fields:
        spacings = _spacing_from_directions(fields["space directions"], dim)
    if spacings is not None and any(not (s > 0 and np.isfinite(s)) for s in spacings):
        raise NrrdError(f"spacings must be positive and finite, got {spacings}")
    return NrrdHeader(dim, sizes, tname, enc, endian, spacings, fields.get("data file"), pos)


def read_volume(path, kind: str = "intensity", dtype=np.float64) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    try:
        header = parse_nrrd_header(raw)
    except NrrdError as exc:
        raise NrrdError(f"{path}: {exc}") from exc
    if header.data_file:
        data_path = path.parent / header.data_file
        try:
            payload = data_path.read_bytes()
        except OSError as exc:
            raise NrrdError(f"{path}: cannot read detached data file {data_path}: {exc.strerror}") from exc
    else:
        payload = raw[header.data_offset:]
    if header.encoding == "gzip":
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError, zlib.error) as exc:
            raise NrrdError(f"{path}: corrupt gzip payload: {exc}") from exc
    n = math.prod(header.sizes)
    expected = n * header.dtype.itemsize
    if len(payload) < expected:
        raise NrrdError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=header.dtype, count=n).reshape(header.extents)
    spacing = tuple(reversed(header.spacings)) if header.spacings else (1.0, 1.0, 1.0)
    try:
        return Volume(arr.astype(dtype), spacing, kind)
    except ValueError as exc:
        raise NrrdError(f"{path}: {exc}") from exc


def write_volume(path, volume: Volume, scalar_type: str | None = None, encoding: str = "raw",
                 detached: bool = False) -> None:
    """Write ``volume``; values must be exactly representable in ``scalar_type``."""
    if scalar_type is None:
        scalar_type = "uchar" if volume.kind == "mask" else "float"
    tname = _TYPE_ALIASES.get(scalar_type)
    if tname is None:
        raise NrrdError(f"unsupported type {scalar_type!r} (supported: {sorted(SCALAR_TYPES)})")
    enc = ENCODINGS.get(encoding)
    if enc is None:
        raise NrrdError(f"unsupported encoding {encoding!r} (supported: raw, gzip)")
    dt = np.dtype("<" + SCALAR_TYPES[tname]) if tname != "uchar" else np.dtype("u1")
    data = volume.data
    cast = data.astype(dt)
    if not np.array_equal(cast.astype(data.dtype), data):
        raise NrrdError(f"{path}: volume values are not exactly representable as {tname}")
    payload = np.ascontiguousarray(cast).tobytes()
    if enc == "gzip":
        payload = gzip.compress(payload, mtime=0)
    path = Path(path)
    sizes = " ".join(str(e) for e in reversed(volume.data.shape))
    spacings = " ".join(repr(float(s)) for s in reversed(volume.spacing))
    lines = [
        "NRRD0004",
        f"type: {tname}",
        "dimension: 3",
        f"sizes: {sizes}",
        f"spacings: {spacings}",
        f"encoding: {enc}",
    ]
    if dt.itemsize > 1:
        lines.append("endian: little")
    if detached:
        data_name = path.name.rsplit(".", 1)[0] + (".raw.gz" if enc == "gzip" else ".raw")
        lines.append(f"data file: {data_name}")
        (path.parent / data_name).write_bytes(payload)
        path.write_bytes(("\n".join(lines) + "\n\n").encode("ascii"))
    else:
        path.write_bytes(("\n".join(lines) + "\n\n").encode("ascii") + payload)

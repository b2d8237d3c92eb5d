"""Random header mutations for robustness checks of the NRRD reader."""

import numpy as np

from unetdr.nrrd import NrrdError, read_volume

TOKENS = [b"", b"0", b"-1", b"3", b"4", b"99999999999999999999", b"nan", b"inf", b"raw", b"gzip", b"bzip2",
          b"float", b"double", b"uchar", b"short", b"big", b"little", b"1 1", b"2 2 2 2", b"(1,0,0)",
          b"none", b"\xff\xfe", b"\x00", b"../missing.raw", b"."]


def mutate(raw: bytes, rng: np.random.Generator, header_len: int) -> bytes:
    b = bytearray(raw)
    kind = rng.integers(7)
    if kind == 0:  # flip bytes in the header
        for _ in range(rng.integers(1, 4)):
            b[rng.integers(header_len)] = rng.integers(256)
    elif kind == 1:  # delete a span
        i = rng.integers(header_len)
        del b[i:i + rng.integers(1, 12)]
    elif kind == 2:  # insert junk
        i = rng.integers(header_len)
        b[i:i] = bytes(rng.integers(0, 256, rng.integers(1, 8), dtype=np.uint8))
    elif kind == 3:  # replace a field value
        lines = bytes(b[:header_len]).split(b"\n")
        k = rng.integers(1, max(2, len(lines) - 1))
        if b": " in lines[k]:
            key = lines[k].split(b": ", 1)[0]
            lines[k] = key + b": " + TOKENS[rng.integers(len(TOKENS))]
        b = bytearray(b"\n".join(lines) + raw[header_len:])
    elif kind == 4:  # drop or duplicate a line
        lines = bytes(b[:header_len]).split(b"\n")
        k = rng.integers(len(lines))
        if rng.random() < 0.5:
            del lines[k]
        else:
            lines.insert(k, lines[k])
        b = bytearray(b"\n".join(lines) + raw[header_len:])
    elif kind == 5:  # truncate anywhere
        b = b[: rng.integers(len(b) + 1)]
    else:  # add an unknown or repeated field
        extra = b"\n".join([b"kinds: domain domain", b"sizes: " + TOKENS[rng.integers(len(TOKENS))]])
        b[header_len - 1:header_len - 1] = extra + b"\n"
    return bytes(b)


def fuzz_reader(template: bytes, n: int, seed: int, workdir) -> dict[str, int]:
    """Feed ``n`` mutants to ``read_volume``. Returns outcome counts; unexpected exceptions propagate."""
    header_len = template.index(b"\n\n") + 2
    rng = np.random.default_rng(seed)
    path = workdir / "fuzz.nhdr"
    counts = {"ok": 0, "rejected": 0}
    for _ in range(n):
        path.write_bytes(mutate(template, rng, header_len))
        try:
            read_volume(path)
            counts["ok"] += 1
        except NrrdError:
            counts["rejected"] += 1
    return counts

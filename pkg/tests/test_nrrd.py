import gzip

import numpy as np
import pytest

from nrrd_fuzz import fuzz_reader
from unetdr.nrrd import NrrdError, parse_nrrd_header, read_volume, write_volume
from unetdr.volume import Volume

RANGES = {"uchar": (0, 255), "short": (-32768, 32767), "ushort": (0, 65535)}


def _sample(tname, rng, shape=(3, 4, 5)):
    if tname == "float":
        return rng.standard_normal(shape).astype(np.float32).astype(np.float64)
    lo, hi = RANGES[tname]
    d = rng.integers(lo, hi + 1, shape).astype(np.float64)
    d.flat[0], d.flat[1] = lo, hi
    return d


@pytest.mark.parametrize("tname", ["uchar", "short", "ushort", "float"])
@pytest.mark.parametrize("encoding", ["raw", "gzip"])
@pytest.mark.parametrize("detached", [False, True])
def test_round_trip_bit_exact(tmp_path, tname, encoding, detached):
    rng = np.random.default_rng(len(tname))
    v = Volume(_sample(tname, rng), (2.5, 0.625, 0.75))
    path = tmp_path / ("v.nhdr" if detached else "v.nrrd")
    write_volume(path, v, tname, encoding, detached)
    back = read_volume(path)
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing


def test_axis_order_reversal(tmp_path):
    v = Volume(np.zeros((2, 3, 4)))
    write_volume(tmp_path / "a.nrrd", v, "uchar")
    text = (tmp_path / "a.nrrd").read_bytes().split(b"\n\n")[0].decode()
    assert "sizes: 4 3 2" in text
    h = parse_nrrd_header((tmp_path / "a.nrrd").read_bytes())
    assert h.sizes == (4, 3, 2) and h.extents == (2, 3, 4)


def test_big_endian_and_space_directions(tmp_path):
    d = np.arange(24, dtype=">i2").reshape(2, 3, 4)
    header = (b"NRRD0004\ntype: short\ndimension: 3\nsizes: 4 3 2\nspace: left-posterior-superior\n"
              b"space directions: (0.5,0,0) (0,0.5,0) (0,0,2)\nendian: big\nencoding: raw\n\n")
    (tmp_path / "b.nrrd").write_bytes(header + d.tobytes())
    v = read_volume(tmp_path / "b.nrrd")
    assert np.array_equal(v.data, d.astype(float))
    assert v.spacing == (2.0, 0.5, 0.5)


def test_gzip_output_is_deterministic(tmp_path):
    v = Volume(np.ones((2, 2, 2)))
    write_volume(tmp_path / "a.nrrd", v, "uchar", "gzip")
    write_volume(tmp_path / "b.nrrd", v, "uchar", "gzip")
    assert (tmp_path / "a.nrrd").read_bytes() == (tmp_path / "b.nrrd").read_bytes()


def test_inexact_values_refused(tmp_path):
    with pytest.raises(NrrdError, match="not exactly representable"):
        write_volume(tmp_path / "a.nrrd", Volume(np.full((2, 2, 2), 0.5)), "uchar")
    with pytest.raises(NrrdError, match="not exactly representable"):
        write_volume(tmp_path / "a.nrrd", Volume(np.full((2, 2, 2), 0.1)), "float")


def test_unsupported_write_options(tmp_path):
    with pytest.raises(NrrdError, match="unsupported type"):
        write_volume(tmp_path / "a.nrrd", Volume(np.zeros((2, 2, 2))), "double")
    with pytest.raises(NrrdError, match="unsupported encoding"):
        write_volume(tmp_path / "a.nrrd", Volume(np.zeros((2, 2, 2))), "uchar", "bzip2")


@pytest.mark.parametrize("header, message", [
    (b"NRRX0004\n", "magic"),
    (b"NRRD0004\ntype: float\nsizes: 2 2 2\nencoding: raw\n\n", "dimension"),
    (b"NRRD0004\ntype: double\ndimension: 3\nsizes: 2 2 2\nencoding: raw\n\n", "unsupported type"),
    (b"NRRD0004\ntype: float\ndimension: 2\nsizes: 2 2\nencoding: raw\n\n", "dimension 2"),
    (b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2\nencoding: raw\n\n", "sizes"),
    (b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\nencoding: bzip2\n\n", "encoding"),
    (b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 x\nencoding: raw\n\n", "malformed"),
    (b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\nspacings: 1 0 1\nencoding: raw\n\n", "spacings"),
])
def test_header_errors(header, message):
    with pytest.raises(NrrdError, match=message):
        parse_nrrd_header(header)


def test_truncated_payload_reports_sizes(tmp_path):
    header = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 2 2 2\nendian: little\nencoding: raw\n\n"
    (tmp_path / "t.nrrd").write_bytes(header + b"\0" * 20)
    with pytest.raises(NrrdError, match="expected 32 bytes, got 20"):
        read_volume(tmp_path / "t.nrrd")


def test_corrupt_gzip(tmp_path):
    header = b"NRRD0004\ntype: uchar\ndimension: 3\nsizes: 2 2 2\nencoding: gzip\n\n"
    (tmp_path / "g.nrrd").write_bytes(header + gzip.compress(b"\1" * 8)[:-6])
    with pytest.raises(NrrdError, match="gzip"):
        read_volume(tmp_path / "g.nrrd")


def test_missing_detached_file_names_it(tmp_path):
    header = b"NRRD0004\ntype: uchar\ndimension: 3\nsizes: 2 2 2\nencoding: raw\ndata file: gone.raw\n\n"
    (tmp_path / "d.nhdr").write_bytes(header)
    with pytest.raises(NrrdError, match="gone.raw"):
        read_volume(tmp_path / "d.nhdr")


def test_non_binary_mask_rejected(tmp_path):
    write_volume(tmp_path / "m.nrrd", Volume(np.full((2, 2, 2), 2.0)), "uchar")
    with pytest.raises(NrrdError, match="not binary"):
        read_volume(tmp_path / "m.nrrd", kind="mask")


def test_unknown_field_is_only_a_warning(tmp_path, caplog):
    header = b"NRRD0004\ntype: uchar\ndimension: 3\nsizes: 1 1 1\nencoding: raw\nmeasurement frame: (1,0,0)\n\n"
    (tmp_path / "w.nrrd").write_bytes(header + b"\1")
    assert read_volume(tmp_path / "w.nrrd").data.item() == 1
    assert "measurement frame" in caplog.text


@pytest.mark.parametrize("tname", ["uchar", "short", "ushort", "float"])
def test_cross_check_against_pynrrd(tmp_path, tname):
    pynrrd = pytest.importorskip("nrrd")
    rng = np.random.default_rng(7)
    v = Volume(_sample(tname, rng), (1.5, 0.5, 0.25))
    write_volume(tmp_path / "ours.nrrd", v, tname, "gzip")
    data, header = pynrrd.read(str(tmp_path / "ours.nrrd"), index_order="C")
    assert np.array_equal(data.astype(np.float64), v.data)
    assert list(header["spacings"]) == [0.25, 0.5, 1.5]
    dt = {"uchar": np.uint8, "short": np.int16, "ushort": np.uint16, "float": np.float32}[tname]
    pynrrd.write(str(tmp_path / "theirs.nrrd"), v.data.astype(dt), {"spacings": [0.25, 0.5, 1.5]},
                 index_order="C")
    back = read_volume(tmp_path / "theirs.nrrd")
    assert np.array_equal(back.data, v.data)
    assert back.spacing == v.spacing


def test_fuzz_smoke(tmp_path):
    write_volume(tmp_path / "t.nrrd", Volume(np.arange(8.0).reshape(2, 2, 2)), "ushort")
    counts = fuzz_reader((tmp_path / "t.nrrd").read_bytes(), 500, 0, tmp_path)
    assert counts["ok"] + counts["rejected"] == 500
    assert counts["rejected"] > 0

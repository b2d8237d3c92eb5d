import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from unetdr.dataset import DATA_ROOT_ENV, list_cases, load_cases, resolve, write_case
from unetdr.phantom import PhantomParams, generate_phantom
from unetdr.split import make_split, read_manifest, write_manifest
from unetdr.volume import Volume


def test_phantom_is_deterministic():
    a = generate_phantom(11, (16, 16, 16))
    b = generate_phantom(11, (16, 16, 16))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_phantom_seeds_differ():
    assert not np.array_equal(generate_phantom(1, (16,) * 3)[1].data, generate_phantom(2, (16,) * 3)[1].data)


@pytest.mark.parametrize("seed", range(20))
def test_phantom_foreground_fraction(seed):
    img, mask = generate_phantom(seed, (16, 16, 16))
    lo, hi = PhantomParams().fg_fraction
    assert lo <= mask.data.mean() <= hi
    assert set(np.unique(mask.data)) <= {0.0, 1.0}
    assert img.kind == "intensity" and mask.kind == "mask"
    # the body is brighter than the background on average
    assert img.data[mask.data > 0].mean() > img.data[mask.data == 0].mean()


def test_phantom_rejects_small_extents():
    with pytest.raises(ValueError):
        generate_phantom(0, (8, 16, 16))


def test_phantom_impossible_fraction():
    with pytest.raises(ValueError, match="foreground fraction"):
        generate_phantom(0, (16, 16, 16), PhantomParams(fg_fraction=(0.9, 0.95), max_attempts=3))


def test_split_100_cases():
    s = make_split([f"c{i:03d}" for i in range(100)], 0.2, 5, seed=0)
    assert len(s.test_ids) == 20
    assert [len(f) for f in s.folds] == [16] * 5
    assert all(len(s.train_ids(k)) == 64 for k in range(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(7, 150), st.integers(2, 6), st.floats(0.0, 0.5), st.integers(0, 2**31))
def test_split_partition(n, k, frac, seed):
    ids = [f"id{i}" for i in range(n)]
    s = make_split(ids, frac, k, seed)
    folds = [set(f) for f in s.folds]
    assert sorted(s.all_ids()) == sorted(ids)
    assert len(set(s.test_ids) | set().union(*folds)) == n
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1 and min(sizes) >= 1
    for i in range(k):
        assert set(s.val_ids(i)).isdisjoint(s.train_ids(i))
        assert set(s.train_ids(i)).isdisjoint(s.test_ids)
    assert make_split(ids, frac, k, seed) == s


def test_split_errors():
    with pytest.raises(ValueError, match="unique"):
        make_split(["a", "a", "b", "c"], 0.2, 2)
    with pytest.raises(ValueError, match="at least"):
        make_split(["a", "b"], 0.2, 5)


def test_manifest_round_trip(tmp_path):
    s = make_split([f"c{i}" for i in range(30)], 0.2, 5, seed=3)
    write_manifest(tmp_path / "m.tsv", s)
    assert read_manifest(tmp_path / "m.tsv") == s


def test_manifest_bad_role(tmp_path):
    (tmp_path / "m.tsv").write_text("# seed=0 k=2\nc1\tfold-7\n")
    with pytest.raises(ValueError, match="m.tsv:2"):
        read_manifest(tmp_path / "m.tsv")


def test_case_directory_round_trip(tmp_path):
    img, mask = generate_phantom(0, (16, 16, 16))
    write_case(tmp_path, "a", img, mask)
    write_case(tmp_path, "b", img, None)
    assert list_cases(tmp_path) == ["a", "b"]
    cases = load_cases(tmp_path)
    assert cases["b"].mask is None
    assert np.array_equal(cases["a"].mask, mask.data)
    assert np.array_equal(cases["a"].image, img.data.astype(np.float32))


def test_list_cases_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        list_cases(tmp_path / "nope")


def test_data_root_override(monkeypatch, tmp_path):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert resolve("x/y") == tmp_path / "x" / "y"
    assert resolve("/abs") == type(tmp_path)("/abs")
    monkeypatch.delenv(DATA_ROOT_ENV)
    assert str(resolve("x")) == "x"


def test_volume_validation():
    with pytest.raises(ValueError, match="rank 3"):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="spacing"):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError, match="not binary"):
        Volume(np.full((2, 2, 2), 0.5), kind="mask")

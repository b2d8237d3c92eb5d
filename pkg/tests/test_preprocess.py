import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_clahe
from unetdr.preprocess import (
    DEFAULT_CROP,
    DEFAULT_TARGET,
    _neighbours,
    ClaheParams,
    PreprocessConfig,
    bin_indices,
    center_crop,
    clahe_slice,
    clip_histogram,
    crop_offsets,
    nearest_indices,
    normalize_volume,
    preprocess_case,
    resample,
    tile_mappings,
)
from unetdr.volume import Volume


@pytest.mark.parametrize("shape, tiles, clip, bins", [
    ((16, 16), (2, 2), 2.0, 16),
    ((17, 23), (3, 4), 1.5, 32),
    ((24, 20), (8, 8), 3.0, 64),
    ((9, 9), (1, 1), 1.0, 8),
])
def test_clahe_matches_loop_oracle(shape, tiles, clip, bins):
    img = np.random.default_rng(sum(shape)).gamma(2.0, 1.0, shape)
    fast = clahe_slice(img, ClaheParams(tiles, clip, bins))
    slow = naive_clahe(img, tiles, clip, bins)
    assert np.abs(fast - slow).max() < 1e-12


def test_clahe_constant_slice_unchanged():
    img = np.full((16, 16), 3.0)
    assert np.array_equal(clahe_slice(img, ClaheParams((2, 2))), img)


def test_clahe_output_range():
    img = np.random.default_rng(0).normal(size=(32, 32))
    out = clahe_slice(img, ClaheParams((4, 4)))
    assert out.min() >= 0 and out.max() <= 1


def test_clahe_params_validation():
    for bad in (dict(tiles=(0, 2)), dict(clip_limit=0.5), dict(bins=1)):
        with pytest.raises(ValueError):
            ClaheParams(**bad)
    with pytest.raises(ValueError, match="smaller than the tile grid"):
        clahe_slice(np.zeros((4, 4)) + np.eye(4), ClaheParams((8, 8)))


def test_clip_histogram_simple():
    h, r = clip_histogram(np.array([10.0, 0, 0, 0]), 4.0)
    # 6 excess: +1.5 each capped at 4 -> [4, 1.5, 1.5, 1.5], 1.5 placed already... all fits
    assert h.max() <= 4.0
    assert h.sum() + r == pytest.approx(10.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 32, 256]), st.floats(1.0, 4.0))
def test_clip_property_on_random_slices(seed, bins, clip):
    rng = np.random.default_rng(seed)
    img = rng.gamma(rng.uniform(0.3, 3), 1.0, (32, 32))
    img[rng.random((32, 32)) < 0.2] = 0  # heavy spike in one bin
    binned = bin_indices((img - img.min()) / (img.max() - img.min()), bins)
    tile = binned[:16, :16]
    hist = np.bincount(tile.ravel(), minlength=bins).astype(float)
    limit = clip * tile.size / bins
    h, residual = clip_histogram(hist, limit)
    assert h.max() <= limit + 1e-9
    assert np.all(h >= np.minimum(hist, limit) - 1e-12)
    assert h.sum() + residual == pytest.approx(hist.sum(), rel=1e-12)
    maps = tile_mappings(binned, ClaheParams((2, 2), clip, bins))
    assert np.all(np.diff(maps, axis=-1) >= 0)
    assert np.allclose(maps[..., -1], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clahe_monotone_within_a_pixel(seed):
    # the blended mapping at any fixed pixel is non-decreasing in the bin index
    rng = np.random.default_rng(seed)
    img = rng.random((24, 30))
    p = ClaheParams((3, 4), 2.0, 16)
    maps = tile_mappings(bin_indices(img, 16), p)
    y0, y1, wy = _neighbours(24, 3)
    x0, x1, wx = _neighbours(30, 4)
    r, c = rng.integers(0, 24), rng.integers(0, 30)
    blend = ((1 - wy[r]) * ((1 - wx[c]) * maps[y0[r], x0[c]] + wx[c] * maps[y0[r], x1[c]])
             + wy[r] * ((1 - wx[c]) * maps[y1[r], x0[c]] + wx[c] * maps[y1[r], x1[c]]))
    assert np.all(np.diff(blend) >= -1e-15)
    assert 0 <= wy[r] <= 1 and 0 <= wx[c] <= 1


def test_normalize():
    v = normalize_volume(Volume(np.arange(8.0).reshape(2, 2, 2) * 3 + 1))
    assert v.data.min() == 0 and v.data.max() == 1
    assert np.all(normalize_volume(Volume(np.ones((2, 2, 2)))).data == 0)
    with pytest.raises(ValueError):
        normalize_volume(Volume(np.ones((2, 2, 2)), kind="mask"))


def test_default_crop_offsets():
    assert crop_offsets((88, 640, 640), DEFAULT_CROP) == (0, 120, 120)
    assert crop_offsets((88, 576, 576), DEFAULT_CROP) == (0, 88, 88)


def test_crop_too_large():
    with pytest.raises(ValueError, match="axis 1"):
        crop_offsets((88, 300, 640), DEFAULT_CROP)


def test_center_crop_picks_the_middle():
    d = np.arange(6 * 7 * 8.0).reshape(6, 7, 8)
    out = center_crop(Volume(d), (2, 3, 4)).data
    assert np.array_equal(out, d[2:4, 2:5, 2:6])


def test_nearest_indices():
    assert list(nearest_indices(4, 2)) == [1, 3]
    assert list(nearest_indices(2, 4)) == [0, 0, 1, 1]


def test_resample_shapes_spacing_and_mask_binary():
    rng = np.random.default_rng(0)
    img = Volume(rng.random((11, 20, 20)), (2.5, 0.625, 0.625))
    mask = Volume((rng.random((11, 20, 20)) < 0.3).astype(float), (2.5, 0.625, 0.625), "mask")
    ri, rm = resample(img, (10, 8, 8)), resample(mask, (10, 8, 8))
    assert ri.extents == rm.extents == (10, 8, 8)
    assert ri.spacing == pytest.approx((2.75, 1.5625, 1.5625))
    assert set(np.unique(rm.data)) <= {0.0, 1.0}
    assert ri.data.min() >= img.data.min() and ri.data.max() <= img.data.max()


def test_resample_identity():
    d = np.random.default_rng(1).random((4, 5, 6))
    assert np.allclose(resample(Volume(d), (4, 5, 6)).data, d, atol=1e-15)


def test_config_from_file(tmp_path):
    path = tmp_path / "pp.cfg"
    path.write_text("# comment\ntiles = 4,4\nclip_limit=3\ncrop = none\nresample = 8x16x16\n")
    cfg = PreprocessConfig.from_file(path)
    assert cfg.clahe == ClaheParams((4, 4), 3.0, 256)
    assert cfg.crop is None and cfg.target == (8, 16, 16)
    path.write_text("tile = 4,4\n")
    with pytest.raises(ValueError, match="unknown"):
        PreprocessConfig.from_file(path)


def test_pipeline_small_keeps_masks_binary():
    rng = np.random.default_rng(3)
    img = Volume(rng.gamma(2, 1, (12, 40, 40)))
    mask = Volume((rng.random((12, 40, 40)) < 0.1).astype(float), kind="mask")
    cfg = PreprocessConfig(ClaheParams((4, 4)), (12, 32, 32), (8, 16, 16))
    pi, pm = preprocess_case(img, mask, cfg)
    assert pi.extents == pm.extents == (8, 16, 16)
    assert set(np.unique(pm.data)) <= {0.0, 1.0}
    assert pi.data.min() >= 0 and pi.data.max() <= 1


def test_pipeline_mask_shape_mismatch():
    with pytest.raises(ValueError, match="mask extents"):
        preprocess_case(Volume(np.random.default_rng(0).random((8, 16, 16))),
                        Volume(np.zeros((8, 16, 15)), kind="mask"),
                        PreprocessConfig(ClaheParams((2, 2)), None, None))


def test_default_constants():
    assert DEFAULT_CROP == (88, 400, 400) and DEFAULT_TARGET == (80, 256, 256)

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wccnet.errors import FormatError, ParameterError, ShapeError
from wccnet.volume import (
    NormStats,
    Unit,
    Volume,
    blend_window,
    decode_volume,
    denormalize,
    encode_volume,
    extract_patches,
    make_grid,
    normalize,
    read_volume,
    stitch_patches,
    write_volume,
)


def test_volume_is_immutable_and_validated():
    v = Volume(np.arange(8.0).reshape(2, 2, 2), Unit.SUV)
    assert v.dims == (2, 2, 2) and v.data.dtype == np.float64
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 5
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ParameterError):
        Volume(np.array([[[np.nan]]]))


def test_volume_copies_its_input():
    src = np.zeros((2, 2, 2))
    v = Volume(src)
    src[0, 0, 0] = 1.0
    assert v.data[0, 0, 0] == 0.0


def test_patch_origin_examples():
    grid, patches = extract_patches(Volume(np.zeros((8, 8, 8))), 8, 0)
    assert grid.origins == ((0, 0, 0),) and len(patches) == 1
    grid = make_grid((12, 12, 12), 8, 4)
    assert len(grid) == 8 and {o[0] for o in grid.origins} == {0, 4}
    grid = make_grid((10, 8, 8), 8, 4)
    assert grid.origins == ((0, 0, 0), (2, 0, 0))


def test_origins_are_lexicographic():
    grid = make_grid((20, 13, 9), (8, 6, 4), (3, 2, 1))
    assert list(grid.origins) == sorted(grid.origins)


def test_patch_errors():
    v = Volume(np.zeros((6, 8, 8)))
    with pytest.raises(ShapeError):
        extract_patches(v, 8)
    with pytest.raises(ShapeError):
        extract_patches(Volume(np.zeros((8, 8, 8))), 4, 4)


def test_equal_weight_blend():
    grid = make_grid((1, 1, 3), (1, 1, 2), (0, 0, 1))
    assert grid.origins == ((0, 0, 0), (0, 0, 1))
    w = blend_window((1, 1, 2))
    assert w[0, 0, 0] == w[0, 0, 1]
    out = stitch_patches(grid, [np.ones((1, 1, 2)), np.full((1, 1, 2), 3.0)])
    assert out.data[0, 0, 1] == pytest.approx(2.0, abs=1e-15)


def test_blend_window_positive():
    w = blend_window((5, 4, 7))
    assert w.min() >= 0.05**3 and w.shape == (5, 4, 7)


def test_stitch_detects_uncovered_voxels():
    grid = make_grid((8, 8, 8), 8)
    with pytest.raises(ShapeError):
        stitch_patches(grid, [np.zeros((8, 8, 8))], out_dims=(9, 8, 8))
    with pytest.raises(ShapeError):
        stitch_patches(grid, [])


@settings(max_examples=60, deadline=None)
@given(dims=st.tuples(*[st.integers(2, 14)] * 3), data=st.data())
def test_extract_stitch_round_trip(dims, data):
    patch = tuple(data.draw(st.integers(1, d)) for d in dims)
    overlap = tuple(data.draw(st.integers(0, p - 1)) for p in patch)
    rng = np.random.default_rng(sum(dims))
    v = Volume(rng.normal(size=dims), Unit.SUV)
    grid, patches = extract_patches(v, patch, overlap)
    assert all(p.dims == patch for p in patches)
    back = stitch_patches(grid, patches)
    assert np.max(np.abs(back.data - v.data)) < 1e-12
    assert back.unit == Unit.SUV


def test_random_12_cube_round_trip():
    v = Volume(np.random.default_rng(0).normal(size=(12, 12, 12)))
    grid, patches = extract_patches(v, 8, 4)
    assert np.max(np.abs(stitch_patches(grid, patches).data - v.data)) < 1e-12


def test_normalize_examples():
    s = NormStats(2.0, 6.0)
    v = Volume(np.array([2.0, 6.0, 4.0, 0.0, 9.0]).reshape(1, 1, 5), Unit.SUV)
    n = normalize(v, s)
    assert n.data.ravel().tolist() == [-1.0, 1.0, 0.0, -1.0, 1.0]
    assert n.meta["clipped_low"] == 1 and n.meta["clipped_high"] == 1
    assert n.unit == Unit.NORMALIZED
    with pytest.raises(ParameterError):
        NormStats(1.0, 1.0)


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    s = NormStats(0.0, 5.0)
    v = Volume(rng.uniform(0, 5, size=(6, 6, 6)), Unit.SUV)
    assert np.max(np.abs(denormalize(normalize(v, s), s).data - v.data)) < 1e-12


def test_norm_stats_from_reference():
    vols = [Volume(np.arange(1000.0).reshape(10, 10, 10))]
    s = NormStats.from_reference(vols)
    assert s.lo == 0.0 and s.hi == pytest.approx(np.percentile(np.arange(1000.0), 99.5))


def test_vxv1_layout_and_round_trip(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4).astype(np.float64)
    v = Volume(data, Unit.NORMALIZED)
    buf = encode_volume(v)
    assert buf[:4] == b"VXV1"
    assert struct.unpack("<3I", buf[4:16]) == (2, 3, 4)
    assert buf[16] == 1
    assert np.frombuffer(buf[17:], "<f4").tolist() == list(range(24))  # width fastest
    path = tmp_path / "v.vxv"
    write_volume(v, path)
    assert read_volume(path) == v
    assert encode_volume(read_volume(path)) == buf


def test_vxv1_errors():
    buf = encode_volume(Volume(np.ones((2, 2, 2))))
    with pytest.raises(FormatError):
        decode_volume(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_volume(buf[:-1])
    with pytest.raises(FormatError):
        decode_volume(buf + b"\0")
    with pytest.raises(FormatError):
        decode_volume(buf[:10])
    with pytest.raises(FormatError):
        decode_volume(struct.pack("<4s3IB", b"VXV1", 2**16, 2**16, 2**16, 0))
    with pytest.raises(FormatError):
        decode_volume(buf[:16] + b"\x09" + buf[17:])
    nan = buf[:17] + np.full(8, np.nan, "<f4").tobytes()
    with pytest.raises(FormatError):
        decode_volume(nan)

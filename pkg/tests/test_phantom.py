import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from wccnet.errors import ParameterError
from wccnet.phantom import (
    Ellipsoid,
    PhantomSpec,
    bias_field,
    generate_phantom,
    random_phantom_spec,
    simulate_low_dose,
)
from wccnet.volume import Volume


def test_empty_spec_is_constant_background():
    vol = generate_phantom(PhantomSpec((6, 5, 4), background=2.5))
    assert vol.dims == (6, 5, 4) and np.all(vol.data == 2.5)


def test_centered_ellipsoid_center_voxel():
    e = Ellipsoid((10.0, 10.0, 10.0), (8.0, 8.0, 8.0), 10.0)
    vol = generate_phantom(PhantomSpec((21, 21, 21), 1.0, (e,), blur_sigma=2.0))
    assert abs(vol.data[10, 10, 10] - 10.0) < 1e-6
    # one voxel off center the first-order distance is (a^2 - 1) / 2
    s = ndtr(31.5 / 2.0)
    assert vol.data[11, 10, 10] == pytest.approx(1.0 * (1 - s) + 10.0 * s, abs=1e-12)
    # boundary voxel sits at the half-way value
    assert vol.data[2, 10, 10] == pytest.approx(5.5, abs=1e-12)


def test_blur_matches_analytic_profile_along_axis():
    e = Ellipsoid((15.0, 15.0, 15.0), (6.0, 6.0, 6.0), 4.0)
    vol = generate_phantom(PhantomSpec((31, 31, 31), 0.0, (e,), blur_sigma=1.5))
    r = np.abs(np.arange(31) - 15.0)
    # for a sphere the first-order distance along an axis is (a^2 - r^2) / (2r)
    with np.errstate(divide="ignore"):
        d = np.where(r > 0, (36.0 - r**2) / (2 * r), np.inf)
    np.testing.assert_allclose(vol.data[:, 15, 15], 4.0 * ndtr(d / 1.5), atol=1e-12)


def test_bias_field_range_and_determinism():
    f = bias_field((8, 9, 10), 0.15, seed=3)
    assert f.min() >= 0.85 - 1e-12 and f.max() <= 1.15 + 1e-12
    assert np.array_equal(f, bias_field((8, 9, 10), 0.15, seed=3))
    assert not np.array_equal(f, bias_field((8, 9, 10), 0.15, seed=4))
    assert np.all(bias_field((3, 3, 3), 0.0, 1) == 1.0)


@pytest.mark.parametrize("bad", [
    PhantomSpec((4, 4, 4), background=-1.0),
    PhantomSpec((4, 4, 4), ellipsoids=(Ellipsoid((2, 2, 2), (1, 1, 1), -0.1),)),
    PhantomSpec((4, 4, 4), ellipsoids=(Ellipsoid((0, 2, 2), (1, 1, 1), 1.0),)),
    PhantomSpec((4, 4, 4), ellipsoids=(Ellipsoid((2, 2, 2), (0, 1, 1), 1.0),)),
    PhantomSpec((4, 4, 4), bias_amplitude=1.0),
    PhantomSpec((4, 4, 4), blur_sigma=0.0),
    PhantomSpec((4, 0, 4)),
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(ParameterError):
        generate_phantom(bad)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_random_specs_are_valid_and_reproducible(seed):
    spec = random_phantom_spec((16, 12, 14), seed)
    spec.validate()
    assert 3 <= len(spec.ellipsoids) <= 6
    assert spec == random_phantom_spec((16, 12, 14), seed)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert np.array_equal(a.data, b.data) and a.data.min() >= 0


def test_high_count_limit():
    vol = generate_phantom(random_phantom_spec((8, 8, 8), 1, uptake_range=(1.0, 6.0)))
    out = simulate_low_dose(vol, 1.0, 1e6, seed=0)
    assert np.max(np.abs(out.data - vol.data) / vol.data) < 0.01


def test_zero_volume_stays_zero():
    z = Volume(np.zeros((4, 4, 4)))
    assert np.all(simulate_low_dose(z, 0.02, 200, seed=5).data == 0)


def test_poisson_moments_over_seeds():
    vol = Volume(np.full((4, 4, 4), 2.0))
    dose, cpu = 1 / 20, 200.0
    draws = np.stack([simulate_low_dose(vol, dose, cpu, seed=s).data for s in range(10_000)])
    n = draws.shape[0]
    sd = np.sqrt(2.0 / (dose * cpu))
    # unbiased: each voxel mean within 4 sigma / sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - 2.0) < 4 * sd / np.sqrt(n))
    var = draws[:, 1, 2, 3].var(ddof=1)
    assert abs(var / sd**2 - 1) < 0.10


def test_noise_increases_as_dose_drops():
    for seed in range(5):
        vol = generate_phantom(random_phantom_spec((16, 16, 16), seed))
        mse = [np.mean((simulate_low_dose(vol, d, 200, seed).data - vol.data) ** 2) for d in (1 / 4, 1 / 20, 1 / 50)]
        assert mse[0] < mse[1] < mse[2]


def test_gaussian_model_and_errors():
    vol = Volume(np.full((6, 6, 6), 3.0))
    g = simulate_low_dose(vol, 0.05, 200, seed=1, model="gaussian")
    assert g.data.dtype == np.float64 and not np.array_equal(g.data, vol.data)
    assert np.array_equal(g.data, simulate_low_dose(vol, 0.05, 200, seed=1, model="gaussian").data)
    for kw in ({"dose_fraction": 0.0}, {"dose_fraction": 1.5}, {"counts_per_unit": 0.0}, {"model": "rician"}):
        args = {"dose_fraction": 0.05, "counts_per_unit": 200, "seed": 0, **kw}
        with pytest.raises(ParameterError):
            simulate_low_dose(vol, **args)
    with pytest.raises(ParameterError):
        simulate_low_dose(Volume(-np.ones((2, 2, 2))), 0.05, 200, 0)

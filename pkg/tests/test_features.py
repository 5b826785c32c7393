import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dav_at, level_stats_at, psi_at, rad_at
from tcorb.features import (DEFAULT_CONFIG, FeatureConfig, FeatureError, StormCenter, bulk_morphology,
                            dav, deviation_angles, find_center, fold_angle, level_set,
                            orb_functions, radial_profile, read_orb_csv, temperature_grid,
                            write_orb_csv)
from tcorb.stamps import Stamp, pixel_offsets
from tcorb.synth import SceneSpec, make_stamp, random_spec


def field_stamp(fn, lat=0.0, step=0.1, n=30, mask=None):
    tmp = Stamp("T", "2001-01-01T00:00:00Z", lat, 0.0, step, n, np.zeros((2 * n + 1,) * 2),
                np.zeros((2 * n + 1,) * 2, bool))
    x, y = pixel_offsets(tmp)
    tb = np.clip(fn(x, y), -110, 60)
    return Stamp("T", tmp.time, lat, 0.0, step, n, tb,
                 np.zeros(tb.shape, bool) if mask is None else mask)


# -- deviation angles & DAV ------------------------------------------------------

def test_fold_angle_range():
    d = np.array([-270.0, -90.0, -45.0, 0.0, 90.0, 135.0, 180.0, 270.0])
    f = fold_angle(d)
    assert np.all((f > -90) & (f <= 90))
    assert np.allclose(f, [90, 90, -45, 0, 90, -45, 0, 90])


def test_paraboloid_has_zero_deviation():
    s = field_stamp(lambda x, y: -100 + (x * x + y * y) / 8000.0, n=40)
    psi = deviation_angles(s)
    ok = np.isfinite(psi)
    # one-sided edge differences tilt the gradient; the interior is exact
    assert np.abs(psi[1:-1, 1:-1][ok[1:-1, 1:-1]]).max() < 1e-9
    assert dav(s).values.max() < 1e-12


def test_uniform_field_has_no_defined_angle():
    s = field_stamp(lambda x, y: np.full(x.shape, -60.0))
    assert np.isnan(deviation_angles(s)).all()
    with pytest.raises(FeatureError):
        dav(s)


def test_plane_north_of_center_is_ninety():
    s = field_stamp(lambda x, y: x / 100.0)
    n = s.half_width
    assert deviation_angles(s)[n - 5, n] == pytest.approx(90.0)
    assert deviation_angles(s)[n, n + 5] == pytest.approx(0.0)


def test_white_noise_dav_near_uniform_variance():
    rng = np.random.default_rng(1)
    s = field_stamp(lambda x, y: rng.uniform(-80, 0, x.shape), step=0.04, n=100)
    # variance of a uniform on a 180-degree interval
    assert dav(s).values[-1] == pytest.approx(180.0 ** 2 / 12, rel=0.05)


def test_dav_radius_grid_pins():
    s = make_stamp(SceneSpec("axisym_cdo", grid_step=0.1, half_width=45), with_truth=False)
    f = dav(s)
    assert f.thresholds[0] == 50.0 and f.thresholds[-1] == 400.0
    assert np.allclose(np.diff(f.thresholds), s.dy_km, rtol=0.05)


def test_dav_brute_force_on_random_stamps():
    rng = np.random.default_rng(7)
    for _ in range(4):
        s = make_stamp(random_spec(rng, half_width=14, grid_step=0.1), with_truth=False)
        f = dav(s)
        for i in rng.choice(f.thresholds.size, 3, replace=False):
            assert f.values[i] == pytest.approx(dav_at(s, f.thresholds[i]), rel=1e-9, abs=1e-9)


def test_deviation_angles_match_loop():
    rng = np.random.default_rng(2)
    s = make_stamp(random_spec(rng, half_width=6, grid_step=0.3), with_truth=False)
    psi = deviation_angles(s)
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            o = psi_at(s, i, j)
            assert (o is None and np.isnan(psi[i, j])) or psi[i, j] == pytest.approx(o, abs=1e-9)


def test_rotation_invariance_at_equator():
    s = make_stamp(SceneSpec("offset_blob", {"offset_km": 60, "noise_sd": 2}, center_lat=0,
                             grid_step=0.1, half_width=45), with_truth=False)
    r = s.with_tb(np.rot90(s.tb))
    assert np.allclose(dav(s).values, dav(r).values, atol=1e-9)
    assert np.allclose(radial_profile(s).values, radial_profile(r).values, atol=1e-9)


# -- centering ---------------------------------------------------------------

def warm_disk(dx_km=0.0, lat=15.0, n=40, step=0.04, radius=20.0):
    return field_stamp(lambda x, y: np.where(np.hypot(x - dx_km, y) <= radius, 0.0, -70.0),
                       lat=lat, step=step, n=n)


def test_find_center_offset_disk():
    s = warm_disk(30.0)
    c = find_center(s)
    assert c.source == "eye_detected"
    x, y = pixel_offsets(s)
    assert x[int(c.row), int(c.col)] == pytest.approx(30.0, abs=s.dx_km)
    assert y[int(c.row), int(c.col)] == pytest.approx(0.0, abs=s.dy_km)


def test_find_center_centered_disk_and_uniform():
    c = find_center(warm_disk(0.0))
    assert (c.row, c.col, c.source) == (40, 40, "eye_detected")
    u = field_stamp(lambda x, y: np.full(x.shape, -60.0), step=0.04, n=40)
    assert find_center(u).source == "best_track"


# -- radial profile ------------------------------------------------------------

def test_radial_profile_uniform_and_ramp():
    u = field_stamp(lambda x, y: np.full(x.shape, -60.0), step=0.1, n=60)
    assert np.allclose(radial_profile(u).values, -60.0)
    s = field_stamp(lambda x, y: -np.hypot(x, y) / 10.0, step=0.1, n=60)
    f = radial_profile(s)
    dr = f.thresholds[1] - f.thresholds[0]
    # T = -|s|/10 so the annulus mean is -(r + dr/2)/10 up to one pixel
    err = np.abs(f.values - (-(f.thresholds + dr / 2) / 10.0))
    assert err[f.thresholds <= 600 - dr].max() <= s.dy_km / 10.0


def test_radial_profile_matches_loop():
    rng = np.random.default_rng(5)
    s = make_stamp(random_spec(rng, half_width=25, grid_step=0.3), with_truth=False)
    f = radial_profile(s)
    step = f.thresholds[1] - f.thresholds[0]
    for i in rng.choice(np.flatnonzero(f.defined), 5, replace=False):
        assert f.values[i] == pytest.approx(rad_at(s, f.thresholds[i], step), abs=1e-9)


def test_eye_centered_profile_is_warmer_at_origin():
    s = warm_disk(40.0, n=60, step=0.1, radius=30.0)
    assert find_center(s).source == "eye_detected"
    eye = radial_profile(s, find_center(s))
    grid = radial_profile(s)
    assert eye.values[0] > grid.values[0]


def test_radial_profile_too_many_empty_annuli():
    s = field_stamp(lambda x, y: np.full(x.shape, -60.0), step=0.1, n=10)
    with pytest.raises(FeatureError):
        radial_profile(s)


# -- level sets ----------------------------------------------------------------

def half_cold(lat=0.0, n=30):
    return field_stamp(lambda x, y: np.where(x < 0, -30.0, 0.0), lat=lat, n=n)


def test_level_set_basics():
    s = half_cold()
    assert not level_set(s, -31).any()
    assert level_set(s, 1).all()
    x, _ = pixel_offsets(s)
    assert np.array_equal(level_set(s, -20), x < 0)


def test_half_cold_size_and_direction():
    s = half_cold()
    f = bulk_morphology(s)
    n = s.shape[0]
    i = int(np.searchsorted(f["SIZE"].thresholds, -20))
    assert f["SIZE"].values[i] == pytest.approx(n * (n // 2) * s.pixel_area_km2)
    assert f["SKEW"].skew_direction[i] == pytest.approx(1.5 * math.pi)


def test_centered_disk_is_symmetric():
    s = field_stamp(lambda x, y: np.where(np.hypot(x, y) <= 300.0, -70.0, 10.0), lat=0.0, n=45)
    f = bulk_morphology(s)
    i = int(np.searchsorted(f["SIZE"].thresholds, -50))
    assert f["SKEW"].values[i] <= 0.02
    assert f["ECC"].values[i] <= 0.02


def test_undefined_entries_are_flagged_and_filled():
    s = make_stamp(SceneSpec("axisym_cdo", grid_step=0.1, half_width=30), with_truth=False)
    f = bulk_morphology(s)["SKEW"]
    assert not f.defined[0]          # -90 C: colder than any pixel
    assert np.isfinite(f.values).all()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_level_stats_match_loop(seed):
    rng = np.random.default_rng(seed)
    s = make_stamp(random_spec(rng, half_width=8, grid_step=0.3), with_truth=False)
    f = bulk_morphology(s)
    for c in rng.choice(temperature_grid(), 4, replace=False):
        i = int(np.searchsorted(f["SIZE"].thresholds, c))
        size, skew, direc, shape, ecc = level_stats_at(s, c)
        assert f["SIZE"].values[i] == pytest.approx(size, rel=1e-12)
        for name, o in (("SKEW", skew), ("SHAPE", shape), ("ECC", ecc)):
            assert f[name].defined[i] == (o is not None)
            if o is not None:
                assert f[name].values[i] == pytest.approx(o, rel=1e-9, abs=1e-9)
        if direc is not None and skew > 1e-9:
            d = f["SKEW"].skew_direction[i] - direc
            assert abs(math.remainder(d, 2 * math.pi)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_size_monotone(seed):
    rng = np.random.default_rng(seed)
    s = make_stamp(random_spec(rng, half_width=12), with_truth=False)
    assert np.all(np.diff(bulk_morphology(s)["SIZE"].values) >= 0)


@pytest.mark.parametrize("delta", [-7, 3, 12])
def test_constant_offset(delta):
    rng = np.random.default_rng(abs(delta))
    spec = random_spec(rng, half_width=45, grid_step=0.1)
    s = make_stamp(spec, with_truth=False)
    tb = np.clip(s.tb, -100 + abs(delta), 50 - abs(delta))
    s = s.with_tb(tb)
    t = s.with_tb(tb + delta)
    a, b = orb_functions(s, StormCenter(45, 45)), orb_functions(t, StormCenter(45, 45))
    assert np.allclose(b["RAD"].values, a["RAD"].values + delta, rtol=0, atol=1e-10)
    assert np.allclose(b["DAV"].values, a["DAV"].values, rtol=1e-10, atol=1e-10)
    cs = a["SIZE"].thresholds
    for name in ("SIZE", "SKEW", "SHAPE", "ECC"):
        shifted = np.interp(cs - delta, cs, a[name].values)
        inside = (cs - delta >= cs[0]) & (cs - delta <= cs[-1])
        assert np.allclose(b[name].values[inside], shifted[inside], rtol=1e-10, atol=1e-10)


def test_orb_csv_roundtrip(tmp_path):
    s = make_stamp(SceneSpec("offset_blob", {"offset_km": 80}, grid_step=0.1, half_width=40),
                   with_truth=False)
    for name, fn in orb_functions(s).items():
        back = read_orb_csv(write_orb_csv(fn, tmp_path / f"{name}.csv"), name)
        assert np.array_equal(back.values, fn.values)
        assert np.array_equal(back.defined, fn.defined)
        if fn.skew_direction is not None:
            assert np.allclose(back.skew_direction, fn.skew_direction, equal_nan=True)


def test_config_ranges_are_configurable():
    cfg = FeatureConfig(c_min=-80, c_max=0, c_step=2)
    assert temperature_grid(cfg)[[0, -1]].tolist() == [-80, 0]
    assert temperature_grid(DEFAULT_CONFIG).size == 121

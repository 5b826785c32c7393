import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcorb.stamps import (HeaderError, SampleFilter, ShapeError, Stamp, TemperatureRangeError,
                          TrackError, TrackPoint, apply_filter, interpolate_track, pixel_geometry,
                          read_stamp, read_track_csv, stamp_filename, stamp_from_bytes,
                          stamp_to_bytes, write_stamp, write_track_csv)

T0 = datetime(2005, 8, 1, tzinfo=timezone.utc)


def make(tb, mask=None, lat=15.0, step=0.04, time=T0, sid="AL012005"):
    tb = np.asarray(tb, float)
    n = (tb.shape[0] - 1) // 2
    return Stamp(sid, time, lat, -50.0, step, n, tb,
                 np.zeros(tb.shape, bool) if mask is None else mask)


def test_minimal_stamp_roundtrip(tmp_path):
    s = make(np.full((3, 3), -50.0))
    p = write_stamp(s, tmp_path / "a.stamp")
    back = read_stamp(p)
    assert back.half_width == 1
    assert back.missing_fraction == 0
    assert np.array_equal(back.tb, s.tb)
    assert back.time == T0


def test_missing_fraction_from_mask():
    # odd grids cannot hold exactly 10%; 12 of 121 pixels is the nearest
    rng = np.random.default_rng(0)
    m = np.zeros((11, 11), bool)
    m.flat[rng.choice(121, 12, replace=False)] = True
    s = stamp_from_bytes(stamp_to_bytes(make(np.zeros((11, 11)), m)))
    assert s.missing_fraction == pytest.approx(12 / 121)
    assert np.isnan(s.tb[m]).all()


def test_out_of_range_temperature():
    tb = np.full((3, 3), -50.0)
    tb[1, 1] = 200.0
    with pytest.raises(TemperatureRangeError) as e:
        make(tb)
    assert e.value.field == "tb"


def test_masked_pixels_may_hold_garbage():
    tb = np.full((3, 3), -50.0)
    tb[0, 0] = 999.0
    m = np.zeros((3, 3), bool)
    m[0, 0] = True
    assert make(tb, m).missing_fraction == pytest.approx(1 / 9)


def test_header_errors_name_field():
    raw = stamp_to_bytes(make(np.full((3, 3), -50.0)))
    nl = raw.index(b"\n")
    hdr = json.loads(raw[:nl])

    def rebuild(h):
        body = raw[nl + 1:]
        for _ in range(3):
            line = json.dumps(h, sort_keys=True, separators=(",", ":")).encode() + b"\n"
            h["data_offset"] = len(line)
        return line + body

    with pytest.raises(HeaderError) as e:
        stamp_from_bytes(b"not json\n" + raw[nl + 1:])
    assert e.value.field == "header"
    bad = dict(hdr)
    del bad["grid_step"]
    with pytest.raises(HeaderError) as e:
        stamp_from_bytes(rebuild(bad))
    assert e.value.field == "grid_step"
    bad = dict(hdr, half_width=2)
    with pytest.raises(ShapeError):
        stamp_from_bytes(rebuild(bad))
    with pytest.raises(ShapeError):
        stamp_from_bytes(raw[:-1])
    with pytest.raises(HeaderError) as e:
        stamp_from_bytes(rebuild(dict(hdr, format="other")))
    assert e.value.field == "format"


def test_header_offset_is_self_consistent():
    raw = stamp_to_bytes(make(np.full((5, 5), -10.0)))
    nl = raw.index(b"\n")
    assert json.loads(raw[:nl])["data_offset"] == nl + 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(-80, 80), st.integers(0, 2**32 - 1))
def test_bytes_roundtrip_is_identical(n, lat, seed):
    rng = np.random.default_rng(seed)
    tb = rng.uniform(-100, 50, (2 * n + 1, 2 * n + 1)).astype(np.float32).astype(float)
    mask = rng.random(tb.shape) < 0.2
    raw = stamp_to_bytes(make(tb, mask, lat=lat))
    assert stamp_to_bytes(stamp_from_bytes(raw)) == raw


def test_stamp_is_read_only():
    s = make(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        s.tb[0, 0] = 1.0


def test_filename():
    assert stamp_filename("AL012005", T0 + timedelta(hours=6)) == "AL012005_2005080106.stamp"


# -- geometry ----------------------------------------------------------------

def test_geometry_center_and_steps():
    s = make(np.zeros((5, 5)), lat=0.0)
    d, az, area = pixel_geometry(s)
    assert d[2, 2] == 0
    assert d[2, 3] == pytest.approx(4.4528)
    assert az[1, 2] == pytest.approx(0.0)          # north
    assert az[2, 3] == pytest.approx(np.pi / 2)    # east
    assert az[3, 2] == pytest.approx(np.pi)        # south
    assert area[0, 0] == pytest.approx(4.4528 ** 2)
    s60 = make(np.zeros((5, 5)), lat=60.0)
    assert pixel_geometry(s60)[0][2, 3] == pytest.approx(0.5 * d[2, 3])


def test_geometry_reflection_symmetry():
    s = make(np.zeros((9, 9)), lat=33.0)
    d = pixel_geometry(s)[0]
    assert np.allclose(d, d[::-1, :]) and np.allclose(d, d[:, ::-1])


def test_geometry_rejects_pole():
    with pytest.raises(ValueError):
        pixel_geometry(make(np.zeros((3, 3)), lat=86.0))


# -- tracks ------------------------------------------------------------------

def pt(h, v=60.0, lat=20.0, lon=-50.0, land=1000.0, sid="AL012005"):
    return TrackPoint(sid, T0 + timedelta(hours=h), lat, lon, v, land, "NAL")


def test_interpolation_examples():
    out = interpolate_track([pt(0, 50, lat=20), pt(6, 56, lat=21)])
    assert len(out) == 7
    assert out[5].intensity == pytest.approx(55.0)
    assert out[3].lat == pytest.approx(20.5)
    assert out[0] == pt(0, 50, lat=20) and out[-1] == pt(6, 56, lat=21)


def test_interpolation_rejects_antimeridian_and_disorder():
    with pytest.raises(TrackError):
        interpolate_track([pt(0, lon=179.5), pt(6, lon=-179.5)])
    with pytest.raises(TrackError):
        interpolate_track([pt(6), pt(0)])


def test_track_csv_roundtrip(tmp_path):
    pts = [pt(0), pt(6, 65.5, land=12.25)]
    assert read_track_csv(write_track_csv(pts, tmp_path / "t.csv")) == pts


def test_trackpoint_validation():
    with pytest.raises(TrackError):
        pt(0, v=-1)
    with pytest.raises(TrackError):
        TrackPoint("X", T0, 0, 0, 50, 100, "WPAC")


def _stamps_for(track, missing=0.0):
    out = []
    for p in track:
        m = np.zeros((5, 5), bool)
        m.flat[: int(round(missing * 25))] = True
        out.append(Stamp(p.storm_id, p.time, p.lat, p.lon, 0.04, 2, np.zeros((5, 5)), m))
    return out


def test_filter_single_gates():
    track = [pt(h) for h in range(0, 49, 6)]
    stamps = _stamps_for(track)
    kept = {p.time for p, _ in apply_filter(track, stamps)}
    # needs 24 h history: hours 24..48 qualify, and the window may run past the track end
    assert kept == {T0 + timedelta(hours=h) for h in (24, 30, 36, 42, 48)}
    near = [pt(h, land=200.0 if h == 36 else 1000.0) for h in range(0, 49, 6)]
    kept = {p.time for p, _ in apply_filter(near, stamps)}
    assert kept == {T0 + timedelta(hours=h) for h in (42, 48)}
    weak = [pt(h, v=49.0 if h == 30 else 60.0) for h in range(0, 49, 6)]
    assert T0 + timedelta(hours=30) not in {p.time for p, _ in apply_filter(weak, stamps)}
    assert apply_filter(track, _stamps_for(track, missing=0.08)) == []
    two_pct = _stamps_for(track, missing=0.04)
    assert len(apply_filter([pt(h, v=50.0) for h in range(0, 49, 6)], two_pct)) == 5


def test_filter_monotone_under_tightening():
    rng = np.random.default_rng(3)
    track = [pt(h, v=float(rng.uniform(40, 90)), land=float(rng.uniform(100, 600)))
             for h in range(0, 120, 6)]
    stamps = _stamps_for(track, missing=0.0)
    loose = {p.time for p, _ in apply_filter(track, stamps, SampleFilter(40, 150, 0.05))}
    for f in (SampleFilter(60, 150, 0.05), SampleFilter(40, 300, 0.05), SampleFilter(40, 150, 0.01)):
        assert {p.time for p, _ in apply_filter(track, stamps, f)} <= loose

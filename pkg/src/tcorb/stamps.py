"""Stamp and track data model, on-disk formats and sample filtering.

A stamp file is a single UTF-8 JSON header line followed by the raw
payload::

    {"center_lat":..., "data_offset": 231, ...}\\n
    <(2N+1)^2 little-endian float32 brightness temperatures, row-major>
    <packed mask bits, row-major, 1 = missing>

Rows run north to south, columns west to east, and the storm center sits
at pixel (N, N).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_NAME = "tcorb-stamp"
FORMAT_VERSION = 1

KM_PER_DEG = 111.32
TB_MIN, TB_MAX = -110.0, 60.0
BASINS = ("NAL", "ENP")
TRACK_COLUMNS = ("storm_id", "time", "lat", "lon", "intensity_kt",
                 "dist_to_land_km", "basin")


class StampFormatError(ValueError):
    """Malformed stamp file; ``field`` names the offending item."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class HeaderError(StampFormatError):
    pass


class ShapeError(StampFormatError):
    pass


class TemperatureRangeError(StampFormatError):
    pass


class TrackError(ValueError):
    pass


def parse_time(value) -> datetime:
    """Parse an ISO-8601 string (or datetime) into an aware UTC datetime."""
    if isinstance(value, datetime):
        t = value
    else:
        s = str(value).strip()
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        t = datetime.fromisoformat(s)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_time(t: datetime) -> str:
    return parse_time(t).strftime("%Y-%m-%dT%H:%M:%SZ")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Stamp:
    """One storm-centered brightness-temperature raster (degrees C)."""

    storm_id: str
    time: datetime
    center_lat: float
    center_lon: float
    grid_step: float
    half_width: int
    tb: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = 2 * int(self.half_width) + 1
        if self.half_width < 1:
            raise ShapeError("half_width", "must be >= 1")
        if not self.grid_step > 0:
            raise HeaderError("grid_step", "must be positive")
        tb = np.asarray(self.tb, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if tb.shape != (n, n):
            raise ShapeError("tb", f"expected shape {(n, n)}, got {tb.shape}")
        if mask.shape != (n, n):
            raise ShapeError("mask", f"expected shape {(n, n)}, got {mask.shape}")
        valid = tb[~mask]
        if not np.all(np.isfinite(valid)):
            raise TemperatureRangeError("tb", "non-finite value at an unmasked pixel")
        if valid.size and (valid.min() < TB_MIN or valid.max() > TB_MAX):
            raise TemperatureRangeError(
                "tb", f"value outside [{TB_MIN}, {TB_MAX}] C "
                f"(min {valid.min():.2f}, max {valid.max():.2f})")
        tb = tb.copy()
        tb[mask] = np.nan
        object.__setattr__(self, "tb", _freeze(tb))
        object.__setattr__(self, "mask", _freeze(mask))
        object.__setattr__(self, "time", parse_time(self.time))
        object.__setattr__(self, "half_width", int(self.half_width))

    @property
    def shape(self) -> tuple[int, int]:
        return self.tb.shape

    @property
    def missing_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def dx_km(self) -> float:
        """East-west pixel spacing at the stamp center latitude."""
        return KM_PER_DEG * self.grid_step * math.cos(math.radians(self.center_lat))

    @property
    def dy_km(self) -> float:
        return KM_PER_DEG * self.grid_step

    @property
    def pixel_area_km2(self) -> float:
        return self.dx_km * self.dy_km

    def with_tb(self, tb: np.ndarray, mask: np.ndarray | None = None) -> "Stamp":
        return Stamp(self.storm_id, self.time, self.center_lat, self.center_lon,
                     self.grid_step, self.half_width, tb,
                     self.mask if mask is None else mask)


# -- binary format -----------------------------------------------------------

def _header_bytes(stamp: Stamp) -> bytes:
    fields = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "storm_id": stamp.storm_id,
        "time": format_time(stamp.time),
        "center_lat": float(stamp.center_lat),
        "center_lon": float(stamp.center_lon),
        "grid_step": float(stamp.grid_step),
        "half_width": stamp.half_width,
        "data_offset": 0,
    }
    # data_offset counts its own digits; iterate to the fixed point
    offset = 0
    while True:
        fields["data_offset"] = offset
        raw = (json.dumps(fields, sort_keys=True, separators=(",", ":")) + "\n").encode()
        if len(raw) == offset:
            return raw
        offset = len(raw)


def stamp_to_bytes(stamp: Stamp) -> bytes:
    tb = np.where(stamp.mask, np.float32(np.nan), stamp.tb).astype("<f4")
    bits = np.packbits(stamp.mask.astype(np.uint8).ravel())
    return _header_bytes(stamp) + tb.tobytes(order="C") + bits.tobytes()


def write_stamp(stamp: Stamp, path) -> Path:
    path = Path(path)
    path.write_bytes(stamp_to_bytes(stamp))
    return path


def stamp_from_bytes(raw: bytes) -> Stamp:
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeaderError("header", "missing newline-terminated JSON header")
    try:
        hdr = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError("header", f"not valid JSON ({exc})") from None
    if not isinstance(hdr, dict):
        raise HeaderError("header", "expected a JSON object")
    if hdr.get("format") != FORMAT_NAME:
        raise HeaderError("format", f"expected {FORMAT_NAME!r}, got {hdr.get('format')!r}")
    if hdr.get("version") != FORMAT_VERSION:
        raise HeaderError("version", f"unsupported version {hdr.get('version')!r}")
    for key, typ in (("storm_id", str), ("time", str), ("center_lat", (int, float)),
                     ("center_lon", (int, float)), ("grid_step", (int, float)),
                     ("half_width", int), ("data_offset", int)):
        if key not in hdr:
            raise HeaderError(key, "missing")
        if not isinstance(hdr[key], typ) or isinstance(hdr[key], bool):
            raise HeaderError(key, f"wrong type {type(hdr[key]).__name__}")
    try:
        time = parse_time(hdr["time"])
    except ValueError:
        raise HeaderError("time", f"not ISO-8601: {hdr['time']!r}") from None
    if hdr["data_offset"] != nl + 1:
        raise HeaderError("data_offset", f"header ends at {nl + 1}, offset says {hdr['data_offset']}")
    n = 2 * hdr["half_width"] + 1
    if hdr["half_width"] < 1:
        raise ShapeError("half_width", "must be >= 1")
    n_tb = 4 * n * n
    n_mask = (n * n + 7) // 8
    body = raw[nl + 1:]
    if len(body) != n_tb + n_mask:
        raise ShapeError("payload", f"expected {n_tb + n_mask} bytes for a {n}x{n} grid, got {len(body)}")
    tb = np.frombuffer(body[:n_tb], dtype="<f4").reshape(n, n).astype(np.float64)
    mask = np.unpackbits(np.frombuffer(body[n_tb:], dtype=np.uint8))[: n * n]
    mask = mask.reshape(n, n).astype(bool)
    return Stamp(hdr["storm_id"], time, float(hdr["center_lat"]), float(hdr["center_lon"]),
                 float(hdr["grid_step"]), hdr["half_width"], tb, mask)


def read_stamp(path) -> Stamp:
    return stamp_from_bytes(Path(path).read_bytes())


def stamp_filename(storm_id: str, time: datetime) -> str:
    return f"{storm_id}_{parse_time(time):%Y%m%d%H}.stamp"


# -- geometry ----------------------------------------------------------------

def pixel_offsets(stamp: Stamp, row: float | None = None, col: float | None = None):
    """East (x) and north (y) offsets in km of every pixel from (row, col).

    Defaults to the center pixel (N, N).
    """
    if abs(stamp.center_lat) >= 85.0:
        raise ValueError(f"center_lat {stamp.center_lat} too close to the pole for "
                         "the equirectangular approximation")
    n = stamp.half_width
    row = n if row is None else row
    col = n if col is None else col
    rr, cc = np.indices(stamp.shape, dtype=np.float64)
    x = (cc - col) * stamp.dx_km
    y = (row - rr) * stamp.dy_km
    return x, y


def pixel_geometry(stamp: Stamp):
    """Per-pixel distance (km), azimuth (rad) and area (km^2).

    Azimuth is measured clockwise from north in [0, 2*pi); the center pixel
    has distance 0 and azimuth 0.
    """
    x, y = pixel_offsets(stamp)
    dist = np.hypot(x, y)
    az = np.mod(np.arctan2(x, y), 2 * np.pi)
    area = np.full(stamp.shape, stamp.pixel_area_km2)
    return dist, az, area


# -- tracks ------------------------------------------------------------------

@dataclass(frozen=True)
class TrackPoint:
    storm_id: str
    time: datetime
    lat: float
    lon: float
    intensity: float
    dist_to_land: float
    basin: str

    def __post_init__(self):
        object.__setattr__(self, "time", parse_time(self.time))
        if self.intensity < 0:
            raise TrackError(f"{self.storm_id} {self.time}: negative intensity")
        if self.basin not in BASINS:
            raise TrackError(f"{self.storm_id}: unknown basin {self.basin!r}")


@dataclass(frozen=True)
class SampleFilter:
    min_intensity: float = 50.0
    min_land_dist: float = 250.0
    max_missing_frac: float = 0.05
    rapid_threshold: float = 25.0

    def __post_init__(self):
        for name in ("min_intensity", "min_land_dist", "max_missing_frac", "rapid_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SampleFilter.{name} must be positive")
        if not self.max_missing_frac < 1:
            raise ValueError("SampleFilter.max_missing_frac must be < 1")


def read_track_csv(path) -> list[TrackPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TRACK_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise TrackError(f"{path}: missing columns {missing}")
        return [TrackPoint(r["storm_id"], parse_time(r["time"]), float(r["lat"]),
                           float(r["lon"]), float(r["intensity_kt"]),
                           float(r["dist_to_land_km"]), r["basin"]) for r in reader]


def write_track_csv(points: Iterable[TrackPoint], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for p in points:
            w.writerow([p.storm_id, format_time(p.time), repr(float(p.lat)), repr(float(p.lon)),
                        repr(float(p.intensity)), repr(float(p.dist_to_land)), p.basin])
    return path


def group_tracks(points: Iterable[TrackPoint]) -> dict[str, list[TrackPoint]]:
    """Split points by storm, each list sorted by time."""
    out: dict[str, list[TrackPoint]] = {}
    for p in points:
        out.setdefault(p.storm_id, []).append(p)
    for sid in out:
        out[sid].sort(key=lambda p: p.time)
    return out


def interpolate_track(points: Sequence[TrackPoint]) -> list[TrackPoint]:
    """Linearly interpolate one storm's track to every whole hour.

    Latitude, longitude, intensity and land distance are interpolated;
    original points are reproduced exactly. Tracks that cross the
    antimeridian are rejected.
    """
    if len(points) < 2:
        raise TrackError("interpolation needs at least two track points")
    ids = {p.storm_id for p in points}
    if len(ids) != 1:
        raise TrackError(f"points from several storms: {sorted(ids)}")
    for a, b in zip(points, points[1:]):
        if b.time <= a.time:
            raise TrackError(f"{a.storm_id}: times not strictly increasing at {b.time}")
        if abs(b.lon - a.lon) > 180:
            raise TrackError(f"{a.storm_id}: track wraps across the antimeridian")
    out: list[TrackPoint] = []
    hour = timedelta(hours=1)
    for a, b in zip(points, points[1:]):
        span = (b.time - a.time).total_seconds()
        t = a.time.replace(minute=0, second=0, microsecond=0)
        if t < a.time:
            t += hour
        while t < b.time:
            if t == a.time:
                out.append(a)
            else:
                w = (t - a.time).total_seconds() / span
                out.append(TrackPoint(
                    a.storm_id, t,
                    a.lat + w * (b.lat - a.lat),
                    a.lon + w * (b.lon - a.lon),
                    a.intensity + w * (b.intensity - a.intensity),
                    a.dist_to_land + w * (b.dist_to_land - a.dist_to_land),
                    a.basin))
            t += hour
    out.append(points[-1])
    return out


def apply_filter(track: Sequence[TrackPoint], stamps: Sequence[Stamp],
                 f: SampleFilter = SampleFilter()) -> list[tuple[TrackPoint, Stamp]]:
    """Keep 6-hourly points that pass the intensity, land and missing-data gates.

    A point survives when it is on a 6-hour synoptic time, its intensity is
    at least ``f.min_intensity``, the storm has a track point 24 h earlier,
    every track point in ``[t, t + 24 h]`` is at least ``f.min_land_dist``
    from land, and its stamp exists with missing fraction below
    ``f.max_missing_frac``.
    """
    by_key = {(s.storm_id, s.time): s for s in stamps}
    kept = []
    day = timedelta(hours=24)
    for sid, pts in group_tracks(track).items():
        times = {p.time for p in pts}
        for p in pts:
            if p.time.hour % 6 or p.time.minute or p.time.second:
                continue
            if p.intensity < f.min_intensity:
                continue
            if p.time - day not in times:
                continue
            window = [q for q in pts if p.time <= q.time <= p.time + day]
            if any(q.dist_to_land < f.min_land_dist for q in window):
                continue
            stamp = by_key.get((sid, p.time))
            if stamp is None or not stamp.missing_fraction < f.max_missing_frac:
                continue
            kept.append((p, stamp))
    return kept

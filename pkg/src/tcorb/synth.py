"""Synthetic stamps, tracks and predictor tables with known ground truth.

Scenes are geometric: radial profiles, offset blobs, half planes and
ramps rasterized at pixel centers. Every stamp comes with a
:class:`SynthTruth` computed from the continuous scene.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .stamps import KM_PER_DEG, TB_MAX, TB_MIN, Stamp, TrackPoint

SCENES = ("uniform", "axisym_cdo", "eye_eyewall", "offset_blob", "half_cold", "ramp")

DEFAULT_PARAMS = MappingProxyType({
    "t_env": 20.0,           # clear-sky background, C
    "t_cdo": -70.0,          # CDO plateau, C
    "cdo_radius": 200.0,     # km where the CDO is half-way to background
    "cdo_sharpness": 4.0,    # exponent of the rational CDO edge
    "eye_radius": 20.0,      # km
    "t_eye": 0.0,            # C
    "t_eyewall": -80.0,      # C
    "offset_km": 0.0,
    "offset_az": 270.0,      # degrees clockwise from north
    "t_cold": -30.0,
    "t_warm": 0.0,
    "cold_az": 270.0,
    "ramp_slope": 0.1,       # C/km
    "ramp_az": 90.0,
    "t_uniform": -60.0,
    "noise_sd": 0.0,
    "missing_frac": 0.0,
    "diurnal_amp": 0.0,      # fractional CDO-radius pulsation
    "diurnal_phase": 0.0,    # hour of maximum radius minus 6
})

_BOUNDS = {
    "t_env": (TB_MIN, TB_MAX), "t_cdo": (TB_MIN, TB_MAX), "t_eye": (TB_MIN, TB_MAX),
    "t_eyewall": (TB_MIN, TB_MAX), "t_cold": (TB_MIN, TB_MAX), "t_warm": (TB_MIN, TB_MAX),
    "t_uniform": (TB_MIN, TB_MAX), "cdo_radius": (1.0, 2000.0), "cdo_sharpness": (1.0, 32.0),
    "eye_radius": (1.0, 200.0), "offset_km": (0.0, 1000.0), "noise_sd": (0.0, 30.0),
    "missing_frac": (0.0, 0.99), "diurnal_amp": (0.0, 0.9), "ramp_slope": (-1.0, 1.0),
}

EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    scene: str
    params: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0
    storm_id: str = "SYN01"
    time: datetime = EPOCH
    center_lat: float = 15.0
    center_lon: float = -50.0
    grid_step: float = 0.04
    half_width: int = 180

    def __post_init__(self):
        if self.scene not in SCENES:
            raise SceneError(f"unknown scene {self.scene!r}")
        unknown = set(self.params) - set(DEFAULT_PARAMS)
        if unknown:
            raise SceneError(f"unknown scene parameters {sorted(unknown)}")
        merged = dict(DEFAULT_PARAMS)
        merged.update({k: float(v) for k, v in self.params.items()})
        for k, (lo, hi) in _BOUNDS.items():
            if not lo <= merged[k] <= hi:
                raise SceneError(f"{k}={merged[k]} outside [{lo}, {hi}]")
        object.__setattr__(self, "params", MappingProxyType(merged))

    def p(self, name: str) -> float:
        return self.params[name]

    @property
    def hour(self) -> float:
        return (self.time - EPOCH).total_seconds() / 3600.0


@dataclass(frozen=True)
class SynthTruth:
    """Analytic values of the continuous scene.

    ``profile`` is T(r) on ``radii`` for axisymmetric scenes (None
    otherwise); ``size`` is SIZE(c) on ``c_grid``; ``dav`` is the expected
    DAV where it has a closed form.
    """

    scene: str
    seed: int
    radii: np.ndarray
    profile: np.ndarray | None
    c_grid: np.ndarray
    size: np.ndarray
    skew_magnitude: float | None = None
    skew_direction: float | None = None
    dav: float | None = None
    eyewall_radius: float | None = None
    notes: Mapping[str, float] = field(default_factory=dict)


def effective_cdo_radius(spec: SceneSpec) -> float:
    amp = spec.p("diurnal_amp")
    r = spec.p("cdo_radius")
    if amp:
        r *= 1.0 + amp * math.sin(2 * math.pi * (spec.hour - spec.p("diurnal_phase")) / 24.0)
    return r


def radial_function(spec: SceneSpec):
    """T(r) for the axisymmetric scenes (vectorized over r in km)."""
    t_env, t_cdo = spec.p("t_env"), spec.p("t_cdo")
    big_r, q = effective_cdo_radius(spec), spec.p("cdo_sharpness")

    def cdo(r):
        return t_env + (t_cdo - t_env) / (1.0 + (np.asarray(r, float) / big_r) ** q)

    if spec.scene in ("axisym_cdo", "offset_blob"):
        return cdo
    if spec.scene == "eye_eyewall":
        re = spec.p("eye_radius")
        t_eye, t_ew = spec.p("t_eye"), spec.p("t_eyewall")

        def eye(r):
            r = np.asarray(r, float)
            return (cdo(r) + (t_eye - t_cdo) * np.exp(-(r / re) ** 2)
                    + (t_ew - t_cdo) * np.exp(-((r - 2 * re) / re) ** 2))
        return eye
    return None


def _unit(az_deg):
    a = math.radians(az_deg)
    e, n = math.sin(a), math.cos(a)
    # snap rounding residue so cardinal directions split the grid exactly
    return (0.0 if abs(e) < 1e-12 else e), (0.0 if abs(n) < 1e-12 else n)  # (east, north)


def scene_field(spec: SceneSpec, x, y):
    """Noise-free brightness temperature at east/north offsets (km)."""
    s = spec.scene
    if s == "uniform":
        return np.full(np.shape(x), spec.p("t_uniform"))
    if s in ("axisym_cdo", "eye_eyewall"):
        return radial_function(spec)(np.hypot(x, y))
    if s == "offset_blob":
        ux, uy = _unit(spec.p("offset_az"))
        ox, oy = spec.p("offset_km") * ux, spec.p("offset_km") * uy
        return radial_function(spec)(np.hypot(x - ox, y - oy))
    if s == "half_cold":
        ux, uy = _unit(spec.p("cold_az"))
        return np.where(x * ux + y * uy > 0, spec.p("t_cold"), spec.p("t_warm"))
    if s == "ramp":
        ux, uy = _unit(spec.p("ramp_az"))
        return spec.p("t_env") + spec.p("ramp_slope") * (x * ux + y * uy)
    raise SceneError(s)


def _grid_km(spec: SceneSpec):
    n = spec.half_width
    dy = KM_PER_DEG * spec.grid_step
    dx = dy * math.cos(math.radians(spec.center_lat))
    idx = np.arange(-n, n + 1, dtype=float)
    x = np.broadcast_to(idx[None, :] * dx, (2 * n + 1, 2 * n + 1))
    y = np.broadcast_to(-idx[:, None] * dy, (2 * n + 1, 2 * n + 1))
    return x, y, dx, dy


def _quad_level_stats(spec: SceneSpec, c_grid, fine: int = 4):
    """Area, centroid and mean distance of {T <= c} by fine quadrature."""
    n = spec.half_width
    _, _, dx, dy = _grid_km(spec)
    m = (2 * n + 1) * fine
    half_x, half_y = (2 * n + 1) * dx / 2, (2 * n + 1) * dy / 2
    xs = -half_x + (np.arange(m) + 0.5) * (2 * half_x / m)
    ys = -half_y + (np.arange(m) + 0.5) * (2 * half_y / m)
    xx, yy = np.meshgrid(xs, ys)
    t = scene_field(spec, xx, yy).ravel()
    cell = (2 * half_x / m) * (2 * half_y / m)
    order = np.argsort(t, kind="stable")
    ts = t[order]
    k = np.searchsorted(ts, c_grid, side="right")
    cx = np.concatenate([[0.0], np.cumsum(xx.ravel()[order])])
    cy = np.concatenate([[0.0], np.cumsum(yy.ravel()[order])])
    cd = np.concatenate([[0.0], np.cumsum(np.hypot(xx, yy).ravel()[order])])
    return k * cell, cx[k], cy[k], cd[k], k


def scene_truth(spec: SceneSpec, c_grid=None) -> SynthTruth:
    from .features import DEFAULT_CONFIG, temperature_grid

    c_grid = temperature_grid(DEFAULT_CONFIG) if c_grid is None else np.asarray(c_grid, float)
    n = spec.half_width
    _, _, dx, dy = _grid_km(spec)
    radii = np.linspace(0.0, n * dy, 4 * n + 1)
    prof_fn = radial_function(spec) if spec.scene in ("axisym_cdo", "eye_eyewall") else None
    profile = None if prof_fn is None else prof_fn(radii)
    stamp_area = (2 * n + 1) * dx * (2 * n + 1) * dy
    skew_mag = skew_dir = dav = ew = None
    s = spec.scene

    if s in ("axisym_cdo", "eye_eyewall"):
        dav = 0.0
        skew_mag = 0.0
        # disc radius r_c with T(r_c) = c, valid while the profile is monotone
        if s == "axisym_cdo":
            t_env, t_cdo = spec.p("t_env"), spec.p("t_cdo")
            g = (c_grid - t_env) / (t_cdo - t_env)
            with np.errstate(divide="ignore", invalid="ignore"):
                rc = effective_cdo_radius(spec) * (1.0 / g - 1.0) ** (1.0 / spec.p("cdo_sharpness"))
            rc = np.where(c_grid < t_cdo, 0.0, np.where(c_grid >= t_env, np.inf, rc))
            size = np.minimum(np.pi * rc ** 2, stamp_area)
        else:
            size = _quad_level_stats(spec, c_grid)[0]
            fine_r = np.linspace(0, 6 * spec.p("eye_radius"), 6001)
            ew = float(fine_r[np.argmin(prof_fn(fine_r))])
    elif s == "half_cold":
        lo, hi = sorted((spec.p("t_cold"), spec.p("t_warm")))
        size = np.where(c_grid < lo, 0.0, np.where(c_grid < hi, stamp_area / 2, stamp_area))
        skew_dir = math.radians(spec.p("cold_az")) % (2 * math.pi)
    elif s == "uniform":
        size = np.where(c_grid < spec.p("t_uniform"), 0.0, stamp_area)
        skew_mag = 0.0
        profile = np.full(radii.shape, spec.p("t_uniform"))
    else:
        area, sx, sy, sd, k = _quad_level_stats(spec, c_grid)
        size = area
        if s == "offset_blob":
            skew_dir = math.radians(spec.p("offset_az")) % (2 * math.pi)
            i = int(np.searchsorted(c_grid, 0.5 * (spec.p("t_cdo") + spec.p("t_env"))))
            i = min(i, c_grid.size - 1)
            if k[i]:
                skew_mag = float(np.hypot(sx[i], sy[i]) / sd[i])
        if s == "ramp":
            x, y, _, _ = _grid_km(spec)
            ux, uy = _unit(spec.p("ramp_az"))
            rad = np.degrees(np.arctan2(uy, ux) - np.arctan2(y, x))
            from .features import fold_angle
            psi = fold_angle(rad)
            sel = (np.hypot(x, y) <= 200.0) & ((x != 0) | (y != 0))
            dav = float(np.var(psi[sel]))
    return SynthTruth(s, spec.seed, radii, profile, c_grid, np.asarray(size, float),
                      skew_mag, skew_dir, dav, ew)


def make_stamp(spec: SceneSpec, with_truth: bool = True):
    """Rasterize a scene; returns (Stamp, SynthTruth) or just the Stamp."""
    rng = np.random.default_rng(spec.seed)
    x, y, _, _ = _grid_km(spec)
    tb = np.array(scene_field(spec, x, y), dtype=float)
    if spec.p("noise_sd") > 0:
        tb = tb + rng.normal(0.0, spec.p("noise_sd"), tb.shape)
    tb = np.clip(tb, TB_MIN, TB_MAX)
    mask = np.zeros(tb.shape, bool)
    frac = spec.p("missing_frac")
    if frac > 0:
        n_miss = int(round(frac * mask.size))
        mask.flat[rng.choice(mask.size, n_miss, replace=False)] = True
    stamp = Stamp(spec.storm_id, spec.time, spec.center_lat, spec.center_lon,
                  spec.grid_step, spec.half_width, tb, mask)
    if not with_truth:
        return stamp
    return stamp, scene_truth(spec)


def random_spec(rng: np.random.Generator, half_width: int = 20, grid_step: float = 0.2,
                seed: int | None = None) -> SceneSpec:
    """A random scene with noise and scattered missing pixels."""
    scene = rng.choice(["axisym_cdo", "eye_eyewall", "offset_blob", "half_cold", "ramp"])
    params = {
        "t_cdo": rng.uniform(-85, -40),
        "t_env": rng.uniform(0, 28),
        "cdo_radius": rng.uniform(80, 350),
        "eye_radius": rng.uniform(15, 40),
        "offset_km": rng.uniform(0, 150),
        "offset_az": rng.uniform(0, 360),
        "cold_az": rng.uniform(0, 360),
        "ramp_az": rng.uniform(0, 360),
        "ramp_slope": rng.uniform(0.02, 0.2),
        "noise_sd": rng.uniform(0, 4),
        "missing_frac": rng.uniform(0, 0.04),
    }
    return SceneSpec(str(scene), params, seed=int(rng.integers(2**31) if seed is None else seed),
                     center_lat=float(rng.uniform(-40, 40)), grid_step=grid_step,
                     half_width=half_width)


# -- synthetic storms and datasets ----------------------------------------------

SCENARIOS = ("null", "sparse_signal", "structure_driven")
SHIPS_MEANS = {"SHRD": 15.0, "SHDC": 12.0, "SHRS": 10.0, "OHC": 60.0, "RSST": 28.5,
               "RHLO": 75.0, "RHMD": 60.0, "RHHI": 50.0, "VMPI": 140.0, "U200": -2.0}
SHIPS_SDS = {"SHRD": 6.0, "SHDC": 5.0, "SHRS": 4.0, "OHC": 20.0, "RSST": 1.0,
             "RHLO": 6.0, "RHMD": 8.0, "RHHI": 8.0, "VMPI": 15.0, "U200": 6.0}
# sign of the favourable-environment shift, in SD units
ENV_DIRECTION = {"SHRD": -1.0, "OHC": 1.0, "RHMD": 1.0, "VMPI": 1.0, "SHDC": -1.0}


@dataclass
class SynthDataset:
    """Pipeline inputs plus the generating truth.

    ``track`` holds 6-hourly points; ``stamps`` one stamp per track point;
    ``ships`` the SHIPS-like table; ``organized`` marks stamps drawn from
    the eye scene; ``episodes`` lists (storm_id, start time) of injected
    rapid-intensification windows. For ``sparse_signal`` the tabular design
    sits in ``table`` with its true coefficients in ``beta``.
    """

    scenario: str
    seed: int
    track: list = field(default_factory=list)
    stamps: list = field(default_factory=list)
    ships: object = None
    organized: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)
    table: object = None
    beta: np.ndarray | None = None


def sparse_design(n: int = 2000, d: int = 50, k: int = 5, n_storms: int = 100,
                  seed: int = 0, amplitude: float = 0.5, intercept: float = -1.0):
    """Gaussian design with a k-sparse logistic truth; rows grouped into storms.

    Returns (X, y, storm_ids, beta).
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    beta = np.zeros(d)
    signs = rng.choice([-1.0, 1.0], k)
    beta[:k] = amplitude * signs * rng.uniform(0.8, 1.2, k)
    eta = intercept + X @ beta
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(int)
    storms = np.array([f"S{i:03d}" for i in rng.integers(0, n_storms, n)])
    return X, y, storms, beta


def _storm_years(n_storms: int, rng) -> list[int]:
    n_train = int(round(0.6 * n_storms))
    return ([int(y) for y in rng.integers(1998, 2010, n_train)]
            + [int(y) for y in rng.integers(2010, 2017, n_storms - n_train)])


def _scene_for(organized: bool, rng, sid, time, lat, lon, grid_step, half_width, noise_sd):
    if organized:
        params = {"t_cdo": rng.uniform(-80, -70), "cdo_radius": rng.uniform(140, 200),
                  "eye_radius": rng.uniform(18, 30), "t_eye": rng.uniform(0, 15),
                  "t_eyewall": rng.uniform(-88, -78)}
        scene = "eye_eyewall"
    elif rng.random() < 0.5:
        params = {"t_cdo": rng.uniform(-70, -50), "cdo_radius": rng.uniform(150, 300)}
        scene = "axisym_cdo"
    else:
        params = {"t_cdo": rng.uniform(-70, -50), "cdo_radius": rng.uniform(150, 300),
                  "offset_km": rng.uniform(40, 150), "offset_az": rng.uniform(0, 360)}
        scene = "offset_blob"
    params.update(noise_sd=noise_sd, missing_frac=float(rng.choice([0.0, 0.01, 0.1], p=[0.6, 0.35, 0.05])))
    return SceneSpec(scene, params, seed=int(rng.integers(2**31)), storm_id=sid, time=time,
                     center_lat=lat, center_lon=lon, grid_step=grid_step, half_width=half_width)


def make_dataset(n_storms: int = 40, scenario: str = "structure_driven", seed: int = 0,
                 env_signal: float = 0.0, eye_given_ri: float = 0.8, eye_background: float = 0.15,
                 env_given_ri: float = 0.6, grid_step: float = 0.08, half_width: int = 40,
                 noise_sd: float = 1.5) -> SynthDataset:
    """Synthetic storms with stamps, SHIPS-like predictors and known labels.

    Every storm runs 6 to 9 days at 6-hourly steps with one or two injected
    24-h intensification episodes of +36 kt. Under ``structure_driven`` an
    episode shows an eye scene with probability ``eye_given_ri`` while other
    times show one with probability ``eye_background``; under ``null`` the
    eye scene is independent of the episodes. ``env_signal`` (in SD units)
    shifts favourable SHIPS variables during an episode with probability
    ``env_given_ri``; the two cues share one uniform draw per episode so
    they overlap as little as their probabilities allow. ``sparse_signal`` skips
    imagery and returns a tabular logistic design instead.
    """
    if scenario not in SCENARIOS:
        raise SceneError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    if n_storms < 10:
        raise SceneError("n_storms must be at least 10")
    import pandas as pd

    if scenario == "sparse_signal":
        X, y, storms, beta = sparse_design(n_storms=n_storms, seed=seed)
        table = pd.DataFrame(X, columns=[f"x{i + 1}" for i in range(X.shape[1])])
        table.insert(0, "storm_id", storms)
        table["y"] = y
        return SynthDataset(scenario, seed, table=table, beta=beta)

    rng = np.random.default_rng(seed)
    out = SynthDataset(scenario, seed)
    ships_rows = []
    for k, year in enumerate(_storm_years(n_storms, rng)):
        sid = f"AL{k + 1:02d}{year}"
        n6 = int(rng.integers(24, 37))
        t0 = datetime(year, 8, 1, tzinfo=timezone.utc) + timedelta(days=int(rng.integers(0, 60)))
        in_episode = np.zeros(n6, bool)
        starts = []
        for _ in range(int(rng.integers(1, 3))):
            s = int(rng.integers(5, n6 - 4))
            if not in_episode[max(s - 1, 0):s + 6].any():
                starts.append(s)
                in_episode[s:s + 5] = True
        dv = rng.normal(0.0, 2.5, n6)
        for s in starts:
            dv[s + 1:s + 5] = 9.0
        dv[0] = 0.0
        v = np.empty(n6)
        v[0] = rng.uniform(55, 75)
        for i in range(1, n6):
            # clip step by step so an episode always gains its full amount
            v[i] = min(max(v[i - 1] + dv[i], 52.0), 165.0)
        lat = rng.uniform(12, 22) + np.cumsum(rng.normal(0.15, 0.08, n6))
        lon = rng.uniform(-60, -40) - np.cumsum(rng.normal(0.4, 0.15, n6))
        # one draw per episode: eye and environment cues overlap as little as possible
        u = {s: rng.random() for s in starts}
        eye_on = {s: u[s] < eye_given_ri for s in starts}
        env_on = {s: u[s] >= 1.0 - env_given_ri for s in starts}
        z = np.zeros(len(SHIPS_MEANS))
        for i in range(n6):
            t = t0 + timedelta(hours=6 * i)
            out.track.append(TrackPoint(sid, t, round(float(lat[i]), 4), round(float(lon[i]), 4),
                                        round(float(v[i]), 3), 1000.0, "NAL"))
            episode = next((s for s in starts if s <= i <= s + 4), None)
            if scenario == "structure_driven" and episode is not None:
                org = eye_on[episode]
            else:
                org = rng.random() < (eye_background if scenario == "structure_driven"
                                      else 0.5 * (eye_given_ri + eye_background))
            spec = _scene_for(org, rng, sid, t, float(lat[i]), float(lon[i]), grid_step, half_width, noise_sd)
            out.stamps.append(make_stamp(spec, with_truth=False))
            out.organized[(sid, t)] = bool(org)
            z = 0.7 * z + np.sqrt(1 - 0.49) * rng.normal(size=z.size)
            shift = env_signal if (episode is not None and env_on[episode]) else 0.0
            row = {"storm_id": sid, "time": t}
            for j, name in enumerate(SHIPS_MEANS):
                row[name] = SHIPS_MEANS[name] + SHIPS_SDS[name] * (z[j] + shift * ENV_DIRECTION.get(name, 0.0))
            ships_rows.append(row)
        out.episodes += [(sid, t0 + timedelta(hours=6 * s)) for s in starts]
    out.ships = pd.DataFrame(ships_rows)
    return out


def diurnal_storm(hours: int = 96, amplitude: float = 0.3, storm_id: str = "DIURNAL",
                  start: datetime = EPOCH, grid_step: float = 0.08, half_width: int = 40,
                  noise_sd: float = 0.5, seed: int = 0):
    """Hourly stamps of a CDO whose radius pulses with a 24-h period."""
    rng = np.random.default_rng(seed)
    stamps = []
    for h in range(hours):
        spec = SceneSpec("axisym_cdo", {"diurnal_amp": amplitude, "noise_sd": noise_sd},
                         seed=int(rng.integers(2**31)), storm_id=storm_id,
                         time=start + timedelta(hours=h), grid_step=grid_step, half_width=half_width)
        stamps.append(make_stamp(spec, with_truth=False))
    return stamps

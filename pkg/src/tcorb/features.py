"""ORB statistics of a stamp, densely sampled into ORB functions.

Three families are computed:

* Organization: deviation-angle variance DAV(r) over discs of radius r.
* Radial structure: azimuthal mean temperature RAD(r) in annuli.
* Bulk morphology of the sublevel sets L(c) = {T_b <= c}: SIZE, SKEW,
  SHAPE and ECC as functions of the temperature threshold c.

Radius axes are sampled at the native row spacing of the stamp, the
temperature axis every 1 C.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .stamps import Stamp, pixel_offsets

STATISTICS = ("DAV", "RAD", "SIZE", "SKEW", "SHAPE", "ECC")
RADIUS_AXIS = "radius_km"
TEMPERATURE_AXIS = "temperature_C"


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    dav_r_min: float = 50.0
    dav_r_max: float = 400.0
    dav_min_count: int = 10
    grad_floor: float = 1e-6  # C/km
    rad_r_max: float = 600.0
    max_empty_annuli: float = 0.25
    c_min: float = -90.0
    c_max: float = 30.0
    c_step: float = 1.0
    n_min: int = 10
    eye_radius: float = 25.0  # km
    eye_search_deg: float = 0.5
    eye_contrast: float = 5.0  # C
    eye_min_temp: float = -25.0  # C


DEFAULT_CONFIG = FeatureConfig()


@dataclass(frozen=True)
class OrbFunction:
    """One statistic evaluated on a dense threshold grid.

    ``defined`` is False where the raw statistic was undefined; those
    entries hold values interpolated from neighbouring thresholds.
    """

    statistic: str
    axis: str
    thresholds: np.ndarray
    values: np.ndarray
    defined: np.ndarray
    skew_direction: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}")
        th = np.asarray(self.thresholds, dtype=float)
        if th.ndim != 1 or (th.size > 1 and np.any(np.diff(th) <= 0)):
            raise ValueError("thresholds must be strictly increasing")
        for name in ("thresholds", "values", "defined", "skew_direction"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=bool if name == "defined" else float)
                if v.shape != th.shape:
                    raise ValueError(f"{name} length does not match thresholds")
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    def at(self, threshold: float) -> float:
        i = int(np.argmin(np.abs(self.thresholds - threshold)))
        return float(self.values[i])


@dataclass(frozen=True)
class StormCenter:
    row: float
    col: float
    source: str = "best_track"

    def __post_init__(self):
        if self.source not in ("best_track", "eye_detected"):
            raise ValueError(f"unknown center source {self.source!r}")


def grid_center(stamp: Stamp) -> StormCenter:
    n = stamp.half_width
    return StormCenter(float(n), float(n), "best_track")


def _check_center(stamp: Stamp, center: StormCenter):
    n = stamp.shape[0]
    if not (0 <= center.row <= n - 1 and 0 <= center.col <= n - 1):
        raise FeatureError(f"center ({center.row}, {center.col}) outside the {n}x{n} grid")


def radius_grid(stamp: Stamp, r_min: float, r_max: float) -> np.ndarray:
    """Radii from r_min to r_max spaced as close to one row step as possible."""
    n = int(round((r_max - r_min) / stamp.dy_km)) + 1
    return np.linspace(r_min, r_max, max(n, 2))


def temperature_grid(config: FeatureConfig = DEFAULT_CONFIG) -> np.ndarray:
    n = int(round((config.c_max - config.c_min) / config.c_step)) + 1
    return config.c_min + config.c_step * np.arange(n)


def _fill_undefined(thresholds, values, defined):
    out = np.array(values, dtype=float)
    if defined.all():
        return out
    if not defined.any():
        return np.zeros_like(out)
    out[~defined] = np.interp(thresholds[~defined], thresholds[defined], out[defined])
    return out


# -- organization --------------------------------------------------------------

def gradient(stamp: Stamp):
    """Temperature gradient (east, north) in C/km.

    Central differences inside the grid, one-sided at the edges; NaN
    wherever any pixel of the stencil is masked.
    """
    t = np.where(stamp.mask, np.nan, stamp.tb)
    dcol = np.empty_like(t)
    drow = np.empty_like(t)
    dcol[:, 1:-1] = (t[:, 2:] - t[:, :-2]) / 2.0
    dcol[:, 0] = t[:, 1] - t[:, 0]
    dcol[:, -1] = t[:, -1] - t[:, -2]
    drow[1:-1, :] = (t[2:, :] - t[:-2, :]) / 2.0
    drow[0, :] = t[1, :] - t[0, :]
    drow[-1, :] = t[-1, :] - t[-2, :]
    # rows run north to south
    return dcol / stamp.dx_km, -drow / stamp.dy_km


def fold_angle(deg):
    """Map an angle difference in degrees onto (-90, 90]."""
    return 90.0 - np.mod(90.0 - np.asarray(deg, dtype=float), 180.0)


def deviation_angles(stamp: Stamp, center: StormCenter | None = None,
                     grad_floor: float = DEFAULT_CONFIG.grad_floor) -> np.ndarray:
    """Angle between the gradient line and the radial line at each pixel.

    Returns degrees in (-90, 90], NaN where undefined (masked stencil,
    gradient magnitude below ``grad_floor``, or the center itself).
    """
    center = center or grid_center(stamp)
    _check_center(stamp, center)
    gx, gy = gradient(stamp)
    x, y = pixel_offsets(stamp, center.row, center.col)
    mag = np.hypot(gx, gy)
    ok = np.isfinite(mag) & (mag >= grad_floor) & ((x != 0) | (y != 0))
    psi = np.full(stamp.shape, np.nan)
    d = np.degrees(np.arctan2(gy[ok], gx[ok]) - np.arctan2(y[ok], x[ok]))
    psi[ok] = fold_angle(d)
    return psi


def dav(stamp: Stamp, center: StormCenter | None = None,
        config: FeatureConfig = DEFAULT_CONFIG) -> OrbFunction:
    center = center or grid_center(stamp)
    psi = deviation_angles(stamp, center, config.grad_floor)
    x, y = pixel_offsets(stamp, center.row, center.col)
    ok = np.isfinite(psi)
    dist = np.hypot(x[ok], y[ok])
    order = np.argsort(dist, kind="stable")
    dist, ang = dist[order], psi[ok][order]
    radii = radius_grid(stamp, config.dav_r_min, config.dav_r_max)
    k = np.searchsorted(dist, radii, side="right")
    if k[0] < config.dav_min_count:
        raise FeatureError(f"only {k[0]} defined deviation angles within "
                           f"{config.dav_r_min} km (need {config.dav_min_count})")
    s1 = np.concatenate([[0.0], np.cumsum(ang)])
    s2 = np.concatenate([[0.0], np.cumsum(ang * ang)])
    mean = s1[k] / k
    var = np.maximum(s2[k] / k - mean * mean, 0.0)
    return OrbFunction("DAV", RADIUS_AXIS, radii, var, np.ones(radii.size, bool))


# -- radial structure -----------------------------------------------------------

def _disc_offsets(stamp: Stamp, radius_km: float):
    """Integer (drow, dcol) offsets of pixels within radius_km of a pixel."""
    rmax = int(math.ceil(radius_km / stamp.dy_km))
    cmax = int(math.ceil(radius_km / stamp.dx_km))
    dr, dc = np.mgrid[-rmax:rmax + 1, -cmax:cmax + 1]
    inside = (dr * stamp.dy_km) ** 2 + (dc * stamp.dx_km) ** 2 <= radius_km ** 2
    return dr[inside], dc[inside]


def _inner_mean(stamp, row, col, offsets):
    n = stamp.shape[0]
    rr, cc = row + offsets[0], col + offsets[1]
    keep = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n)
    rr, cc = rr[keep], cc[keep]
    valid = ~stamp.mask[rr, cc]
    if not valid.any():
        return -np.inf
    return float(stamp.tb[rr, cc][valid].mean())


def find_center(stamp: Stamp, config: FeatureConfig = DEFAULT_CONFIG) -> StormCenter:
    """Locate a warm eye near the best-track center.

    Every pixel within ``eye_search_deg`` of the grid center is scored by
    the mean temperature inside ``eye_radius``. The warmest candidate is
    accepted as an eye when that mean exceeds ``eye_min_temp`` and beats
    the surrounding ring (eye_radius, 2*eye_radius] by ``eye_contrast``;
    otherwise the grid (best-track) center is returned. A flat maximum
    resolves to the candidate nearest the centroid of the tied set.
    """
    n = stamp.half_width
    reach = int(round(config.eye_search_deg / stamp.grid_step))
    core = _disc_offsets(stamp, config.eye_radius)
    outer = _disc_offsets(stamp, 2 * config.eye_radius)
    ring_sel = ((outer[0] * stamp.dy_km) ** 2 + (outer[1] * stamp.dx_km) ** 2
                > config.eye_radius ** 2)
    ring = (outer[0][ring_sel], outer[1][ring_sel])

    cands = []
    for dr in range(-reach, reach + 1):
        for dc in range(-reach, reach + 1):
            if (dr * dr + dc * dc) * stamp.grid_step ** 2 > config.eye_search_deg ** 2 + 1e-12:
                continue
            r, c = n + dr, n + dc
            if 0 <= r <= 2 * n and 0 <= c <= 2 * n:
                cands.append((r, c, _inner_mean(stamp, r, c, core)))
    cands = np.array(cands)
    top = cands[:, 2].max()
    tied = cands[cands[:, 2] >= top - 1e-9]
    # flat maxima: take the tied candidate nearest the plateau centroid
    mid = tied[:, :2].mean(axis=0)
    r, c, m = tied[np.argmin(((tied[:, :2] - mid) ** 2).sum(axis=1))]
    r, c = int(r), int(c)
    ring_mean = _inner_mean(stamp, r, c, ring)
    if m > config.eye_min_temp and m - ring_mean >= config.eye_contrast:
        return StormCenter(float(r), float(c), "eye_detected")
    return grid_center(stamp)


def radial_profile(stamp: Stamp, center: StormCenter | None = None,
                   config: FeatureConfig = DEFAULT_CONFIG) -> OrbFunction:
    """Mean temperature in annuli [r, r + dr) for r from 0 to ``rad_r_max``."""
    center = center or grid_center(stamp)
    _check_center(stamp, center)
    radii = radius_grid(stamp, 0.0, config.rad_r_max)
    step = radii[1] - radii[0]
    x, y = pixel_offsets(stamp, center.row, center.col)
    ok = ~stamp.mask
    idx = np.floor(np.hypot(x[ok], y[ok]) / step).astype(np.int64)
    tb = stamp.tb[ok]
    keep = idx < radii.size
    counts = np.bincount(idx[keep], minlength=radii.size)
    sums = np.bincount(idx[keep], weights=tb[keep], minlength=radii.size)
    defined = counts > 0
    if (~defined).mean() > config.max_empty_annuli:
        raise FeatureError(f"{(~defined).sum()} of {radii.size} annuli have no valid pixels")
    vals = np.where(defined, sums / np.maximum(counts, 1), 0.0)
    return OrbFunction("RAD", RADIUS_AXIS, radii,
                       _fill_undefined(radii, vals, defined), defined)


# -- bulk morphology -------------------------------------------------------------

def level_set(stamp: Stamp, c: float) -> np.ndarray:
    """Boolean mask of unmasked pixels with T_b <= c."""
    return ~stamp.mask & (np.where(stamp.mask, np.inf, stamp.tb) <= c)


def _neighbour_max(stamp: Stamp) -> np.ndarray:
    """Max over the four neighbours; +inf if any is masked or off-grid."""
    t = np.where(stamp.mask, np.inf, stamp.tb)
    p = np.pad(t, 1, constant_values=np.inf)
    return np.maximum.reduce([p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]])


def _cumulative(keys, *weights):
    order = np.argsort(keys, kind="stable")
    sums = [np.concatenate([[0.0], np.cumsum(w[order])]) for w in weights]
    return keys[order], sums


def bulk_morphology(stamp: Stamp, center: StormCenter | None = None,
                    config: FeatureConfig = DEFAULT_CONFIG) -> dict[str, OrbFunction]:
    """SIZE, SKEW, SHAPE and ECC on the temperature grid.

    SIZE is the level-set area. SKEW is the distance of the level-set
    centroid from the center divided by the mean pixel distance, with the
    centroid azimuth (clockwise from north, radians) as direction. SHAPE is
    the mean distance of boundary pixels (those with a 4-neighbour outside
    the set, masked or off-grid) over the mean distance of all pixels. ECC
    is 1 - l2/l1 for the eigenvalues of the coordinate covariance.
    """
    center = center or grid_center(stamp)
    _check_center(stamp, center)
    cs = temperature_grid(config)
    x, y = pixel_offsets(stamp, center.row, center.col)
    ok = ~stamp.mask
    t = stamp.tb[ok]
    xv, yv = x[ok], y[ok]
    dv = np.hypot(xv, yv)
    one = np.ones_like(t)

    ts, (s_n, s_x, s_y, s_xx, s_yy, s_xy, s_d) = _cumulative(
        t, one, xv, yv, xv * xv, yv * yv, xv * yv, dv)
    k = np.searchsorted(ts, cs, side="right")
    # pixel s lies on the boundary of L(c) iff T(s) <= c < max-neighbour(s)
    u = np.maximum(t, _neighbour_max(stamp)[ok])
    us, (u_n, u_d) = _cumulative(u, one, dv)
    ku = np.searchsorted(us, cs, side="right")

    size = k * stamp.pixel_area_km2
    kk = np.maximum(k, 1)
    cx, cy = s_x[k] / kk, s_y[k] / kk
    mean_d = s_d[k] / kk
    enough = k >= config.n_min

    skew_ok = enough & (mean_d > 0)
    skew = np.where(skew_ok, np.hypot(cx, cy) / np.where(mean_d > 0, mean_d, 1.0), 0.0)
    direction = np.where(skew_ok, np.mod(np.arctan2(cx, cy), 2 * np.pi), np.nan)

    nb = s_n[k] - u_n[ku]
    bd = s_d[k] - u_d[ku]
    shape_ok = enough & (mean_d > 0) & (nb > 0)
    shape = np.where(shape_ok, (bd / np.maximum(nb, 1)) / np.where(mean_d > 0, mean_d, 1.0), 0.0)

    vxx = s_xx[k] / kk - cx * cx
    vyy = s_yy[k] / kk - cy * cy
    vxy = s_xy[k] / kk - cx * cy
    half_tr = 0.5 * (vxx + vyy)
    disc = np.sqrt(np.maximum(0.25 * (vxx - vyy) ** 2 + vxy * vxy, 0.0))
    l1, l2 = half_tr + disc, np.maximum(half_tr - disc, 0.0)
    ecc_ok = enough & (l1 > 0)
    ecc = np.where(ecc_ok, 1.0 - l2 / np.where(l1 > 0, l1, 1.0), 0.0)

    axis = TEMPERATURE_AXIS
    return {
        "SIZE": OrbFunction("SIZE", axis, cs, size.astype(float), np.ones(cs.size, bool)),
        "SKEW": OrbFunction("SKEW", axis, cs, _fill_undefined(cs, skew, skew_ok), skew_ok,
                            skew_direction=direction),
        "SHAPE": OrbFunction("SHAPE", axis, cs, _fill_undefined(cs, shape, shape_ok), shape_ok),
        "ECC": OrbFunction("ECC", axis, cs, _fill_undefined(cs, ecc, ecc_ok), ecc_ok),
    }


def size_fn(stamp, center=None, config=DEFAULT_CONFIG) -> OrbFunction:
    return bulk_morphology(stamp, center, config)["SIZE"]


def skew_fn(stamp, center=None, config=DEFAULT_CONFIG) -> OrbFunction:
    return bulk_morphology(stamp, center, config)["SKEW"]


def shape_fn(stamp, center=None, config=DEFAULT_CONFIG) -> OrbFunction:
    return bulk_morphology(stamp, center, config)["SHAPE"]


def ecc_fn(stamp, center=None, config=DEFAULT_CONFIG) -> OrbFunction:
    return bulk_morphology(stamp, center, config)["ECC"]


def orb_functions(stamp: Stamp, center: StormCenter | None = None,
                  config: FeatureConfig = DEFAULT_CONFIG) -> dict[str, OrbFunction]:
    """All six ORB functions; the center is located automatically if omitted."""
    if center is None:
        center = find_center(stamp, config)
    out = {"DAV": dav(stamp, center, config), "RAD": radial_profile(stamp, center, config)}
    out.update(bulk_morphology(stamp, center, config))
    return out


# -- I/O ---------------------------------------------------------------------

def write_orb_csv(fn: OrbFunction, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fn.skew_direction is not None:
            w.writerow(["threshold", "value", "direction", "defined"])
            for t, v, d, ok in zip(fn.thresholds, fn.values, fn.skew_direction, fn.defined):
                w.writerow([repr(float(t)), repr(float(v)), "" if np.isnan(d) else repr(float(d)), int(ok)])
        else:
            w.writerow(["threshold", "value", "defined"])
            for t, v, ok in zip(fn.thresholds, fn.values, fn.defined):
                w.writerow([repr(float(t)), repr(float(v)), int(ok)])
    return path


def read_orb_csv(path, statistic: str) -> OrbFunction:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    th = np.array([float(r["threshold"]) for r in rows])
    vals = np.array([float(r["value"]) for r in rows])
    ok = np.array([r["defined"] == "1" for r in rows])
    direction = None
    if rows and "direction" in rows[0]:
        direction = np.array([float(r["direction"]) if r["direction"] else np.nan for r in rows])
    axis = RADIUS_AXIS if statistic in ("DAV", "RAD") else TEMPERATURE_AXIS
    return OrbFunction(statistic, axis, th, vals, ok, skew_direction=direction)

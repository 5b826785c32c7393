"""Labeled 6-hourly observations: rapid-change labels, lags and predictor sets."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from .stamps import TrackPoint, group_tracks, parse_time

SHIPS_VARS = ("SHRD", "SHDC", "SHRS", "OHC", "RSST", "RHLO", "RHMD", "RHHI", "VMPI", "U200")
SHIPS_BASE = SHIPS_VARS + ("LAT", "LON")
ORB_K = {"DAV": 3, "RAD": 3, "SIZE": 2, "SKEW": 3, "SHAPE": 3, "ECC": 3}
LAGS_H = (6, 12, 24)
PERSISTENCE = ("V", "D6_V", "D12_V")
PREDICTOR_SETS = ("SHIPS_only", "ORB_only", "SHIPS_plus_ORB", "SHIPS_plus_Persistence")
SPLIT_YEAR = 2010
SIX_HOURS = pd.Timedelta(hours=6)
_LAG = re.compile(r"^D\d+_")


class DatasetError(ValueError):
    pass


class Labels(NamedTuple):
    ri: np.ndarray
    rw: np.ndarray
    skipped_windows: int


def _hours(times) -> np.ndarray:
    t = np.asarray(times)
    if t.dtype.kind in "iuf":
        return t.astype(float)
    stamps = pd.to_datetime(pd.Series([parse_time(x) for x in t]) if t.dtype == object else t, utc=True)
    return ((stamps - pd.Timestamp("1970-01-01", tz="UTC")) / pd.Timedelta(hours=1)).to_numpy(float)


def label_rapid_change(times, intensities, threshold: float = 25.0,
                       step_h: float = 6.0, window_h: float = 24.0) -> Labels:
    """Flag points that fall inside any rapid 24-h window.

    A window [t, t + 24 h] needs every 6-hourly point in between; windows
    spanning a gap are skipped and counted. A point is RI (RW) if it lies in
    a window, endpoints included, whose intensity change is >= threshold
    (<= -threshold).

    >>> label_rapid_change([0, 6, 12, 18, 24], [50, 55, 60, 70, 80]).ri
    array([1, 1, 1, 1, 1])
    """
    h = _hours(times)
    v = np.asarray(intensities, dtype=float)
    if h.shape != v.shape:
        raise DatasetError("times and intensities differ in length")
    if h.size > 1 and np.any(np.diff(h) <= 0):
        raise DatasetError("times must be strictly increasing")
    span = int(round(window_h / step_h))
    ri = np.zeros(h.size, dtype=int)
    rw = np.zeros(h.size, dtype=int)
    skipped = 0
    pos = {t: i for i, t in enumerate(h)}
    for i, t in enumerate(h):
        j = pos.get(t + window_h)
        if j is None:
            if t + window_h <= h[-1]:
                skipped += 1
            continue
        if j - i != span:
            skipped += 1
            continue
        dv = v[j] - v[i]
        if dv >= threshold:
            ri[i:j + 1] = 1
        if dv <= -threshold:
            rw[i:j + 1] = 1
    return Labels(ri, rw, skipped)


def count_events(labels) -> int:
    """Number of maximal runs of consecutive ones."""
    x = np.asarray(labels, dtype=int)
    if x.size == 0:
        return 0
    return int(x[0] + np.sum((x[1:] == 1) & (x[:-1] == 0)))


def add_lags(frame: pd.DataFrame, columns: Sequence[str], persistence: bool = False,
             lags=LAGS_H, drop_incomplete: bool = True) -> pd.DataFrame:
    """Append backward differences D{h}_v = v(t) - v(t - h) for each column.

    Lags are looked up by time within each storm, never by row position.
    With ``persistence`` the intensity column ``V`` gets the SHIPS-style
    terms D6_V = V(t) - V(t-6h) and D12_V = V(t-6h) - V(t-12h) instead.
    Rows lacking the longest lag are dropped unless ``drop_incomplete`` is
    False.
    """
    df = frame.copy()
    df["time"] = pd.to_datetime(df["time"], utc=True)
    keyed = df.set_index(["storm_id", "time"])
    if keyed.index.duplicated().any():
        raise DatasetError("duplicated (storm_id, time) rows")
    need = list(columns) + (["V"] if persistence else [])
    needed_cols = []
    for lag in sorted(set(lags) | ({6, 12} if persistence else set())):
        shifted = df[["storm_id", "time"] + need].copy()
        shifted["time"] = shifted["time"] + pd.Timedelta(hours=lag)
        shifted = shifted.rename(columns={c: f"{c}@{lag}" for c in need})
        df = df.merge(shifted, on=["storm_id", "time"], how="left")
    for lag in lags:
        for c in columns:
            df[f"D{lag}_{c}"] = df[c] - df[f"{c}@{lag}"]
            needed_cols.append(f"{c}@{lag}")
    if persistence:
        df["D6_V"] = df["V"] - df["V@6"]
        df["D12_V"] = df["V@6"] - df["V@12"]
        needed_cols += ["V@6", "V@12"]
    if drop_incomplete:
        df = df.dropna(subset=needed_cols)
    df = df.drop(columns=[c for c in df.columns if "@" in c])
    return df.sort_values(["storm_id", "time"]).reset_index(drop=True)


def orb_base_columns(orb_k=None) -> list[str]:
    orb_k = ORB_K if orb_k is None else orb_k
    return [f"{s}{i}" for s in ORB_K for i in range(1, orb_k.get(s, 0) + 1)]


def lagged(base: Sequence[str]) -> list[str]:
    return list(base) + [f"D{lag}_{c}" for lag in LAGS_H for c in base]


@dataclass(frozen=True)
class PredictorSet:
    name: str
    columns: tuple[str, ...]

    @classmethod
    def named(cls, name: str, orb_k=None) -> "PredictorSet":
        ships = lagged(SHIPS_BASE)
        orb = lagged(orb_base_columns(orb_k))
        table = {
            "SHIPS_only": ships,
            "ORB_only": orb,
            "SHIPS_plus_ORB": ships + orb,
            "SHIPS_plus_Persistence": list(PERSISTENCE) + ships,
        }
        if name not in table:
            raise DatasetError(f"unknown predictor set {name!r}; choose from {PREDICTOR_SETS}")
        return cls(name, tuple(table[name]))


@dataclass(frozen=True)
class LabeledObservation:
    storm_id: str
    time: pd.Timestamp
    basin: str
    y_ri: int
    y_rw: int
    predictors: dict
    split: str


@dataclass
class AssembledDataset:
    predictor_set: PredictorSet
    frame: pd.DataFrame
    report: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return list(self.predictor_set.columns)

    def observations(self) -> list[LabeledObservation]:
        cols = self.columns
        return [LabeledObservation(r.storm_id, r.time, r.basin, int(r.y_ri), int(r.y_rw),
                                   {c: float(getattr(r, c)) for c in cols}, r.split)
                for r in self.frame.itertuples(index=False)]

    def split(self, which: str) -> pd.DataFrame:
        return self.frame[self.frame["split"] == which]

    def to_csv(self, path):
        keys = ["storm_id", "time", "basin", "split", "y_ri", "y_rw"]
        out = self.frame[keys + self.columns].copy()
        out["time"] = pd.to_datetime(out["time"], utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        out.to_csv(path, index=False, float_format="%.17g")


def read_dataset_csv(path, predictor_set: str, orb_k=None) -> AssembledDataset:
    ps = PredictorSet.named(predictor_set, orb_k)
    df = pd.read_csv(path, dtype={"storm_id": str})
    df["time"] = pd.to_datetime(df["time"], utc=True)
    missing = [c for c in ps.columns if c not in df.columns]
    if missing:
        raise DatasetError(f"{path}: missing predictor columns {missing[:5]}...")
    return AssembledDataset(ps, df)


def track_frame(track: Sequence[TrackPoint], threshold: float = 25.0) -> pd.DataFrame:
    """6-hourly track rows with V, LAT, LON, basin and rapid-change labels."""
    rows = []
    for sid, pts in group_tracks(track).items():
        pts = [p for p in pts if p.time.hour % 6 == 0 and p.time.minute == 0]
        if not pts:
            continue
        lab = label_rapid_change([p.time for p in pts], [p.intensity for p in pts], threshold)
        start_year = pts[0].time.year
        for p, a, b in zip(pts, lab.ri, lab.rw):
            rows.append((sid, p.time, p.basin, p.intensity, p.lat, p.lon, int(a), int(b), start_year))
    df = pd.DataFrame(rows, columns=["storm_id", "time", "basin", "V", "LAT", "LON",
                                     "y_ri", "y_rw", "start_year"])
    df["time"] = pd.to_datetime(df["time"], utc=True)
    return df


def orb_wide(coefs: pd.DataFrame) -> pd.DataFrame:
    """Long coefficient table (storm_id,time,stat,alpha_1..) to wide RAD1-style columns."""
    if coefs.empty:
        return pd.DataFrame(columns=["storm_id", "time"])
    df = coefs.copy()
    df["time"] = pd.to_datetime(df["time"], utc=True)
    if df.duplicated(["storm_id", "time", "stat"]).any():
        raise DatasetError("duplicated (storm_id, time, stat) coefficient rows")
    alpha = [c for c in df.columns if c.startswith("alpha_")]
    parts = []
    for stat, g in df.groupby("stat", sort=False):
        g = g.set_index(["storm_id", "time"])[alpha]
        g = g.dropna(axis=1, how="all")
        g.columns = [f"{stat}{c.split('_')[1]}" for c in g.columns]
        parts.append(g)
    return pd.concat(parts, axis=1).reset_index()


def assemble(predictor_set: PredictorSet | str, orb: pd.DataFrame | None,
             ships: pd.DataFrame | None, track: Sequence[TrackPoint],
             keep: set | None = None, threshold: float = 25.0,
             split_year: int = SPLIT_YEAR, orb_k=None) -> AssembledDataset:
    """Join track labels, SHIPS and ORB coefficients into one modeling table.

    Parameters
    ----------
    orb : DataFrame or None
        Long ORB coefficient table ``storm_id,time,stat,alpha_1..``.
    ships : DataFrame or None
        SHIPS-like table ``storm_id,time,SHRD,...,U200``.
    keep : set of (storm_id, Timestamp), optional
        Keys that passed the sample filter; other rows only feed lags.
    """
    ps = predictor_set if isinstance(predictor_set, PredictorSet) else PredictorSet.named(predictor_set, orb_k)
    base = track_frame(track, threshold)
    report = {"predictor_set": ps.name, "n_track_rows": int(len(base))}

    bases = {_LAG.sub("", c) for c in ps.columns}
    uses_ships = bool(bases & set(SHIPS_VARS))
    uses_orb = any(c.rstrip("0123456789") in ORB_K for c in bases)
    missing_cols: list[str] = []
    df = base
    if uses_ships:
        sh = pd.DataFrame(columns=["storm_id", "time"]) if ships is None else ships.copy()
        missing_cols += [c for c in SHIPS_VARS if c not in sh.columns]
        if not missing_cols:
            sh["time"] = pd.to_datetime(sh["time"], utc=True)
            sh["storm_id"] = sh["storm_id"].astype(str)
            if sh.duplicated(["storm_id", "time"]).any():
                raise DatasetError("duplicated (storm_id, time) keys in SHIPS table")
            df = df.merge(sh[["storm_id", "time", *SHIPS_VARS]], on=["storm_id", "time"], how="left")
    if uses_orb:
        wide = orb_wide(orb if orb is not None else pd.DataFrame())
        need = orb_base_columns(orb_k)
        missing_cols += [c for c in need if c not in wide.columns]
        if not missing_cols:
            wide["storm_id"] = wide["storm_id"].astype(str)
            df = df.merge(wide[["storm_id", "time", *need]], on=["storm_id", "time"], how="left")
    if missing_cols:
        report.update(missing_columns=missing_cols, n_rows=0)
        return AssembledDataset(ps, pd.DataFrame(columns=["storm_id", "time", "basin", "split",
                                                          "y_ri", "y_rw", *ps.columns]), report)

    lag_base = [c for c in ps.columns if not _LAG.match(c) and c not in PERSISTENCE]
    df = add_lags(df, lag_base, persistence="V" in ps.columns, drop_incomplete=False)
    if keep is not None:
        keys = pd.MultiIndex.from_tuples([(s, pd.Timestamp(t)) for s, t in keep])
        df = df[pd.MultiIndex.from_frame(df[["storm_id", "time"]]).isin(keys)]
    n_before = len(df)
    df = df.dropna(subset=list(ps.columns))
    report["n_dropped_missing"] = int(n_before - len(df))
    df = df.assign(split=np.where(df["start_year"] < split_year, "train", "test"))
    df = df[["storm_id", "time", "basin", "split", "y_ri", "y_rw", *ps.columns]]
    df = df.sort_values(["storm_id", "time"]).reset_index(drop=True)
    report.update(n_rows=int(len(df)), n_train=int((df["split"] == "train").sum()),
                  n_test=int((df["split"] == "test").sum()),
                  ri_events=_events(df, "y_ri"), rw_events=_events(df, "y_rw"))
    return AssembledDataset(ps, df, report)


def _events(df: pd.DataFrame, col: str) -> int:
    """RI/RW events counted on contiguous 6-hourly runs within each storm."""
    total = 0
    for _, g in df.groupby("storm_id"):
        t = g["time"].to_numpy()
        y = g[col].to_numpy()
        run_start = np.ones(len(g), bool)
        run_start[1:] = (np.diff(t) != np.timedelta64(6, "h")) | (y[1:] != y[:-1])
        total += int(np.sum(run_start & (y == 1)))
    return total

"""Command-line pipeline: extract, basis, assemble, fit, eval, test, trajectory, synth.

Every stage reads a JSON config, writes its artifacts under ``output_dir``
and a manifest under ``output_dir/manifest``. Exit codes: 0 success,
2 validation error, 3 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd

from . import __version__
from .dataset import ORB_K, PREDICTOR_SETS, assemble, read_dataset_csv
from .eof import DegenerateDataError, fit_basis, load_basis, project, save_basis, smooth_coefficients
from .evaluation import EvaluationError, evaluate, permutation_test
from .features import (STATISTICS, FeatureConfig, FeatureError, orb_functions,
                       read_orb_csv, write_orb_csv)
from .lasso import FittedModel, LassoError, fit_classifier
from .pipeline import curve_values
from .stamps import (SampleFilter, StampFormatError, TrackError, apply_filter, format_time,
                     group_tracks, read_stamp, read_track_csv, write_stamp,
                     write_track_csv)

log = logging.getLogger("tcorb")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA = 0, 2, 3


class ValidationError(Exception):
    pass


class DataError(Exception):
    pass


DEFAULTS = {
    "basin": "NAL",
    "filter": {},
    "var_target": 0.9,
    "orb_k": dict(ORB_K),
    "predictor_sets": list(PREDICTOR_SETS),
    "target": "RI",
    "split_year": 2010,
    "folds": 10,
    "one_se": False,
    "paired_permutation": False,
    "add_one": False,
    "n_boot": 250,
    "n_perm": 1000,
    "roughness_target": 0.2,
    "jobs": 1,
}


# -- config & manifest ---------------------------------------------------------

def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if "seed" not in raw or not isinstance(raw["seed"], int):
        raise ValidationError("config must set an integer 'seed'")
    if "output_dir" not in raw:
        raise ValidationError("config must set 'output_dir'")
    cfg = {**DEFAULTS, **raw}
    base = path.parent
    for key in ("stamps_dir", "track_csv", "ships_csv", "output_dir"):
        if cfg.get(key):
            p = Path(cfg[key])
            cfg[key] = p if p.is_absolute() else base / p
    cfg["_hash"] = hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()
    if cfg["target"] not in ("RI", "RW"):
        raise ValidationError("target must be RI or RW")
    for name in cfg["predictor_sets"]:
        if name not in PREDICTOR_SETS:
            raise ValidationError(f"unknown predictor set {name!r}")
    try:
        cfg["filter_obj"] = SampleFilter(**cfg["filter"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad filter settings: {exc}") from None
    return cfg


def require_paths(cfg: dict, *keys):
    for key in keys:
        p = cfg.get(key)
        if p is None:
            raise ValidationError(f"config must set {key!r}")
        if not Path(p).exists():
            raise ValidationError(f"{key} does not exist: {p}")


def require_artifact(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {path}; run `tcorb {stage}` first")
    return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: dict, stage: str, inputs, extra: dict | None = None) -> Path:
    out = Path(cfg["output_dir"]) / "manifest"
    out.mkdir(parents=True, exist_ok=True)
    body = {
        "stage": stage,
        "version": __version__,
        "config_sha256": cfg["_hash"],
        "seed": cfg["seed"],
        "inputs": {str(p): file_hash(p) for p in sorted(map(str, inputs)) if Path(p).is_file()},
    }
    body.update(extra or {})
    path = out / f"{stage}.json"
    path.write_text(json.dumps(body, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _feature_config(cfg) -> FeatureConfig:
    return FeatureConfig(**cfg.get("features", {}))


# -- extract -------------------------------------------------------------------

def _extract_one(args):
    path, out_dir, fc_json = args
    raw = Path(path).read_bytes()
    key = hashlib.sha256(raw + fc_json.encode() + __version__.encode()).hexdigest()
    target = Path(out_dir) / Path(path).stem
    done, failed = target / "source.sha256", target / "failed.txt"
    stamp = read_stamp(path)
    if done.is_file() and done.read_text().strip() == key:
        return path, stamp, False, None
    if failed.is_file() and failed.read_text().split("\n", 1)[0] == key:
        return path, stamp, False, failed.read_text().split("\n", 1)[1].strip()
    target.mkdir(parents=True, exist_ok=True)
    try:
        fns = orb_functions(stamp, config=FeatureConfig(**json.loads(fc_json)))
    except FeatureError as exc:
        done.unlink(missing_ok=True)
        failed.write_text(f"{key}\n{exc}\n")
        return path, stamp, True, str(exc)
    failed.unlink(missing_ok=True)
    for stat, fn in fns.items():
        write_orb_csv(fn, target / f"{stat}.csv")
    done.write_text(key + "\n")
    return path, stamp, True, None


def cmd_extract(cfg: dict) -> int:
    require_paths(cfg, "stamps_dir")
    out = Path(cfg["output_dir"]) / "features"
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(Path(cfg["stamps_dir"]).glob("*.stamp"))
    fc_json = json.dumps(asdict(_feature_config(cfg)), sort_keys=True)
    jobs = [(str(f), str(out), fc_json) for f in files]
    rows, failures, written = [], [], 0
    try:
        if cfg["jobs"] > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(cfg["jobs"]) as pool:
                results = list(pool.map(_extract_one, jobs, chunksize=16))
        else:
            results = [_extract_one(j) for j in jobs]
    except StampFormatError as exc:
        raise DataError(str(exc)) from None
    for path, stamp, new, error in results:
        written += new
        row = (Path(path).stem, stamp.storm_id, format_time(stamp.time))
        if error is None:
            rows.append(row + (repr(stamp.missing_fraction),))
        else:
            failures.append(row + (error,))
    index = pd.DataFrame(rows, columns=["stem", "storm_id", "time", "missing_fraction"])
    index.to_csv(out / "index.csv", index=False)
    pd.DataFrame(failures, columns=["stem", "storm_id", "time", "error"]).to_csv(
        out / "failures.csv", index=False)
    counts = {"n_stamps": len(files), "n_written": written, "n_skipped": len(files) - written,
              "n_failed": len(failures)}
    write_manifest(cfg, "extract", files, {"counts": counts})
    print(json.dumps(counts))
    return EXIT_OK


# -- basis ---------------------------------------------------------------------

def _index(cfg) -> pd.DataFrame:
    path = require_artifact(Path(cfg["output_dir"]) / "features" / "index.csv", "extract")
    idx = pd.read_csv(path, dtype={"storm_id": str, "stem": str})
    idx["time"] = pd.to_datetime(idx["time"], utc=True)
    return idx


def _track(cfg):
    require_paths(cfg, "track_csv")
    try:
        return read_track_csv(cfg["track_csv"])
    except (TrackError, ValueError, KeyError) as exc:
        raise DataError(f"track file: {exc}") from None


def _kept_keys(cfg, track, idx) -> set:
    stubs = [SimpleNamespace(storm_id=r.storm_id, time=r.time.to_pydatetime(),
                             missing_fraction=float(r.missing_fraction)) for r in idx.itertuples()]
    return {(p.storm_id, pd.Timestamp(p.time)) for p, _ in apply_filter(track, stubs, cfg["filter_obj"])}


def _load_curves(cfg, stems, stat):
    base = Path(cfg["output_dir"]) / "features"
    fns = [read_orb_csv(base / s / f"{stat}.csv", stat) for s in stems]
    return fns


def cmd_basis(cfg: dict) -> int:
    track = _track(cfg)
    idx = _index(cfg)
    basin = cfg["basin"]
    basins = {sid: pts[0].basin for sid, pts in group_tracks(track).items()}
    # every stamp of the basin, labeled or not: the bases are unsupervised
    sel = idx[[basins.get(sid) == basin for sid in idx["storm_id"]]]
    if len(sel) < 2:
        raise DataError(f"only {len(sel)} stamps in basin {basin}")
    out = Path(cfg["output_dir"]) / "basis"
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for stat in STATISTICS:
        fns = _load_curves(cfg, sel["stem"], stat)
        k = (cfg["orb_k"] or {}).get(stat)
        try:
            basis = fit_basis(np.stack([curve_values(f) for f in fns]), cfg["var_target"], k,
                              stat, basin, fns[0].thresholds)
        except DegenerateDataError as exc:
            raise DataError(f"{stat}: {exc}") from None
        save_basis(basis, out / f"{basin}_{stat}.json")
        summary[stat] = {"K": basis.K, "explained": float(basis.explained_variance.sum())}
    write_manifest(cfg, "basis", [cfg["track_csv"], Path(cfg["output_dir"]) / "features" / "index.csv"],
                   {"n_samples": int(len(sel)), "bases": summary})
    print(json.dumps(summary))
    return EXIT_OK


# -- assemble ------------------------------------------------------------------

def coefficients_frame(cfg, idx) -> pd.DataFrame:
    basin = cfg["basin"]
    bdir = Path(cfg["output_dir"]) / "basis"
    bases = {s: load_basis(require_artifact(bdir / f"{basin}_{s}.json", "basis")) for s in STATISTICS}
    kmax = max(b.K for b in bases.values())
    rows = []
    for stat, basis in bases.items():
        fns = _load_curves(cfg, idx["stem"], stat)
        alpha = project(np.stack([curve_values(f) for f in fns]), basis)
        for r, a in zip(idx.itertuples(), alpha):
            rows.append([r.storm_id, format_time(r.time.to_pydatetime()), stat, *a,
                         *([np.nan] * (kmax - basis.K))])
    cols = ["storm_id", "time", "stat", *[f"alpha_{i + 1}" for i in range(kmax)]]
    return pd.DataFrame(rows, columns=cols).sort_values(["storm_id", "time", "stat"], kind="stable")


def cmd_assemble(cfg: dict) -> int:
    track = _track(cfg)
    idx = _index(cfg)
    out = Path(cfg["output_dir"])
    coefs = coefficients_frame(cfg, idx)
    coefs.to_csv(out / "coefficients.csv", index=False, float_format="%.17g")
    ships = None
    if cfg.get("ships_csv"):
        require_paths(cfg, "ships_csv")
        ships = pd.read_csv(cfg["ships_csv"], dtype={"storm_id": str})
    keep = _kept_keys(cfg, track, idx)
    track = [p for p in track if p.basin == cfg["basin"]]
    reports = {}
    for name in cfg["predictor_sets"]:
        data = assemble(name, coefs, ships, track, keep, cfg["filter_obj"].rapid_threshold,
                        cfg["split_year"], cfg["orb_k"])
        data.to_csv(out / f"dataset_{name}.csv")
        reports[name] = data.report
    (out / "assemble_report.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    inputs = [cfg["track_csv"], out / "coefficients.csv"] + ([cfg["ships_csv"]] if ships is not None else [])
    write_manifest(cfg, "assemble", inputs, {"reports": reports})
    print(json.dumps({k: v.get("n_rows", 0) for k, v in reports.items()}))
    empty = [k for k, v in reports.items() if not v.get("n_rows")]
    if empty:
        for k in empty:
            print(f"error: predictor set {k} has no rows "
                  f"(missing columns: {reports[k].get('missing_columns', [])})", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# -- fit / eval / test ---------------------------------------------------------

def _dataset(cfg, name):
    path = require_artifact(Path(cfg["output_dir"]) / f"dataset_{name}.csv", "assemble")
    return read_dataset_csv(path, name, cfg["orb_k"])


def _ycol(cfg):
    return "y_ri" if cfg["target"] == "RI" else "y_rw"


def _model_path(cfg, name) -> Path:
    return Path(cfg["output_dir"]) / "models" / f"{name}_{cfg['target']}.json"


def cmd_fit(cfg: dict) -> int:
    out = Path(cfg["output_dir"]) / "models"
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in cfg["predictor_sets"]:
        data = _dataset(cfg, name)
        train = data.split("train")
        try:
            model, cv = fit_classifier(train[data.columns].to_numpy(float), train[_ycol(cfg)].to_numpy(int),
                                       train["storm_id"].to_numpy(), data.columns, name, cfg["target"],
                                       cfg["folds"], cfg["seed"], cfg["one_se"])
        except LassoError as exc:
            raise DataError(f"{name}: {exc}") from None
        model.extra["folds"] = {s: int(f) for s, f in zip(train["storm_id"], cv.folds)}
        model.save(_model_path(cfg, name))
        nnz = (cv.coefs[:, 1:] != 0).sum(axis=1)
        pd.DataFrame({"lambda": cv.lambdas, "cv_deviance": cv.cv_mean, "cv_se": cv.cv_se,
                      "n_nonzero": nnz}).to_csv(out / f"{name}_{cfg['target']}_path.csv",
                                                index=False, float_format="%.17g")
        summary[name] = {"lambda": model.lam, "p_star": model.p_star, "n_nonzero": len(model.nonzero())}
    write_manifest(cfg, "fit", [Path(cfg["output_dir"]) / f"dataset_{n}.csv" for n in cfg["predictor_sets"]],
                   {"models": summary})
    print(json.dumps(summary))
    return EXIT_OK


def _test_predictions(cfg, name):
    model = FittedModel.load(require_artifact(_model_path(cfg, name), "fit"))
    test = _dataset(cfg, name).split("test")
    if test.empty:
        raise DataError(f"{name}: no test rows (storms starting in or after {cfg['split_year']})")
    return test[["storm_id", "time"]].assign(p=model.predict_proba(test), y=test[_ycol(cfg)].to_numpy()), model


def cmd_eval(cfg: dict) -> int:
    out = Path(cfg["output_dir"]) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name in cfg["predictor_sets"]:
        pred, model = _test_predictions(cfg, name)
        try:
            ev = evaluate(pred["p"].to_numpy(), pred["y"].to_numpy(), model.p_star, cfg["n_boot"], cfg["seed"])
        except EvaluationError as exc:
            raise DataError(f"{name}: {exc}") from None
        stem = f"{name}_{cfg['target']}"
        pd.DataFrame({"fpr": ev.roc.fpr, "tpr": ev.roc.tpr, "threshold": ev.roc.thresholds}).to_csv(
            out / f"{stem}_roc.csv", index=False, float_format="%.17g")
        report = {"predictor_set": name, "target": cfg["target"], "auc": ev.auc,
                  "auc_ci": [ev.ci.lower, ev.ci.upper], "ci_level": ev.ci.level, "n_boot": cfg["n_boot"],
                  "balanced_accuracy": ev.balanced_accuracy, "p_star": model.p_star,
                  "n_test": ev.n, "n_positive": ev.n_positive, "seed": cfg["seed"]}
        (out / f"{stem}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        summary[name] = {"auc": ev.auc, "ci": [ev.ci.lower, ev.ci.upper]}
    write_manifest(cfg, "eval", [_model_path(cfg, n) for n in cfg["predictor_sets"]], {"reports": summary})
    print(json.dumps(summary))
    return EXIT_OK


TESTS = {
    "test1": ("ORB_only", "SHIPS_only", "less"),
    "test2": ("SHIPS_plus_ORB", "SHIPS_only", "greater"),
}


def cmd_test(cfg: dict) -> int:
    out = Path(cfg["output_dir"]) / "tests"
    out.mkdir(parents=True, exist_ok=True)
    result = {"target": cfg["target"], "seed": cfg["seed"], "paired": cfg["paired_permutation"],
              "add_one": cfg["add_one"]}
    for label, (x, y, direction) in TESTS.items():
        px, _ = _test_predictions(cfg, x)
        py, _ = _test_predictions(cfg, y)
        both = px.merge(py, on=["storm_id", "time"], suffixes=("_x", "_y"))
        try:
            res = permutation_test(both["p_x"].to_numpy(), both["p_y"].to_numpy(), both["y_x"].to_numpy(),
                                   direction, cfg["n_perm"], cfg["seed"], cfg["paired_permutation"],
                                   cfg["add_one"])
        except EvaluationError as exc:
            raise DataError(f"{label}: {exc}") from None
        result[label] = {"x": x, "y": y, "direction": direction, "statistic": res.statistic,
                         "p_value": res.p_value, "B": res.B, "n": int(len(both))}
    (out / f"{cfg['target']}.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    write_manifest(cfg, "test", [_model_path(cfg, n) for t in TESTS.values() for n in t[:2]])
    print(json.dumps({k: result[k]["p_value"] for k in TESTS}))
    return EXIT_OK


# -- trajectory ----------------------------------------------------------------

def cmd_trajectory(cfg: dict, storm_id: str, statistic: str) -> int:
    if statistic not in STATISTICS:
        raise ValidationError(f"unknown statistic {statistic!r}")
    path = Path(cfg["output_dir"]) / "coefficients.csv"
    coefs = pd.read_csv(require_artifact(path, "assemble"), dtype={"storm_id": str})
    stat = coefs[coefs["stat"] == statistic].dropna(axis=1, how="all")
    alpha = [c for c in stat.columns if c.startswith("alpha_")]
    rows = stat[stat["storm_id"] == storm_id].sort_values("time")
    if rows.empty:
        raise DataError(f"no coefficients for storm {storm_id!r}")
    times = pd.to_datetime(rows["time"], utc=True)
    hours = ((times - times.iloc[0]) / pd.Timedelta(hours=1)).to_numpy()
    dt = float(np.median(np.diff(hours))) if len(hours) > 1 else 1.0
    out = rows[["time", *alpha]].reset_index(drop=True)
    for c in alpha:
        scale = float(stat[c].std(ddof=0)) or 1.0
        if len(rows) >= 3:
            sm = smooth_coefficients(rows[c].to_numpy(), cfg["roughness_target"], dt, scale).values
        else:
            sm = rows[c].to_numpy()
        out[f"smooth_{c}"] = sm
    target = Path(cfg["output_dir"]) / "trajectory"
    target.mkdir(parents=True, exist_ok=True)
    dest = target / f"{storm_id}_{statistic}.csv"
    out.to_csv(dest, index=False, float_format="%.17g")
    write_manifest(cfg, f"trajectory_{storm_id}_{statistic}", [path])
    print(dest)
    return EXIT_OK


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import diurnal_storm, make_dataset

    out = Path(args.out)
    (out / "stamps").mkdir(parents=True, exist_ok=True)
    truth = {"scenario": args.scenario, "seed": args.seed, "n_storms": args.n_storms,
             "env_signal": args.env_signal}
    if args.scenario == "diurnal":
        stamps = diurnal_storm(hours=args.hours, seed=args.seed, grid_step=args.grid_step,
                               half_width=args.half_width)
        from .stamps import TrackPoint
        track = [TrackPoint(s.storm_id, s.time, s.center_lat, s.center_lon, 80.0, 1000.0, "NAL")
                 for s in stamps if s.time.hour % 6 == 0]
        ships = None
    else:
        data = make_dataset(args.n_storms, args.scenario, args.seed, env_signal=args.env_signal,
                            eye_given_ri=args.eye_given_ri, env_given_ri=args.env_given_ri,
                            grid_step=args.grid_step, half_width=args.half_width)
        truth.update(eye_given_ri=args.eye_given_ri, env_given_ri=args.env_given_ri)
        if args.scenario == "sparse_signal":
            data.table.to_csv(out / "table.csv", index=False, float_format="%.17g")
            truth["beta"] = data.beta.tolist()
            (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n")
            print(out / "table.csv")
            return EXIT_OK
        stamps, track, ships = data.stamps, data.track, data.ships
        truth["episodes"] = [[s, format_time(t)] for s, t in data.episodes]
    from .stamps import stamp_filename
    for s in stamps:
        write_stamp(s, out / "stamps" / stamp_filename(s.storm_id, s.time))
    write_track_csv(track, out / "track.csv")
    config = {"seed": args.seed, "stamps_dir": "stamps", "track_csv": "track.csv", "output_dir": "out"}
    if ships is not None:
        sh = ships.copy()
        sh["time"] = [format_time(t) for t in sh["time"]]
        sh.to_csv(out / "ships.csv", index=False, float_format="%.17g")
        config["ships_csv"] = "ships.csv"
    else:
        config["predictor_sets"] = ["ORB_only"]
    (out / "truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n")
    print(out / "config.json")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

STAGES = {"extract": cmd_extract, "basis": cmd_basis, "assemble": cmd_assemble,
          "fit": cmd_fit, "eval": cmd_eval, "test": cmd_test}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcorb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (extract)")
    p = sub.add_parser("trajectory")
    p.add_argument("config")
    p.add_argument("--storm", required=True)
    p.add_argument("--stat", default="SIZE")
    p = sub.add_parser("synth")
    p.add_argument("--scenario", default="structure_driven",
                   choices=["null", "sparse_signal", "structure_driven", "diurnal"])
    p.add_argument("--n-storms", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--env-signal", type=float, default=0.0)
    p.add_argument("--eye-given-ri", type=float, default=0.8)
    p.add_argument("--env-given-ri", type=float, default=0.6)
    p.add_argument("--grid-step", type=float, default=0.08, help="degrees per pixel")
    p.add_argument("--half-width", type=int, default=40, help="pixels from center to edge")
    p.add_argument("--hours", type=int, default=96, help="length of the diurnal storm")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = load_config(args.config)
        if getattr(args, "jobs", None):
            cfg["jobs"] = args.jobs
        if args.command == "trajectory":
            return cmd_trajectory(cfg, args.storm, args.stat)
        return STAGES[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, StampFormatError, TrackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""In-memory pipeline stages shared by the CLI and the end-to-end checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .dataset import ORB_K, AssembledDataset, assemble
from .eof import EofBasis, fit_basis, project
from .evaluation import Evaluation, evaluate, permutation_test
from .features import DEFAULT_CONFIG, FeatureConfig, STATISTICS, orb_functions
from .lasso import FittedModel, fit_classifier
from .stamps import SampleFilter, Stamp, apply_filter


def curve_values(fn) -> np.ndarray:
    """The scalar curve used for PCA (SKEW direction is not decomposed)."""
    return np.asarray(fn.values, dtype=float)


def extract(stamps: Iterable[Stamp], config: FeatureConfig = DEFAULT_CONFIG) -> dict:
    """ORB functions keyed by (storm_id, time)."""
    return {(s.storm_id, s.time): orb_functions(s, config=config) for s in stamps}


def fit_bases(features: Mapping, keys, basin: str = "NAL", orb_k: Mapping | None = None,
              var_target: float = 0.9) -> dict[str, EofBasis]:
    """One basis per statistic; ``orb_k`` fixes K per statistic when given."""
    keys = sorted(keys)
    out = {}
    for stat in STATISTICS:
        curves = np.stack([curve_values(features[k][stat]) for k in keys])
        k = None if orb_k is None else orb_k.get(stat)
        th = features[keys[0]][stat].thresholds
        out[stat] = fit_basis(curves, var_target, k, stat, basin, th)
    return out


def coefficient_table(features: Mapping, bases: Mapping[str, EofBasis]) -> pd.DataFrame:
    """Long table storm_id, time, stat, alpha_1..alpha_Kmax."""
    kmax = max(b.K for b in bases.values())
    rows = []
    for (sid, t), fns in sorted(features.items()):
        for stat, basis in bases.items():
            a = project(curve_values(fns[stat]), basis)
            rows.append([sid, t, stat, *a, *([np.nan] * (kmax - basis.K))])
    return pd.DataFrame(rows, columns=["storm_id", "time", "stat",
                                       *[f"alpha_{i + 1}" for i in range(kmax)]])


def filter_keys(track, stamps, sample_filter: SampleFilter = SampleFilter()) -> set:
    return {(p.storm_id, p.time) for p, _ in apply_filter(track, stamps, sample_filter)}


@dataclass
class ModelRun:
    model: FittedModel
    data: AssembledDataset
    p_test: np.ndarray
    y_test: np.ndarray
    evaluation: Evaluation | None


def fit_and_evaluate(data: AssembledDataset, target: str = "RI", seed: int = 0,
                     one_se: bool = False, n_boot: int = 250) -> ModelRun:
    ycol = "y_ri" if target == "RI" else "y_rw"
    train, test = data.split("train"), data.split("test")
    cols = data.columns
    model, _ = fit_classifier(train[cols].to_numpy(float), train[ycol].to_numpy(int),
                              train["storm_id"].to_numpy(), cols, data.predictor_set.name,
                              target, seed=seed, one_se=one_se)
    p = model.predict_proba(test[cols])
    y = test[ycol].to_numpy(int)
    ev = evaluate(p, y, model.p_star, n_boot, seed) if 0 < y.sum() < y.size else None
    return ModelRun(model, data, p, y, ev)


def run_sets(track, stamps, ships, predictor_sets: Sequence[str], target: str = "RI",
             seed: int = 0, sample_filter: SampleFilter = SampleFilter(),
             orb_k: Mapping = ORB_K, config: FeatureConfig = DEFAULT_CONFIG,
             one_se: bool = False, n_boot: int = 250) -> dict[str, ModelRun]:
    """Extract, build bases on every stamp, assemble and fit each set."""
    keep = filter_keys(track, stamps, sample_filter)
    coefs = None
    if any("ORB" in s for s in predictor_sets):
        feats = extract(stamps, config)
        bases = fit_bases(feats, feats.keys(), orb_k=orb_k)
        coefs = coefficient_table(feats, bases)
    runs = {}
    for name in predictor_sets:
        data = assemble(name, coefs, ships, track, keep, sample_filter.rapid_threshold, orb_k=orb_k)
        runs[name] = fit_and_evaluate(data, target, seed, one_se, n_boot)
    return runs


def test_pair(run_x: ModelRun, run_y: ModelRun, direction: str, seed: int = 0,
              n_perm: int = 1000, paired: bool = False, add_one: bool = False):
    """Permutation test on two runs scored over the same test rows."""
    kx = run_x.data.split("test")[["storm_id", "time"]].reset_index(drop=True)
    ky = run_y.data.split("test")[["storm_id", "time"]].reset_index(drop=True)
    if not kx.equals(ky):
        merged = kx.assign(px=run_x.p_test, y=run_x.y_test).merge(
            ky.assign(py=run_y.p_test), on=["storm_id", "time"])
        return permutation_test(merged["px"].to_numpy(), merged["py"].to_numpy(),
                                merged["y"].to_numpy(), direction, n_perm, seed, paired, add_one)
    return permutation_test(run_x.p_test, run_y.p_test, run_x.y_test, direction, n_perm,
                            seed, paired, add_one)


test_pair.__test__ = False

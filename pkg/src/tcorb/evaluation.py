"""Skill scores and resampling tests for probabilistic classifiers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


N_BOOT = 250
N_PERM = 1000


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _check(p, y):
    p = np.asarray(p, dtype=float)
    y = np.asarray(y).astype(int)
    if p.shape != y.shape or p.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D and the same length")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise EvaluationError("labels must be 0/1")
    if y.size == 0 or y.min() == y.max():
        raise EvaluationError("labels contain a single class; AUC is undefined")
    return p, y


def roc_curve(p, y) -> RocCurve:
    """ROC over all distinct thresholds; AUC by the trapezoid rule.

    Tied scores form one step, which counts each tied positive/negative
    pair as one half.
    """
    p, y = _check(p, y)
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(ps)), ps.size - 1]
    tp = np.cumsum(ys)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / ys.sum()]
    fpr = np.r_[0.0, fp / (ys.size - ys.sum())]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, np.r_[np.inf, ps[last]], auc)


def roc_auc(p, y) -> float:
    return roc_curve(p, y).auc


def auc_fast(p, y) -> np.ndarray:
    """Mann-Whitney AUC along the last axis; ``p`` and ``y`` broadcast row-wise."""
    p = np.atleast_2d(np.asarray(p, float))
    y = np.atleast_2d(np.asarray(y, int))
    p, y = np.broadcast_arrays(p, y)
    r = rankdata(p, axis=-1)
    n1 = y.sum(axis=-1)
    n0 = y.shape[-1] - n1
    return ((r * y).sum(axis=-1) - n1 * (n1 + 1) / 2) / (n1 * n0)


def balanced_accuracy(pred, y) -> float:
    """Mean of sensitivity and specificity for hard 0/1 predictions."""
    pred = np.asarray(pred).astype(int)
    y = np.asarray(y).astype(int)
    pos, neg = y == 1, y == 0
    if not pos.any() or not neg.any():
        raise EvaluationError("labels contain a single class; balanced accuracy is undefined")
    return float(0.5 * (pred[pos].mean() + (1 - pred[neg]).mean()))


@dataclass(frozen=True)
class Interval:
    estimate: float
    lower: float
    upper: float
    level: float
    replicates: np.ndarray


def _round_streams(seed, n):
    """One independent generator per round, so results do not depend on scheduling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def bootstrap_auc_ci(p, y, n_boot: int = N_BOOT, level: float = 0.95,
                     seed: int | None = 0) -> Interval:
    """Pivotal bootstrap interval [2A - q_hi, 2A - q_lo] from row resamples.

    Resamples that draw a single class are redrawn from the same round's
    stream; more than 10 * n_boot redraws in total is an error.
    """
    p, y = _check(p, y)
    a = roc_auc(p, y)
    n = y.size
    idx = np.empty((n_boot, n), dtype=np.int64)
    redraws = 0
    for k, rng in enumerate(_round_streams(seed, n_boot)):
        while True:
            draw = rng.integers(0, n, n)
            yy = y[draw]
            if yy.min() != yy.max():
                break
            redraws += 1
            if redraws > 10 * n_boot:
                raise EvaluationError("too many one-class bootstrap resamples")
        idx[k] = draw
    reps = auc_fast(p[idx], y[idx])
    lo_q, hi_q = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2])
    return Interval(a, float(2 * a - hi_q), float(2 * a - lo_q), level, reps)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    B: int
    direction: str
    paired: bool
    null: np.ndarray

    __test__ = False


def permutation_test(x_preds, y_preds, y, direction: str = "greater", n_perm: int = N_PERM,
                     seed: int | None = 0, paired: bool = False,
                     add_one: bool = False) -> TestResult:
    """Permutation test on T = AUC(x_preds) - AUC(y_preds) over a shared test set.

    The pooled scheme stacks the 2N (prediction, label) pairs of both
    models, draws N of them without replacement as the first model and
    keeps the rest as the second. ``paired`` instead swaps the two
    predictions within each row with probability one half. The p-value is
    the fraction of rounds with T~ < T (``less``) or T~ > T (``greater``);
    ``add_one`` gives (1 + count) / (1 + B).
    """
    if direction not in ("less", "greater"):
        raise EvaluationError("direction must be 'less' or 'greater'")
    x_preds, y = _check(x_preds, y)
    y_preds = np.asarray(y_preds, dtype=float)
    if y_preds.shape != x_preds.shape:
        raise EvaluationError("prediction vectors differ in length")
    obs = roc_auc(x_preds, y) - roc_auc(y_preds, y)
    n = y.size
    streams = _round_streams(seed, n_perm)
    if paired:
        swap = np.stack([rng.random(n) < 0.5 for rng in streams])
        a = np.where(swap, y_preds, x_preds)
        b = np.where(swap, x_preds, y_preds)
        null = auc_fast(a, y) - auc_fast(b, y)
    else:
        scores = np.r_[x_preds, y_preds]
        labels = np.r_[y, y]
        perm = np.empty((n_perm, 2 * n), dtype=np.int64)
        for k, rng in enumerate(streams):
            while True:
                idx = rng.permutation(2 * n)
                l1, l2 = labels[idx[:n]], labels[idx[n:]]
                if l1.min() != l1.max() and l2.min() != l2.max():
                    break
            perm[k] = idx
        s, l = scores[perm], labels[perm]
        null = auc_fast(s[:, :n], l[:, :n]) - auc_fast(s[:, n:], l[:, n:])
    count = np.sum(null < obs) if direction == "less" else np.sum(null > obs)
    pv = (count + 1) / (n_perm + 1) if add_one else count / n_perm
    return TestResult(float(obs), float(pv), int(n_perm), direction, paired, null)


@dataclass(frozen=True)
class Evaluation:
    auc: float
    ci: Interval
    balanced_accuracy: float
    roc: RocCurve
    n: int
    n_positive: int


def evaluate(p, y, p_star: float, n_boot: int = N_BOOT, seed: int | None = 0) -> Evaluation:
    p, y = _check(p, y)
    roc = roc_curve(p, y)
    ci = bootstrap_auc_ci(p, y, n_boot, seed=seed)
    ba = balanced_accuracy((p > p_star).astype(int), y)
    return Evaluation(roc.auc, ci, ba, roc, int(y.size), int(y.sum()))

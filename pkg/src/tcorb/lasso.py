"""L1-penalized logistic regression with storm-grouped cross-validation.

The objective maximized is sum_i loglik_i(beta) - lam * ||beta||_1 on
standardized predictors, intercept unpenalized. Each outer step solves a
weighted lasso on the IRLS quadratic with covariance-mode coordinate
descent; a backtracking line search keeps the objective monotone.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

TOL = 1e-7
N_LAMBDA = 100
LAMBDA_RATIO = 1e-4


class LassoError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@njit(cache=True)
def _soft(z, t):
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_update(G, r, beta, lam, j):
    gjj = G[j, j]
    if gjj <= 0.0:
        return 0.0
    new = _soft(r[j] + gjj * beta[j], lam[j]) / gjj
    delta = new - beta[j]
    if delta != 0.0:
        beta[j] = new
        for k in range(beta.shape[0]):
            r[k] -= delta * G[k, j]
    return abs(delta)


@njit(cache=True)
def _polish(G, b, beta, lam, active, n_act):
    """Exact solve on a fixed active set and sign pattern; False if KKT fails."""
    if n_act == 0:
        return False
    idx = active[:n_act]
    A = np.empty((n_act, n_act))
    rhs = np.empty(n_act)
    for u in range(n_act):
        j = idx[u]
        rhs[u] = b[j] - lam[j] * np.sign(beta[j])
        for v in range(n_act):
            A[u, v] = G[j, idx[v]]
    try:
        sol = np.linalg.solve(A, rhs)
    except Exception:
        return False
    for u in range(n_act):
        if lam[idx[u]] > 0.0 and np.sign(sol[u]) != np.sign(beta[idx[u]]):
            return False
    trial = np.zeros_like(beta)
    for u in range(n_act):
        trial[idx[u]] = sol[u]
    r = b - G @ trial
    for j in range(beta.shape[0]):
        if trial[j] == 0.0 and abs(r[j]) > lam[j] * (1.0 + 1e-9) + 1e-12:
            return False
        if trial[j] != 0.0 and abs(r[j] - lam[j] * np.sign(trial[j])) > 1e-8 * (1.0 + abs(b[j])):
            return False
    beta[:] = trial
    return True


@njit(cache=True)
def _cd_quadratic(G, b, beta, lam, tol, max_sweeps, polish_every=10):
    """Minimize 0.5 b'Gb - b.b + sum lam_j |b_j| in place; returns sweeps used.

    Cyclic coordinate descent with soft-thresholding. Every ``polish_every``
    sweeps the stationarity equations on the current nonzero set are solved
    directly and kept only if they satisfy the optimality conditions, which
    ends ill-conditioned solves early without changing the minimizer.
    """
    d = beta.shape[0]
    r = b - G @ beta
    active = np.empty(d, dtype=np.int64)
    for sweep in range(max_sweeps):
        biggest = 0.0
        for j in range(d):
            biggest = max(biggest, _cd_update(G, r, beta, lam, j))
        if biggest < tol:
            return sweep + 1
        if polish_every > 0 and sweep % polish_every == polish_every - 1:
            n_act = 0
            for j in range(d):
                if beta[j] != 0.0:
                    active[n_act] = j
                    n_act += 1
            if _polish(G, b, beta, lam, active, n_act):
                return sweep + 1
    return max_sweeps


def weighted_lasso(X, z, w, lam, beta0=None, tol: float = 1e-12, max_sweeps: int = 10000):
    """Solve min 0.5 sum w_i (z_i - x_i.b)^2 + lam ||b||_1 without intercept.

    Exposed for the soft-threshold property: with an orthonormal weighted
    design each coefficient equals S(x_j' W z, lam).
    """
    X = np.ascontiguousarray(X, dtype=float)
    w = np.asarray(w, dtype=float)
    G = X.T @ (w[:, None] * X)
    b = X.T @ (w * np.asarray(z, float))
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, float)
    lv = np.full(X.shape[1], float(lam))
    _cd_quadratic(G, b, beta, lv, tol, max_sweeps)
    return beta


def _loglik(eta, y):
    # y*eta - log(1 + e^eta), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _sigmoid(eta):
    return np.exp(-np.logaddexp(0.0, -eta))


def penalized_objective(beta, X1, y, lam) -> float:
    """Sum log-likelihood minus lam times the L1 norm of the slopes."""
    return _loglik(X1 @ beta, y) - lam * np.abs(beta[1:]).sum()


def _fit_one(X1, y, lam, beta, tol=TOL, max_outer=200):
    """Proximal-Newton iterations at one lambda, warm-started from ``beta``."""
    d = X1.shape[1]
    ybar = y.mean()
    if lam >= np.max(np.abs(X1[:, 1:].T @ (y - ybar)), initial=0.0):
        # closed-form null model; avoids rounding residue at the boundary
        beta = np.zeros(d)
        beta[0] = np.log(ybar / (1 - ybar))
        return beta, True, 0
    lv = np.full(d, lam)
    lv[0] = 0.0
    obj = penalized_objective(beta, X1, y, lam)
    for it in range(max_outer):
        eta = X1 @ beta
        p = _sigmoid(eta)
        w = np.maximum(p * (1 - p), 1e-10)
        G = X1.T @ (w[:, None] * X1)
        b = X1.T @ (w * eta + (y - p))
        cand = beta.copy()
        _cd_quadratic(G, b, cand, lv, tol * 1e-2, 5000)
        step = cand - beta
        t = 1.0
        while True:
            trial = beta + t * step
            new_obj = penalized_objective(trial, X1, y, lam)
            if new_obj >= obj - 1e-12 * max(1.0, abs(obj)) or t < 1e-8:
                break
            t *= 0.5
        change = np.max(np.abs(trial - beta))
        beta, obj = trial, new_obj
        if change < tol:
            return beta, True, it + 1
    return beta, False, max_outer


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    sd: np.ndarray
    keep: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros_like(X)
        k = self.keep
        out[:, k] = (X[:, k] - self.mean[k]) / self.sd[k]
        return out


def standardize(X, columns=None) -> tuple[np.ndarray, Standardization]:
    """Population-SD scaling; constant columns are zeroed and excluded."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise LassoError("predictor matrix contains missing or non-finite values")
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(mean))
    if not keep.all():
        names = np.flatnonzero(~keep) if columns is None else [columns[i] for i in np.flatnonzero(~keep)]
        warnings.warn(f"zero-variance predictors excluded: {list(names)}", stacklevel=2)
    sd = np.where(keep, sd, 1.0)
    params = Standardization(mean, sd, keep)
    return params.apply(X), params


def lambda_max(Xs, y) -> float:
    """Smallest lambda at which every slope is zero."""
    y = np.asarray(y, float)
    return float(np.max(np.abs(Xs.T @ (y - y.mean()))))


def lambda_grid(Xs, y, n: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> np.ndarray:
    lm = lambda_max(Xs, y)
    if lm <= 0:
        lm = 1.0
    return np.geomspace(lm, lm * ratio, n)


def _check_y(y):
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise LassoError("labels must be 0/1")
    if y.min() == y.max():
        raise LassoError("labels contain a single class; a classifier cannot be fit")
    return y


def lasso_path(Xs, y, lambdas) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients (L, d+1) with intercept first, warm-started down the path."""
    y = _check_y(y)
    X1 = np.column_stack([np.ones(len(y)), Xs])
    ybar = y.mean()
    beta = np.zeros(X1.shape[1])
    beta[0] = np.log(ybar / (1 - ybar))
    out = np.empty((len(lambdas), X1.shape[1]))
    conv = np.empty(len(lambdas), dtype=bool)
    for i, lam in enumerate(lambdas):
        beta, conv[i], _ = _fit_one(X1, y, float(lam), beta.copy())
        out[i] = beta
    if not conv.all():
        warnings.warn(f"{int((~conv).sum())} path points did not converge; "
                      "data may be separable, use a positive lambda", ConvergenceWarning, stacklevel=2)
    return out, conv


def fit_lasso(Xs, y, lam: float, beta0=None):
    y = _check_y(y)
    X1 = np.column_stack([np.ones(len(y)), Xs])
    if beta0 is None:
        beta0 = np.zeros(X1.shape[1])
        beta0[0] = np.log(y.mean() / (1 - y.mean()))
    beta, ok, _ = _fit_one(X1, y, float(lam), np.array(beta0, float))
    if not ok:
        warnings.warn("lasso fit did not converge; data may be separable, use a positive lambda",
                      ConvergenceWarning, stacklevel=2)
    return beta, ok


def storm_folds(groups, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Fold index per row; every storm lands in exactly one fold."""
    groups = np.asarray(groups).astype(str)
    storms = np.unique(groups)
    if len(storms) < 2:
        raise LassoError("cross-validation needs at least two storms")
    if len(storms) < n_folds:
        warnings.warn(f"only {len(storms)} storms; using {len(storms)} folds", stacklevel=2)
        n_folds = len(storms)
    order = np.random.default_rng(seed).permutation(len(storms))
    fold_of = {storms[k]: pos % n_folds for pos, k in enumerate(order)}
    return np.array([fold_of[g] for g in groups])


def binomial_deviance(p, y) -> float:
    p = np.clip(np.asarray(p, float), 1e-15, 1 - 1e-15)
    y = np.asarray(y, float)
    return float(-2 * np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class CvResult:
    lambdas: np.ndarray
    coefs: np.ndarray           # (L, d+1) full-data path
    cv_mean: np.ndarray
    cv_se: np.ndarray
    folds: np.ndarray
    best_index: int
    oof: np.ndarray             # out-of-fold probabilities at the chosen lambda
    converged: np.ndarray       # full-data path convergence flags

    @property
    def lam(self) -> float:
        return float(self.lambdas[self.best_index])


def cross_validate(Xs, y, groups, n_folds: int = 10, seed: int = 0, lambdas=None,
                   one_se: bool = False) -> CvResult:
    """Storm-grouped K-fold CV over a lambda path, scored by held-out deviance."""
    y = _check_y(y)
    lambdas = lambda_grid(Xs, y) if lambdas is None else np.asarray(lambdas, float)
    folds = storm_folds(groups, n_folds, seed)
    k = folds.max() + 1
    dev = np.full((k, len(lambdas)), np.nan)
    oof = np.full((len(lambdas), len(y)), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        for f in range(k):
            tr, te = folds != f, folds == f
            if y[tr].min() == y[tr].max():
                continue
            path, _ = lasso_path(Xs[tr], y[tr], lambdas)
            p = _sigmoid(path[:, :1] + path[:, 1:] @ Xs[te].T)
            oof[:, te] = p
            dev[f] = [binomial_deviance(pi, y[te]) for pi in p]
    used = ~np.isnan(dev[:, 0])
    mean = dev[used].mean(axis=0)
    se = dev[used].std(axis=0, ddof=1) / np.sqrt(used.sum()) if used.sum() > 1 else np.zeros_like(mean)
    best = int(np.argmin(mean))
    if one_se:
        ok = np.flatnonzero(mean <= mean[best] + se[best])
        best = int(ok.min())  # lambdas are descending: the sparsest admissible model
    coefs, conv = lasso_path(Xs, y, lambdas)
    return CvResult(lambdas, coefs, mean, se, folds, best, oof[best], conv)


def choose_cutoff(p, y) -> float:
    """Cutoff maximizing balanced accuracy of the rule p > cutoff.

    Candidates are midpoints between consecutive distinct probabilities plus
    one point below the smallest and one above the largest; ties go to the
    larger cutoff.
    """
    from .evaluation import balanced_accuracy

    p = np.asarray(p, float)
    y = np.asarray(y, int)
    u = np.unique(p)
    cands = np.concatenate([[u[0] / 2], (u[1:] + u[:-1]) / 2, [(u[-1] + 1) / 2]])
    best, best_c = -np.inf, cands[0]
    for c in cands:
        ba = balanced_accuracy((p > c).astype(int), y)
        if ba >= best:
            best, best_c = ba, c
    return float(best_c)


@dataclass
class FittedModel:
    predictor_set: str
    target: str
    columns: list
    intercept: float
    coef: np.ndarray
    lam: float
    p_star: float
    standardization: Standardization
    seed: int = 0
    converged: bool = True
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def nonzero(self) -> list[str]:
        return [c for c, b in zip(self.columns, self.coef) if b != 0]

    def predict_proba(self, X) -> np.ndarray:
        """Probabilities for a DataFrame holding the model columns, or an array."""
        if hasattr(X, "columns"):
            missing = [c for c in self.columns if c not in X.columns]
            if missing:
                raise LassoError(f"predictor columns missing: {missing[:5]}")
            X = X[self.columns].to_numpy(float)
        X = np.asarray(X, float)
        if X.ndim != 2 or X.shape[1] != len(self.columns):
            raise LassoError(f"expected {len(self.columns)} predictor columns, got {X.shape}")
        Xs = self.standardization.apply(X)
        return _sigmoid(self.intercept + Xs @ self.coef)

    def to_json(self) -> dict:
        s = self.standardization
        return {
            "predictor_set": self.predictor_set, "target": self.target, "columns": list(self.columns),
            "intercept": self.intercept, "coef": self.coef.tolist(), "lambda": self.lam,
            "p_star": self.p_star, "seed": self.seed, "converged": self.converged,
            "fingerprint": self.fingerprint,
            "standardization": {"mean": s.mean.tolist(), "sd": s.sd.tolist(), "keep": s.keep.tolist()},
            "extra": self.extra,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FittedModel":
        s = d["standardization"]
        st = Standardization(np.asarray(s["mean"], float), np.asarray(s["sd"], float),
                             np.asarray(s["keep"], bool))
        return cls(d["predictor_set"], d["target"], list(d["columns"]), float(d["intercept"]),
                   np.asarray(d["coef"], float), float(d["lambda"]), float(d["p_star"]), st,
                   int(d.get("seed", 0)), bool(d.get("converged", True)), d.get("fingerprint", ""),
                   d.get("extra", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def fingerprint(X, y) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=float).tobytes())
    h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return h.hexdigest()[:16]


def fit_classifier(X, y, groups, columns, predictor_set: str = "", target: str = "RI",
                   n_folds: int = 10, seed: int = 0, one_se: bool = False,
                   lambdas=None) -> tuple[FittedModel, CvResult]:
    """Standardize, cross-validate lambda, refit on all rows and pick p*.

    The cutoff is chosen on the out-of-fold probabilities at the selected
    lambda so it is not tuned on in-sample fits.
    """
    X = np.asarray(X, float)
    y = _check_y(y)
    if X.shape[0] != y.size:
        raise LassoError("X and y differ in length")
    Xs, params = standardize(X, list(columns))
    cv = cross_validate(Xs, y, groups, n_folds, seed, lambdas, one_se)
    beta = cv.coefs[cv.best_index]
    oof = cv.oof
    ok = np.isfinite(oof)
    p_star = choose_cutoff(oof[ok], y[ok]) if ok.any() else 0.5
    model = FittedModel(predictor_set, target, list(columns), float(beta[0]), beta[1:].copy(),
                        cv.lam, p_star, params, seed, bool(cv.converged[cv.best_index]),
                        fingerprint(X, y),
                        {"cv_deviance": float(cv.cv_mean[cv.best_index]), "one_se": one_se})
    return model, cv

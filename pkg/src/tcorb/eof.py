"""Empirical orthogonal functions of ORB functions.

Curves from one basin and one statistic are stacked into an n x d matrix,
centered on the basin mean, and decomposed with an SVD. The leading
right singular vectors are the EOFs; projections onto them are the ORB
coefficients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class EofBasis:
    statistic: str
    basin: str
    thresholds: np.ndarray
    mean_curve: np.ndarray
    eofs: np.ndarray                 # K x d, orthonormal rows
    explained_variance: np.ndarray   # fractions, length K
    eigenvalues: np.ndarray          # a_i^2 / n, length K
    n_samples: int

    @property
    def K(self) -> int:
        return self.eofs.shape[0]

    def to_json(self) -> dict:
        return {
            "statistic": self.statistic,
            "basin": self.basin,
            "n_samples": self.n_samples,
            "thresholds": self.thresholds.tolist(),
            "mean_curve": self.mean_curve.tolist(),
            "eofs": self.eofs.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EofBasis":
        eofs = np.asarray(d["eofs"], float).reshape(-1, len(d["thresholds"]))
        return cls(d["statistic"], d["basin"], np.asarray(d["thresholds"], float),
                   np.asarray(d["mean_curve"], float), eofs,
                   np.asarray(d["explained_variance"], float),
                   np.asarray(d["eigenvalues"], float), int(d["n_samples"]))


def save_basis(basis: EofBasis, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(basis.to_json(), indent=1) + "\n")
    return path


def load_basis(path) -> EofBasis:
    return EofBasis.from_json(json.loads(Path(path).read_text()))


def fit_basis(curves, var_target: float = 0.90, K: int | None = None,
              statistic: str = "", basin: str = "", thresholds=None) -> EofBasis:
    """PCA of densely sampled ORB functions.

    Parameters
    ----------
    curves : array_like, shape (n, d)
        One curve per row, all on the same threshold grid.
    var_target : float
        Cumulative explained-variance fraction that fixes K.
    K : int, optional
        Explicit number of EOFs; overrides ``var_target``.

    Each EOF is signed so that its largest-magnitude entry is positive.
    """
    z = np.asarray(curves, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need an (n, d) matrix with n >= 2")
    if not np.all(np.isfinite(z)):
        raise ValueError("curves contain non-finite entries")
    n, d = z.shape
    mean = z.mean(axis=0)
    zc = z - mean
    _, a, vt = np.linalg.svd(zc, full_matrices=False)
    power = a ** 2
    total = power.sum()
    scale = max(np.abs(z).max(), 1.0)
    if total <= (1e-12 * scale) ** 2 * n * d:
        raise DegenerateDataError("curves have no variance about their mean")
    frac = power / total
    rank = int(np.sum(a > a[0] * max(n, d) * np.finfo(float).eps))
    if K is None:
        if not 0 < var_target <= 1:
            raise ValueError("var_target must lie in (0, 1]")
        K = int(np.searchsorted(np.cumsum(frac), var_target - 1e-12) + 1)
        K = min(K, rank)
    elif not 1 <= K <= rank:
        raise DegenerateDataError(f"requested K={K} but the centered data have rank {rank}")
    eofs = vt[:K].copy()
    lead = np.argmax(np.abs(eofs), axis=1)
    signs = np.sign(eofs[np.arange(K), lead])
    eofs *= signs[:, None]
    th = np.arange(d, dtype=float) if thresholds is None else np.asarray(thresholds, float)
    return EofBasis(statistic, basin, th, mean, eofs, frac[:K], power[:K] / n, n)


def _check_grid(x, basis: EofBasis, what: str):
    if np.shape(x)[-1] != basis.eofs.shape[1]:
        raise ValueError(f"{what} has {np.shape(x)[-1]} samples, basis grid has {basis.eofs.shape[1]}")


def project(curve, basis: EofBasis, thresholds=None) -> np.ndarray:
    """ORB coefficients alpha_i = <curve - mean, eof_i>; accepts (d,) or (n, d)."""
    c = np.asarray(curve, dtype=float)
    _check_grid(c, basis, "curve")
    if thresholds is not None and not np.allclose(thresholds, basis.thresholds, rtol=0, atol=1e-9):
        raise ValueError("curve thresholds differ from the basis grid")
    return (c - basis.mean_curve) @ basis.eofs.T


def reconstruct(alpha, basis: EofBasis) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if np.shape(a)[-1] != basis.K:
        raise ValueError(f"expected {basis.K} coefficients, got {np.shape(a)[-1]}")
    return basis.mean_curve + a @ basis.eofs


# -- time smoothing -------------------------------------------------------------

def roughness(series, dt: float = 1.0, scale: float = 1.0) -> float:
    """Mean |second central difference| / dt^2, in units of ``scale``."""
    s = np.asarray(series, dtype=float) / scale
    if s.size < 3:
        return 0.0
    return float(np.mean(np.abs(s[2:] - 2 * s[1:-1] + s[:-2])) / dt ** 2)


def ewma(series, weight: float) -> np.ndarray:
    """Causal EWMA: s_t = w x_t + (1 - w) s_{t-1}, s_0 = x_0 (along axis 0)."""
    x = np.asarray(series, dtype=float)
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.shape[0]):
        out[t] = weight * x[t] + (1 - weight) * out[t - 1]
    return out


@dataclass(frozen=True)
class SmoothResult:
    values: np.ndarray
    weight: float
    roughness: float
    raw_roughness: float
    attained: bool


def smooth_coefficients(series, roughness_target: float = 0.2, dt: float = 1.0,
                        scale: float | None = None, tol: float = 1e-10) -> SmoothResult:
    """EWMA whose weight is bisected until the roughness hits the target.

    Roughness is measured in units of ``scale`` (the basin standard
    deviation of the coefficient; the series' own SD when omitted) per
    hour squared. A series already smoother than the target comes back
    unchanged with ``attained=False``.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("need a 1-D series with at least 3 points")
    if scale is None:
        scale = float(x.std())
    raw = roughness(x, dt, scale) if scale > 0 else 0.0
    if raw <= roughness_target:
        return SmoothResult(x.copy(), 1.0, raw, raw, False)
    lo, hi = 0.0, 1.0  # roughness(lo) < target < roughness(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if roughness(ewma(x, mid), dt, scale) > roughness_target:
            hi = mid
        else:
            lo = mid
    w = 0.5 * (lo + hi)
    sm = ewma(x, w)
    return SmoothResult(sm, w, roughness(sm, dt, scale), raw, True)

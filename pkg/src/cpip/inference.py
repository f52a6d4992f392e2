"""Pointwise Wald intervals and multiplier-bootstrap uniform bands."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .estimation import EstimateCurve

DEFAULT_B = 1000
DEFAULT_ALPHA = 0.05
_CHUNK = 256


class DegenerateVarianceError(FloatingPointError):
    pass


def _studentized(eif_matrix, mu, sigma) -> np.ndarray:
    D = np.atleast_2d(np.asarray(eif_matrix, dtype=float))
    if D.shape[0] == 1 and np.ndim(eif_matrix) == 1:
        D = D.T
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if D.shape[1] != mu.size or mu.size != sigma.size:
        raise ValueError("eif_matrix columns, mu and sigma must align")
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise DegenerateVarianceError("degenerate EIF variance: some sigma is zero")
    return (D - mu) / sigma


def sup_statistics(
    eif_matrices: Sequence, mus: Sequence, sigmas: Sequence, B: int = DEFAULT_B, seed: int = 0
) -> np.ndarray:
    """Bootstrap sup statistics, shape ``(len(eif_matrices), B)``.

    All matrices share each draw's multiplier vector, so joint dependence
    across the grid and across policies is kept.
    """
    if B < 100:
        raise ValueError("need at least 100 bootstrap draws")
    Z = [_studentized(D, m, s) for D, m, s in zip(eif_matrices, mus, sigmas)]
    n = Z[0].shape[0]
    if any(z.shape[0] != n for z in Z):
        raise ValueError("all influence matrices need the same rows")
    rng = np.random.default_rng(seed)
    out = np.empty((len(Z), B))
    root_n = math.sqrt(n)
    for start in range(0, B, _CHUNK):
        stop = min(B, start + _CHUNK)
        chi = rng.standard_normal((stop - start, n))
        for k, z in enumerate(Z):
            out[k, start:stop] = np.abs(chi @ z / root_n).max(axis=1)
    return out


def order_statistic_quantile(values: np.ndarray, alpha: float) -> float:
    """Empirical ``1 - alpha`` quantile as the ``ceil((1 - alpha) B)``-th order statistic."""
    values = np.sort(np.asarray(values))
    k = math.ceil((1.0 - alpha) * len(values) - 1e-9)
    return float(values[max(k, 1) - 1])


def multiplier_critical_value(
    eif_matrix, mu, sigma, B: int = DEFAULT_B, alpha: float = DEFAULT_ALPHA, seed: int = 0
) -> float:
    """Critical value for a uniform band over the columns of ``eif_matrix``."""
    stats = sup_statistics([eif_matrix], [mu], [sigma], B, seed)[0]
    return order_statistic_quantile(stats, alpha)


@dataclass
class BandResult:
    policy: str
    delta_grid: np.ndarray
    estimates: np.ndarray
    sigma: np.ndarray
    lower_pointwise: np.ndarray
    upper_pointwise: np.ndarray
    lower_uniform: np.ndarray
    upper_uniform: np.ndarray
    critical_value: float
    pointwise_value: float
    n: int
    B: int | None
    alpha: float

    def metadata(self) -> dict:
        return {
            "policy": self.policy,
            "n": self.n,
            "B": self.B,
            "alpha": self.alpha,
            "critical_value": self.critical_value,
            "pointwise_value": self.pointwise_value,
        }


def wald_interval(mu, sigma, n: int, xi: float) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=float)
    half = xi * np.asarray(sigma, dtype=float) / math.sqrt(n)
    return mu - half, mu + half


def build_bands(
    curve: EstimateCurve,
    xi_S: float,
    xi_T: float | None,
    n: int | None = None,
    *,
    alpha: float = DEFAULT_ALPHA,
    B: int | None = None,
) -> dict[str, BandResult]:
    """Pointwise and uniform bands ``mu -/+ xi sigma / sqrt(n)`` per policy."""
    n = curve.n if n is None else n
    z = float(norm.ppf(1.0 - alpha / 2.0))
    out = {}
    for policy, mu, sigma, xi in (
        ("S", curve.mu_S_onestep, curve.sigma_S, xi_S),
        ("T", curve.mu_T_onestep, curve.sigma_T, xi_T),
    ):
        if xi is None:
            continue
        lo_p, hi_p = wald_interval(mu, sigma, n, z)
        lo_u, hi_u = wald_interval(mu, sigma, n, xi)
        out[policy] = BandResult(policy, np.array(curve.delta_grid), np.array(mu),
                                 np.array(sigma), lo_p, hi_p, lo_u, hi_u, float(xi), z,
                                 n, B, alpha)
    return out


def infer(
    curve: EstimateCurve, B: int = DEFAULT_B, alpha: float = DEFAULT_ALPHA, seed: int = 0
) -> dict[str, BandResult]:
    """Bootstrap critical values for both policies with shared multipliers, then bands."""
    mats = [curve.eif_S]
    mus = [curve.mu_S_onestep]
    sigmas = [curve.sigma_S]
    if curve.has_target:
        mats.append(curve.eif_T)
        mus.append(curve.mu_T_onestep)
        sigmas.append(curve.sigma_T)
    stats = sup_statistics(mats, mus, sigmas, B, seed)
    xis = [order_statistic_quantile(s, alpha) for s in stats]
    return build_bands(curve, xis[0], xis[1] if len(xis) > 1 else None,
                       alpha=alpha, B=B)


BAND_COLUMNS = ("delta", "policy", "estimate", "sigma", "lower_pointwise",
                "upper_pointwise", "lower_uniform", "upper_uniform")


def bands_to_rows(bands: dict[str, BandResult]) -> list[list]:
    rows = []
    for policy, band in bands.items():
        for j, d in enumerate(band.delta_grid):
            rows.append([float(d), policy, band.estimates[j], band.sigma[j],
                         band.lower_pointwise[j], band.upper_pointwise[j],
                         band.lower_uniform[j], band.upper_uniform[j]])
    return rows


def bands_metadata_json(bands: dict[str, BandResult], seed: int) -> str:
    meta = {p: b.metadata() for p, b in bands.items()}
    meta["seed"] = seed
    return json.dumps(meta, indent=2, sort_keys=True)

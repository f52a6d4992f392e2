"""Plug-in and one-step estimators of expected outcomes under tilted policies.

``mu_S(delta)`` is the expected outcome when treatment is drawn from the
tilted source marginal and ``mu_T(delta)`` when it is drawn from the tilted
target marginal. One-step estimates are averages of the uncentered
efficient influence function evaluated with cross-fitted nuisances.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nuisance import (
    DEFAULT_FLOOR,
    Dataset,
    FoldAssignment,
    NuisancePair,
    cross_fit_predict,
    fit_nuisances,
)
from .tilt import TiltConfig, tilt_weights, tilted_marginals

POSITIVITY_THRESHOLD = 100.0


@dataclass(frozen=True)
class EifRow:
    """Summands of both uncentered influence functions (scalars or arrays)."""

    s1: np.ndarray
    s2: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray

    @property
    def d_source(self):
        return self.s1 + self.s2

    @property
    def d_target(self):
        return self.t1 + self.t2 + self.t3


def _prepare(y, a, pi_hat, q_hat):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=int))
    pi_hat = np.atleast_2d(np.asarray(pi_hat, dtype=float))
    q_hat = np.atleast_2d(np.asarray(q_hat, dtype=float))
    if not (len(y) == len(a) == len(pi_hat) == len(q_hat)):
        raise ValueError("y, a, pi_hat and q_hat must have matching rows")
    return y, a, pi_hat, q_hat


def _squeeze(*arrays, scalar: bool):
    if scalar:
        return tuple(float(x[0]) for x in arrays)
    return arrays


def eif_source(y, a, pi_hat, q_hat, config: TiltConfig, delta: float, *, _tilts=None):
    """Summands ``(D1, D2)`` of the source-policy influence function.

    ``D1 = pi_star(A)/pi(A) * (Y - sum_a pi_star(a) Q(a))`` and
    ``D2 = sum_a pi_star(a) Q(a)``.
    """
    scalar = np.ndim(y) == 0
    y, a, pi_hat, q_hat = _prepare(y, a, pi_hat, q_hat)
    pi_star = tilted_marginals(pi_hat, config, delta)[0] if _tilts is None else _tilts[0]
    rows = np.arange(len(y))
    ratio = pi_star[rows, a] / pi_hat[rows, a]
    d2 = np.sum(pi_star * q_hat, axis=1)
    d1 = ratio * (y - d2)
    return _squeeze(d1, d2, scalar=scalar)


def eif_target(y, a, pi_hat, q_hat, config: TiltConfig, delta: float, *, _tilts=None):
    """Summands ``(D1, D2, D3)`` of the target-policy influence function.

    ``D1 = nu_star(A)/pi(A) * (Y - Q(A))``,
    ``D2 = (2 - pi_star(A)/pi(A)) * sum_a nu_star(a) Q(a)`` and
    ``D3 = pi_star(A)/pi(A) rho(A) Q(A) - sum_a pi_star(a) rho(a) Q(a)``.
    Only defined for destination costs.
    """
    if not config.cost.is_destination:
        raise ValueError("target EIF requires destination costs")
    scalar = np.ndim(y) == 0
    y, a, pi_hat, q_hat = _prepare(y, a, pi_hat, q_hat)
    pi_star, nu_star = tilted_marginals(pi_hat, config, delta) if _tilts is None else _tilts
    rho = tilt_weights(config, delta).rho
    rows = np.arange(len(y))
    pi_a = pi_hat[rows, a]
    src_ratio = pi_star[rows, a] / pi_a
    q_a = q_hat[rows, a]
    d1 = nu_star[rows, a] / pi_a * (y - q_a)
    d2 = (2.0 - src_ratio) * np.sum(nu_star * q_hat, axis=1)
    d3 = src_ratio * rho[a] * q_a - np.sum(pi_star * rho * q_hat, axis=1)
    return _squeeze(d1, d2, d3, scalar=scalar)


def eif(y, a, pi_hat, q_hat, config: TiltConfig, delta: float) -> EifRow:
    tilts = tilted_marginals(np.atleast_2d(pi_hat), config, delta)
    s = eif_source(y, a, pi_hat, q_hat, config, delta, _tilts=tilts)
    t = eif_target(y, a, pi_hat, q_hat, config, delta, _tilts=tilts)
    return EifRow(*s, *t)


def plugin_values(pi_hat, q_hat, config: TiltConfig, delta: float) -> tuple[float, float]:
    """Plug-in estimates from per-row propensity and outcome predictions."""
    pi_star, nu_star = tilted_marginals(pi_hat, config, delta)
    q_hat = np.asarray(q_hat, dtype=float)
    return float(np.mean(np.sum(pi_star * q_hat, axis=1))), float(
        np.mean(np.sum(nu_star * q_hat, axis=1))
    )


def plugin_functionals(
    data: Dataset,
    folds: FoldAssignment,
    nuisances: Sequence[NuisancePair],
    config: TiltConfig,
    delta: float,
) -> tuple[float, float]:
    pi_hat, q_hat = cross_fit_predict(data, folds, nuisances)
    return plugin_values(pi_hat, q_hat, config, delta)


@dataclass(frozen=True)
class EstimatePoint:
    delta: float
    mu_S_plugin: float
    mu_T_plugin: float
    mu_S_onestep: float
    mu_T_onestep: float
    sigma_S: float
    sigma_T: float


@dataclass
class EstimateCurve:
    """Estimates over a delta grid, with the influence-function matrices.

    ``eif_S`` and ``eif_T`` have shape ``(n, len(delta_grid))``. Target
    quantities are NaN when the configuration uses a general cost matrix.
    """

    delta_grid: np.ndarray
    mu_S_plugin: np.ndarray
    mu_T_plugin: np.ndarray
    mu_S_onestep: np.ndarray
    mu_T_onestep: np.ndarray
    sigma_S: np.ndarray
    sigma_T: np.ndarray
    eif_S: np.ndarray
    eif_T: np.ndarray

    @property
    def n(self) -> int:
        return self.eif_S.shape[0]

    @property
    def has_target(self) -> bool:
        return bool(np.all(np.isfinite(self.mu_T_onestep)))

    @property
    def points(self) -> list[EstimatePoint]:
        return [
            EstimatePoint(float(d), *(float(v[j]) for v in (
                self.mu_S_plugin, self.mu_T_plugin, self.mu_S_onestep,
                self.mu_T_onestep, self.sigma_S, self.sigma_T)))
            for j, d in enumerate(self.delta_grid)
        ]


def curve_from_predictions(y, a, pi_hat, q_hat, config: TiltConfig, delta_grid=None) -> EstimateCurve:
    """Plug-in and one-step curves from precomputed nuisance predictions."""
    y, a, pi_hat, q_hat = _prepare(y, a, pi_hat, q_hat)
    grid = config.delta_grid if delta_grid is None else np.asarray(delta_grid, dtype=float)
    n, G = len(y), len(grid)
    target = config.cost.is_destination
    D_S = np.empty((n, G))
    D_T = np.full((n, G), np.nan)
    plug_S = np.empty(G)
    plug_T = np.full(G, np.nan)
    for j, delta in enumerate(grid):
        tilts = tilted_marginals(pi_hat, config, delta)
        s1, s2 = eif_source(y, a, pi_hat, q_hat, config, delta, _tilts=tilts)
        D_S[:, j] = s1 + s2
        plug_S[j] = s2.mean()
        if target:
            t1, t2, t3 = eif_target(y, a, pi_hat, q_hat, config, delta, _tilts=tilts)
            D_T[:, j] = t1 + t2 + t3
            plug_T[j] = np.mean(np.sum(tilts[1] * q_hat, axis=1))
    ddof = 1 if n > 1 else 0
    return EstimateCurve(
        delta_grid=np.array(grid),
        mu_S_plugin=plug_S,
        mu_T_plugin=plug_T,
        mu_S_onestep=D_S.mean(axis=0),
        mu_T_onestep=D_T.mean(axis=0),
        sigma_S=D_S.std(axis=0, ddof=ddof),
        sigma_T=D_T.std(axis=0, ddof=ddof),
        eif_S=D_S,
        eif_T=D_T,
    )


def one_step_curve(
    data: Dataset,
    folds: FoldAssignment,
    config: TiltConfig,
    nuisances: Sequence[NuisancePair] | None = None,
    *,
    floor: float = DEFAULT_FLOOR,
) -> EstimateCurve:
    """Cross-fitted one-step (and plug-in) estimates over ``config.delta_grid``.

    Nuisances are fitted per fold when not supplied; every row is evaluated
    with the pair trained on the other folds. ``sigma`` is the pooled sample
    standard deviation of the cross-fitted influence values.
    """
    if nuisances is None:
        nuisances = fit_nuisances(data, folds, floor=floor)
    pi_hat, q_hat = cross_fit_predict(data, folds, nuisances)
    return curve_from_predictions(data.Y, data.A, pi_hat, q_hat, config)


@dataclass(frozen=True)
class PositivityReport:
    delta_grid: np.ndarray
    max_ratio: np.ndarray
    threshold: float

    @property
    def flagged(self) -> np.ndarray:
        return self.max_ratio > self.threshold

    @property
    def any_flagged(self) -> bool:
        return bool(np.any(self.flagged))


def positivity_diagnostic(
    pi_hat, config: TiltConfig, delta_grid=None, threshold: float = POSITIVITY_THRESHOLD
) -> PositivityReport:
    """Largest ``nu_star(a|W_i) / pi_hat(a|W_i)`` over the sample, per delta.

    Only actions with positive tilted-target mass enter the maximum. The
    report never aborts estimation.
    """
    pi_hat = np.atleast_2d(np.asarray(pi_hat, dtype=float))
    grid = config.delta_grid if delta_grid is None else np.atleast_1d(delta_grid)
    out = np.empty(len(grid))
    for j, delta in enumerate(grid):
        nu_star = tilted_marginals(pi_hat, config, delta)[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(nu_star > 0, nu_star / pi_hat, 0.0)
        out[j] = ratio.max()
    return PositivityReport(np.array(grid, dtype=float), out, float(threshold))

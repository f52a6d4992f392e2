"""Synthetic three-arm benchmark: data generator, Monte-Carlo truth, and
integrated bias / RMSE tables for plug-in versus one-step estimators."""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_softmax

from .estimation import curve_from_predictions
from .features import misspecify  # noqa: F401  (re-exported)
from .nuisance import (
    DEFAULT_FLOOR,
    DEFAULT_FOLDS,
    Dataset,
    assign_folds,
    cross_fit_predict,
    fit_nuisances,
)
from .tilt import ActionSpace, CostSpec, TiltConfig, destination_tables, tilted_marginals

# Y = Q(W, A) + eps with eps ~ N(0, 50): the 50 is read as a variance.
NOISE_VARIANCE = 50.0
N_COVARIATES = 4
ACTIONS = ActionSpace(("a1", "a2", "a3"))

PROPENSITY_COEF = np.array([
    [0.0, -2.0, 1.0, -0.5, -0.25],
    [0.0, -1.0, 0.25, 2.0, 0.5],
])
OUTCOME_INTERCEPT = np.array([10.0, 40.0, 50.0])
OUTCOME_SLOPE = np.array([-8.7, 17.4, 26.1])
Q_INDEX = np.array([2.0, 1.0, 1.0, 1.0])

DEFAULT_GRID = np.linspace(-2.0, 2.0, 100)

SETUPS: dict[int, tuple[tuple[float, ...], tuple[float, ...]]] = {
    1: ((2.0, 1.0, 1.0), (0.4, 0.4, 0.2)),
    2: ((1.0, 0.5, 2.0), (0.5, 0.3, 0.2)),
    3: ((1.0, 1.0, 2.0), (0.0, 0.2, 0.8)),
}

REGIMES = ("correct", "Q", "pi")
ESTIMATORS = ("plug-in", "one-step")
POLICIES = ("S", "T")
_REGIME_LABEL = {"correct": "--", "Q": "Q", "pi": "pi"}


def setup_config(setup: int, delta_grid=DEFAULT_GRID) -> TiltConfig:
    costs, nu = SETUPS[setup]
    return TiltConfig(np.array(nu), CostSpec.destination(costs), np.asarray(delta_grid))


def true_propensity(W) -> np.ndarray:
    W = np.atleast_2d(W)
    eta = np.column_stack([W @ PROPENSITY_COEF[:, 1:].T, np.zeros(len(W))])
    return np.exp(log_softmax(eta, axis=1))


def true_outcome(W) -> np.ndarray:
    q = np.atleast_2d(W) @ Q_INDEX
    return OUTCOME_INTERCEPT + np.outer(q, OUTCOME_SLOPE)


@dataclass
class DgpSample:
    dataset: Dataset
    seed: object


def generate(n: int, seed=0) -> DgpSample:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((n, N_COVARIATES))
    pi = true_propensity(W)
    u = rng.random(n)
    A = (u[:, None] > np.cumsum(pi, axis=1)[:, :-1]).sum(axis=1)
    eps = rng.standard_normal(n) * math.sqrt(NOISE_VARIANCE)
    Y = true_outcome(W)[np.arange(n), A] + eps
    return DgpSample(Dataset(W, A, Y, ACTIONS), seed)


@dataclass
class TruthCurve:
    delta_grid: np.ndarray
    mu_S: np.ndarray
    mu_T: np.ndarray
    se_S: np.ndarray
    se_T: np.ndarray
    n_mc: int


def truth_oracle(
    config: TiltConfig, delta_grid=None, n_mc: int = 10**6, seed=0, chunk: int = 200_000
) -> TruthCurve:
    """Monte-Carlo value of both functionals at the true propensity and outcome."""
    if n_mc < 10**5:
        raise ValueError("n_mc must be at least 1e5")
    grid = config.delta_grid if delta_grid is None else np.asarray(delta_grid, float)
    rng = np.random.default_rng(seed)
    G = len(grid)
    if config.cost.is_destination:
        nu_s, nue_s, weight_s = destination_tables(config, grid)
    sums = np.zeros((2, G))
    sq = np.zeros((2, G))
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        W = rng.standard_normal((m, N_COVARIATES))
        pi, Q = true_propensity(W), true_outcome(W)
        if config.cost.is_destination:
            h = pi @ weight_s.T
            vs = (pi * Q) @ weight_s.T / h
            vt = ((pi * Q) @ nu_s.T + ((1.0 - pi) * Q) @ nue_s.T) / h
        else:
            vs = np.empty((m, G))
            vt = np.empty((m, G))
            for j, d in enumerate(grid):
                ps, nt = tilted_marginals(pi, config, d)
                vs[:, j] = np.sum(ps * Q, axis=1)
                vt[:, j] = np.sum(nt * Q, axis=1)
        sums += vs.sum(axis=0), vt.sum(axis=0)
        sq += (vs**2).sum(axis=0), (vt**2).sum(axis=0)
        done += m
    mean = sums / n_mc
    var = np.maximum(sq / n_mc - mean**2, 0.0) * n_mc / (n_mc - 1)
    se = np.sqrt(var / n_mc)
    return TruthCurve(np.array(grid), mean[0], mean[1], se[0], se[1], n_mc)


@dataclass
class BenchmarkReport:
    """Integrated metrics indexed ``[setup, estimator, regime, policy]``."""

    setups: list
    regimes: tuple
    ibias: np.ndarray
    irmse: np.ndarray
    bias: np.ndarray = field(repr=False)
    rmse: np.ndarray = field(repr=False)
    reps: int
    n: int
    delta_grid: np.ndarray = field(repr=False)
    seed: int
    k_folds: int
    n_mc: int

    def cell(self, setup, estimator: str, regime: str, policy: str) -> tuple[float, float]:
        i = self.setups.index(setup)
        e, r, p = ESTIMATORS.index(estimator), self.regimes.index(regime), POLICIES.index(policy)
        return float(self.ibias[i, e, r, p]), float(self.irmse[i, e, r, p])

    def rows(self) -> list[list]:
        """Table rows: setup, estimator, regime, iBias/iRMSE for S then T."""
        out = []
        for i, s in enumerate(self.setups):
            for e, est in enumerate(ESTIMATORS):
                for r, reg in enumerate(self.regimes):
                    out.append([s, est, _REGIME_LABEL.get(reg, reg),
                                self.ibias[i, e, r, 0], self.irmse[i, e, r, 0],
                                self.ibias[i, e, r, 1], self.irmse[i, e, r, 1]])
        return out

    def metadata(self) -> dict:
        g = self.delta_grid
        return {
            "setups": [str(s) for s in self.setups],
            "regimes": list(self.regimes),
            "reps": self.reps,
            "n": self.n,
            "seed": self.seed,
            "k_folds": self.k_folds,
            "n_mc": self.n_mc,
            "grid": {"min": float(g[0]), "max": float(g[-1]), "points": int(len(g))},
            "noise_variance": NOISE_VARIANCE,
        }

    def to_json(self) -> str:
        meta = self.metadata()
        meta["cells"] = [
            dict(zip(("setup", "estimator", "regime", "S_iBias", "S_iRMSE",
                      "T_iBias", "T_iRMSE"), [str(r[0]), *r[1:3], *map(float, r[3:])]))
            for r in self.rows()
        ]
        return json.dumps(meta, indent=2, sort_keys=True)


REPORT_COLUMNS = ("setup", "estimator", "misspec", "S_iBias", "S_iRMSE", "T_iBias", "T_iRMSE")


def _regime_predictions(data: Dataset, seed, k_folds: int, regimes, floor: float):
    folds = assign_folds(data.n, k_folds, seed)
    all_cols = tuple(range(data.p))
    needed = set()
    for reg in regimes:
        needed.add(("misspecified" if reg == "pi" else "identity",
                    "misspecified" if reg == "Q" else "identity"))
    preds = {}
    cache_pi, cache_q = {}, {}
    for prop_t, out_t in sorted(needed):
        pairs = fit_nuisances(data, folds, propensity_transform=prop_t,
                              outcome_transform=out_t, propensity_columns=all_cols,
                              outcome_columns=all_cols, floor=floor)
        pi_hat, q_hat = cross_fit_predict(data, folds, pairs)
        cache_pi[prop_t], cache_q[out_t] = pi_hat, q_hat
    for reg in regimes:
        prop_t = "misspecified" if reg == "pi" else "identity"
        out_t = "misspecified" if reg == "Q" else "identity"
        preds[reg] = (cache_pi[prop_t], cache_q[out_t])
    return preds


def _one_rep(args):
    rep, n, seed, configs, grid, regimes, k_folds, floor = args
    data = generate(n, seed=(seed, rep)).dataset
    preds = _regime_predictions(data, (seed, rep, 1), k_folds, regimes, floor)
    # [setup, estimator, regime, policy, delta]
    est = np.empty((len(configs), 2, len(regimes), 2, len(grid)))
    for i, cfg in enumerate(configs):
        for r, reg in enumerate(regimes):
            pi_hat, q_hat = preds[reg]
            c = curve_from_predictions(data.Y, data.A, pi_hat, q_hat, cfg, grid)
            est[i, 0, r, 0] = c.mu_S_plugin
            est[i, 0, r, 1] = c.mu_T_plugin
            est[i, 1, r, 0] = c.mu_S_onestep
            est[i, 1, r, 1] = c.mu_T_onestep
    return rep, est


def summarize_errors(errors: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-delta bias and RMSE over reps (axis 0), and their grid averages.

    ``iBias`` averages the absolute per-delta bias; ``iRMSE`` averages the
    per-delta RMSE.
    """
    bias = errors.mean(axis=0)
    rmse = np.sqrt((errors**2).mean(axis=0))
    return bias, rmse, np.abs(bias).mean(axis=-1), rmse.mean(axis=-1)


def run_benchmark(
    setups: Mapping | Sequence[int] = (1, 2, 3),
    n: int = 1000,
    reps: int = 200,
    delta_grid=DEFAULT_GRID,
    regimes: Sequence[str] = REGIMES,
    seed: int = 0,
    *,
    k_folds: int = DEFAULT_FOLDS,
    n_mc: int = 10**6,
    floor: float = DEFAULT_FLOOR,
    threads: int = 1,
    truths: Mapping | None = None,
) -> BenchmarkReport:
    """Repeated-sampling comparison of plug-in and one-step estimators.

    ``setups`` is either a sequence of preset ids or a mapping from a name
    to a :class:`TiltConfig`. Each rep draws fresh data from ``(seed, rep)``,
    so results do not depend on ``threads``. Any failing rep aborts the run.
    """
    grid = np.asarray(delta_grid, dtype=float)
    regimes = tuple(regimes)
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}; expected one of {REGIMES}")
    if isinstance(setups, Mapping):
        names = list(setups)
        configs = [TiltConfig(c.nu, c.cost, grid) for c in setups.values()]
    else:
        names = list(setups)
        configs = [setup_config(s, grid) for s in names]
    if truths is None:
        truths = {}
    truth = []
    for name, cfg in zip(names, configs):
        t = truths.get(name)
        if t is None:
            t = truth_oracle(cfg, grid, n_mc, seed=(seed, 10**6))
        truth.append(np.stack([t.mu_S, t.mu_T]))
    truth = np.array(truth)  # [setup, policy, delta]

    jobs = [(rep, n, seed, configs, grid, regimes, k_folds, floor) for rep in range(reps)]
    est = np.empty((reps, len(configs), 2, len(regimes), 2, len(grid)))
    if threads > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for rep, e in ex.map(_one_rep, jobs):
                est[rep] = e
    else:
        for job in jobs:
            rep, e = _one_rep(job)
            est[rep] = e
    errors = est - truth[None, :, None, None, :, :]
    bias, rmse, ibias, irmse = summarize_errors(errors)
    return BenchmarkReport(names, regimes, ibias, irmse, bias, rmse, reps, n, grid,
                           seed, k_folds, n_mc)

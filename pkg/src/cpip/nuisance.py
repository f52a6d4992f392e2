"""Nuisance models: multinomial-logit propensity and arm-saturated OLS outcome.

Both models remember which raw covariate columns they read and which
feature transform they apply, so they can be evaluated on raw covariates
and round-tripped through JSON.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import log_softmax

from .features import apply_transform
from .tilt import ActionSpace

DEFAULT_FLOOR = 1e-4
DEFAULT_RIDGE = 1e-6
DEFAULT_FOLDS = 5


class DataError(ValueError):
    """Input data cannot support the requested fit."""


class EmptyArmError(DataError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Observation:
    w: np.ndarray
    a: int
    y: float


@dataclass
class Dataset:
    """Observations ``(W, A, Y)`` stored column-wise.

    ``adjust_idx`` selects the covariates the outcome model conditions on;
    it defaults to every column of ``W``.
    """

    W: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    action_space: ActionSpace
    adjust_idx: tuple[int, ...] | None = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.A = np.asarray(self.A)
        self.Y = np.asarray(self.Y, dtype=float)
        n = self.W.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        if self.A.shape != (n,) or self.Y.shape != (n,):
            raise DataError("W, A and Y must have the same number of rows")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.Y))):
            raise DataError("covariates and outcomes must be finite")
        if not np.issubdtype(self.A.dtype, np.integer):
            if not np.all(np.equal(np.mod(self.A, 1), 0)):
                raise DataError("actions must be integer indices")
            self.A = self.A.astype(int)
        if np.any((self.A < 0) | (self.A >= self.action_space.K)):
            raise DataError(f"actions must lie in 0..{self.action_space.K - 1}")
        p = self.W.shape[1]
        if self.adjust_idx is None:
            self.adjust_idx = tuple(range(p))
        self.adjust_idx = tuple(int(j) for j in self.adjust_idx)
        if any(j < 0 or j >= p for j in self.adjust_idx):
            raise DataError(f"adjust_idx must be within 0..{p - 1}")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.action_space.K

    def subset(self, idx) -> "Dataset":
        return Dataset(self.W[idx], self.A[idx], self.Y[idx], self.action_space,
                       self.adjust_idx)

    def rows(self) -> Iterator[Observation]:
        for w, a, y in zip(self.W, self.A, self.Y):
            yield Observation(w, int(a), float(y))


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k_folds: int

    def test_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.folds == k)

    def train_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.folds != k)


def assign_folds(n: int, k_folds: int = DEFAULT_FOLDS, seed: int = 0) -> FoldAssignment:
    """Random near-equal partition of ``range(n)``, reproducible from ``seed``."""
    if k_folds < 2:
        raise DataError("k_folds must be at least 2")
    if n < k_folds:
        raise DataError(f"n={n} is smaller than k_folds={k_folds}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=int)
    folds[perm] = np.arange(n) % k_folds
    return FoldAssignment(folds, k_folds)


def _design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(x)), x])


@dataclass
class PropensityModel:
    """Baseline-category multinomial logit; the last action is the baseline.

    ``coef`` has shape ``(K - 1, q + 1)`` with the intercept first.
    """

    coef: np.ndarray
    transform: str = "identity"
    columns: tuple[int, ...] | None = None
    floor: float = DEFAULT_FLOOR
    converged: bool = True
    n_iter: int = 0

    def features(self, w) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if self.columns is not None:
            w = w[:, list(self.columns)]
        x = apply_transform(self.transform, w)
        if x.shape[1] != self.coef.shape[1] - 1:
            raise ValueError(
                f"propensity model expects {self.coef.shape[1] - 1} features, "
                f"got {x.shape[1]}"
            )
        return x

    def raw_proba(self, w) -> np.ndarray:
        eta = _design(self.features(w)) @ self.coef.T
        eta = np.column_stack([eta, np.zeros(len(eta))])
        return np.exp(log_softmax(eta, axis=1))

    def to_dict(self) -> dict:
        return {
            "kind": "multinomial_logit",
            "coef": self.coef.tolist(),
            "transform": self.transform,
            "columns": None if self.columns is None else list(self.columns),
            "floor": self.floor,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        cols = d.get("columns")
        return cls(np.asarray(d["coef"], dtype=float), d["transform"],
                   None if cols is None else tuple(cols), d["floor"],
                   d.get("converged", True))


@dataclass
class OutcomeModel:
    """Separate least-squares fit of ``Y`` on ``[1, Z]`` within each arm."""

    coef: np.ndarray
    transform: str = "identity"
    columns: tuple[int, ...] | None = None
    rank_deficient: bool = False

    def features(self, w) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if self.columns is not None:
            w = w[:, list(self.columns)]
        x = apply_transform(self.transform, w)
        if x.shape[1] != self.coef.shape[1] - 1:
            raise ValueError(
                f"outcome model expects {self.coef.shape[1] - 1} features, "
                f"got {x.shape[1]}"
            )
        return x

    def predict_all(self, w) -> np.ndarray:
        """Predictions for every action, shape ``(n, K)``."""
        return _design(self.features(w)) @ self.coef.T

    def scaled(self, factor: float) -> "OutcomeModel":
        return OutcomeModel(self.coef * factor, self.transform, self.columns,
                            self.rank_deficient)

    def to_dict(self) -> dict:
        return {
            "kind": "arm_saturated_ols",
            "coef": self.coef.tolist(),
            "transform": self.transform,
            "columns": None if self.columns is None else list(self.columns),
            "rank_deficient": self.rank_deficient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeModel":
        cols = d.get("columns")
        return cls(np.asarray(d["coef"], dtype=float), d["transform"],
                   None if cols is None else tuple(cols),
                   d.get("rank_deficient", False))


def _check_arms(A: np.ndarray, K: int, minimum: int = 1) -> None:
    counts = np.bincount(A, minlength=K)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyArmError(f"empty arm: action(s) {empty.tolist()} absent from training data")
    short = np.flatnonzero(counts < minimum)
    if short.size:
        raise DataError(
            f"action(s) {short.tolist()} have fewer than {minimum} training rows"
        )


def fit_propensity(
    train: Dataset,
    *,
    transform: str = "identity",
    columns: Sequence[int] | None = None,
    ridge: float = DEFAULT_RIDGE,
    floor: float = DEFAULT_FLOOR,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> PropensityModel:
    """Penalized maximum likelihood by damped Newton iterations.

    The objective is the mean negative log-likelihood plus
    ``ridge / 2 * ||slopes||^2`` on standardized features; coefficients are
    mapped back to the raw feature scale. Convergence requires both the
    gradient norm and the Newton step to fall below ``tol``.
    """
    K = train.K
    _check_arms(train.A, K)
    cols = None if columns is None else tuple(int(c) for c in columns)
    x = train.W if cols is None else train.W[:, list(cols)]
    x = apply_transform(transform, x)
    n, q = x.shape
    loc = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    X = _design((x - loc) / scale)
    Yk = np.eye(K)[train.A][:, : K - 1]
    d = q + 1
    pen = np.full(d, ridge)
    pen[0] = 0.0
    pen = np.tile(pen, K - 1)

    def objective(theta):
        eta = np.column_stack([X @ theta.reshape(K - 1, d).T, np.zeros(n)])
        logp = log_softmax(eta, axis=1)
        f = -logp[np.arange(n), train.A].mean() + 0.5 * np.sum(pen * theta**2)
        return f, np.exp(logp[:, : K - 1])

    theta = np.zeros((K - 1) * d)
    f, P = objective(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = ((P - Yk).T @ X / n).ravel() + pen * theta
        H = np.empty(((K - 1) * d, (K - 1) * d))
        for j in range(K - 1):
            for k in range(j, K - 1):
                wjk = P[:, j] * ((j == k) - P[:, k])
                block = (X * wjk[:, None]).T @ X / n
                H[j * d:(j + 1) * d, k * d:(k + 1) * d] = block
                H[k * d:(k + 1) * d, j * d:(j + 1) * d] = block.T
        H += np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            break
        small_step = np.linalg.norm(step) <= tol * (1 + np.linalg.norm(theta))
        if np.linalg.norm(grad) <= tol and small_step:
            converged = True
            break
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            f_new, P_new = objective(cand)
            if f_new <= f + 1e-14 * abs(f):
                break
            t *= 0.5
        else:
            # stalled line search away from a stationary point: typically
            # separable data, where the likelihood keeps improving along a ray
            break
        theta, f, P = cand, f_new, P_new

    B = theta.reshape(K - 1, d)
    slopes = B[:, 1:] / scale
    intercept = B[:, 0] - slopes @ loc
    coef = np.column_stack([intercept, slopes])
    if not converged:
        warnings.warn(
            f"propensity fit did not converge after {it} iterations "
            "(possible separation)",
            ConvergenceWarning,
            stacklevel=2,
        )
    return PropensityModel(coef, transform, cols, floor, converged, it)


def fit_outcome(
    train: Dataset,
    *,
    transform: str = "identity",
    columns: Sequence[int] | None = None,
) -> OutcomeModel:
    """Per-arm OLS of ``Y`` on an intercept and the adjustment features.

    ``columns`` defaults to the dataset's adjustment set. A rank-deficient
    arm design falls back to the pseudo-inverse and is flagged on the model.
    """
    cols = train.adjust_idx if columns is None else tuple(int(c) for c in columns)
    x = apply_transform(transform, train.W[:, list(cols)])
    X = _design(x)
    d = X.shape[1]
    _check_arms(train.A, train.K)
    coef = np.zeros((train.K, d))
    deficient = False
    for a in range(train.K):
        rows = train.A == a
        Xa, ya = X[rows], train.Y[rows]
        if np.linalg.matrix_rank(Xa) < d:
            deficient = True
            coef[a] = np.linalg.pinv(Xa) @ ya
        else:
            coef[a] = np.linalg.solve(Xa.T @ Xa, Xa.T @ ya)
    return OutcomeModel(coef, transform, cols, deficient)


def predict_propensity(model: PropensityModel, w) -> np.ndarray:
    """Propensities floored at ``model.floor`` then renormalized.

    Every returned entry is at least ``floor / (1 + K floor)``.
    """
    p = model.raw_proba(w)
    if model.floor > 0:
        p = np.maximum(p, model.floor)
        p /= p.sum(axis=1, keepdims=True)
    return p


def predict_outcome(model: OutcomeModel, z, a=None):
    """Outcome regression at covariates ``z``; all arms when ``a`` is None."""
    q = model.predict_all(z)
    if a is None:
        return q
    a = np.asarray(a)
    if a.ndim == 0:
        return q[:, int(a)] if q.shape[0] > 1 else float(q[0, int(a)])
    return q[np.arange(len(q)), a]


@dataclass
class NuisancePair:
    propensity: PropensityModel
    outcome: OutcomeModel
    train_idx: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0, int))

    def to_dict(self) -> dict:
        return {"propensity": self.propensity.to_dict(), "outcome": self.outcome.to_dict()}


def fit_nuisances(
    data: Dataset,
    folds: FoldAssignment,
    *,
    propensity_transform: str = "identity",
    outcome_transform: str = "identity",
    propensity_columns: Sequence[int] | None = None,
    outcome_columns: Sequence[int] | None = None,
    floor: float = DEFAULT_FLOOR,
    ridge: float = DEFAULT_RIDGE,
) -> list[NuisancePair]:
    """Fit one propensity/outcome pair per fold on that fold's complement."""
    pairs = []
    for k in range(folds.k_folds):
        idx = folds.train_idx(k)
        train = data.subset(idx)
        prop = fit_propensity(train, transform=propensity_transform,
                              columns=propensity_columns, ridge=ridge, floor=floor)
        out = fit_outcome(train, transform=outcome_transform, columns=outcome_columns)
        pairs.append(NuisancePair(prop, out, idx))
    return pairs


def cross_fit_predict(
    data: Dataset, folds: FoldAssignment, pairs: Sequence[NuisancePair]
) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold propensity and outcome predictions, each of shape ``(n, K)``."""
    if len(pairs) != folds.k_folds:
        raise ValueError("need one nuisance pair per fold")
    pi_hat = np.empty((data.n, data.K))
    q_hat = np.empty((data.n, data.K))
    for k, pair in enumerate(pairs):
        idx = folds.test_idx(k)
        if np.intersect1d(idx, pair.train_idx).size:
            raise RuntimeError(f"fold {k} nuisances were trained on their evaluation rows")
        pi_hat[idx] = predict_propensity(pair.propensity, data.W[idx])
        q_hat[idx] = pair.outcome.predict_all(data.W[idx])
    return pi_hat, q_hat

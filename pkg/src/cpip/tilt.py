"""Cost-penalized I-projection couplings and their tilted marginals.

All policy-producing functions accept a single propensity vector of shape
``(K,)`` or a batch of shape ``(n, K)`` and return an array of the same
shape. Evaluation is done with a max-subtracted exponent so that
``|delta * cost|`` up to several hundred does not under- or overflow.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

SIMPLEX_TOL = 1e-12


class DegenerateKernelError(FloatingPointError):
    """The Boltzmann-Gibbs normalizer vanished or became non-finite."""


@dataclass(frozen=True)
class ActionSpace:
    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("an action space needs at least two actions")
        if len(set(labels)) != len(labels):
            raise ValueError(f"action labels must be distinct, got {labels}")

    @property
    def K(self) -> int:
        return len(self.labels)

    @classmethod
    def of_size(cls, K: int) -> "ActionSpace":
        return cls(tuple(str(k) for k in range(K)))

    def index(self, label) -> int:
        return self.labels.index(str(label))


def as_simplex(p, name: str = "probs", tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate that the last axis of ``p`` is a probability vector."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 0 or p.shape[-1] < 2:
        raise ValueError(f"{name} must have at least two entries")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite entries")
    if np.any(p < -tol):
        raise ValueError(f"{name} has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > max(tol, 1e-12)):
        raise ValueError(f"{name} does not sum to 1")
    return np.clip(p, 0.0, None)


@dataclass(frozen=True)
class CostSpec:
    """Reallocation costs, either per destination or as a full matrix.

    Destination costs ``c(a)`` stand for the matrix
    ``c(a', a'') = c(a'') * 1(a' != a'')``.
    """

    dest_costs: np.ndarray | None = None
    full_matrix: np.ndarray | None = None

    def __post_init__(self):
        if (self.dest_costs is None) == (self.full_matrix is None):
            raise ValueError("give exactly one of dest_costs or full_matrix")
        if self.dest_costs is not None:
            c = np.asarray(self.dest_costs, dtype=float)
            if c.ndim != 1:
                raise ValueError("dest_costs must be a vector")
        else:
            c = np.asarray(self.full_matrix, dtype=float)
            if c.ndim != 2 or c.shape[0] != c.shape[1]:
                raise ValueError("full_matrix must be square")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise ValueError("costs must be finite and nonnegative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(
            self, "dest_costs" if self.dest_costs is not None else "full_matrix", c
        )

    @classmethod
    def destination(cls, costs: Sequence[float]) -> "CostSpec":
        return cls(dest_costs=np.asarray(costs, dtype=float))

    @classmethod
    def matrix(cls, costs) -> "CostSpec":
        return cls(full_matrix=np.asarray(costs, dtype=float))

    @classmethod
    def hamming(cls, K: int) -> "CostSpec":
        return cls(dest_costs=np.ones(K))

    @property
    def is_destination(self) -> bool:
        return self.dest_costs is not None

    @property
    def K(self) -> int:
        return len(self.dest_costs if self.is_destination else self.full_matrix)

    def as_matrix(self) -> np.ndarray:
        if not self.is_destination:
            return np.array(self.full_matrix)
        K = self.K
        return np.tile(self.dest_costs, (K, 1)) * (1.0 - np.eye(K))


@dataclass(frozen=True)
class TiltConfig:
    nu: np.ndarray
    cost: CostSpec
    delta_grid: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        nu = as_simplex(self.nu, "nu")
        if nu.ndim != 1:
            raise ValueError("nu must be a vector")
        if self.cost.K != nu.shape[0]:
            raise ValueError(
                f"cost has {self.cost.K} actions but nu has {nu.shape[0]}"
            )
        grid = np.atleast_1d(np.asarray(self.delta_grid, dtype=float))
        if grid.ndim != 1 or grid.size == 0 or not np.all(np.isfinite(grid)):
            raise ValueError("delta_grid must be a nonempty finite vector")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("delta_grid must be strictly increasing")
        nu.setflags(write=False)
        grid.setflags(write=False)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "delta_grid", grid)

    @property
    def K(self) -> int:
        return self.nu.shape[0]


@dataclass(frozen=True)
class Coupling:
    joint: np.ndarray

    @property
    def source(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def target(self) -> np.ndarray:
        return self.joint.sum(axis=0)


@dataclass(frozen=True)
class TiltWeights:
    xi: np.ndarray
    zeta: float
    rho: np.ndarray


def _check_pi(pi_w, K: int) -> np.ndarray:
    pi = as_simplex(pi_w, "pi_w")
    if pi.shape[-1] != K:
        raise ValueError(f"pi_w has {pi.shape[-1]} actions, expected {K}")
    return pi


def _renormalize(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _log_kernel(pi: np.ndarray, nu: np.ndarray, cost: np.ndarray, delta: float):
    # log pi(a') + log nu(a'') - delta c(a', a''), shape (..., K, K)
    with np.errstate(over="ignore"):
        return _log(pi)[..., :, None] + _log(nu)[None, :] - delta * cost


def _scaled_destination(nu: np.ndarray, costs: np.ndarray, delta: float):
    """Return ``(nu e^{-m}, nu e^{-delta c - m})`` with a common shift ``m``.

    ``m`` is the largest exponent among ``0`` and ``-delta c(a)`` over the
    support of ``nu``, so every scaled quantity is at most 1.
    """
    expo = -delta * costs
    support = nu > 0
    m = max(0.0, float(expo[support].max()))
    return nu * np.exp(-m), nu * np.exp(np.where(support, expo - m, -np.inf))


def _destination_parts(nu, costs, delta):
    nu_s, nue_s = _scaled_destination(nu, costs, delta)
    K = nu.shape[0]
    # zeta + xi(a) = nu(a) + sum_{b != a} nu(b) e^{-delta c(b)}, summed without cancellation
    weight_s = nu_s + (1.0 - np.eye(K)) @ nue_s
    return nu_s, nue_s, weight_s


def destination_tables(config: TiltConfig, delta_grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaled ``nu``, ``nu e^{-delta c}`` and ``zeta + xi`` for every delta, shape ``(G, K)``.

    Each row shares one positive scale factor, which cancels in both
    tilted marginals.
    """
    if not config.cost.is_destination:
        raise ValueError("tables need destination costs")
    parts = [_destination_parts(config.nu, config.cost.dest_costs, float(d))
             for d in np.atleast_1d(delta_grid)]
    return tuple(np.array(x) for x in zip(*parts))


def _check_normalizer(h: np.ndarray) -> None:
    if np.any(~np.isfinite(h)) or np.any(h <= 0):
        raise DegenerateKernelError(
            "degenerate kernel: normalizer underflowed or is non-finite; "
            "reduce |delta * cost|"
        )


def cpip_coupling(pi_w, nu, cost: CostSpec, delta: float) -> Coupling:
    """Closed-form minimizer of ``KL(gamma | pi x nu) + delta E_gamma[c]``.

    The joint is ``gamma(a', a'') ∝ pi(a') nu(a'') exp(-delta c(a', a''))``.
    For ``delta < 0`` the same kernel is returned as a normalizable
    extension.
    """
    nu = as_simplex(nu, "nu")
    pi = _check_pi(pi_w, nu.shape[0])
    if pi.ndim != 1:
        raise ValueError("cpip_coupling takes a single propensity vector")
    if not np.isfinite(delta):
        raise ValueError("delta must be finite")
    logk = _log_kernel(pi, nu, cost.as_matrix(), delta)
    logz = logsumexp(logk)
    if not np.isfinite(logz):
        raise DegenerateKernelError("degenerate kernel: all mass vanished")
    joint = np.exp(logk - logz)
    return Coupling(joint / joint.sum())


def tilt_weights(config: TiltConfig, delta: float) -> TiltWeights:
    """Destination-cost weights ``xi``, ``zeta`` and ``rho``."""
    if not config.cost.is_destination:
        raise ValueError("weights undefined for general costs")
    nu, c = config.nu, config.cost.dest_costs
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(-delta * c)
        xi = np.where(nu > 0, nu * (1.0 - e), 0.0)
        zeta = float(np.sum(np.where(nu > 0, nu * e, 0.0)))
    nu_s, nue_s, weight_s = _destination_parts(nu, c, delta)
    rho = np.divide(nu_s - nue_s, weight_s, out=np.zeros_like(nu), where=weight_s > 0)
    return TiltWeights(xi=xi, zeta=zeta, rho=rho)


def rho_weights(config: TiltConfig, delta: float) -> np.ndarray:
    return tilt_weights(config, delta).rho


def _marginals_destination(pi, nu, costs, delta):
    nu_s, nue_s, weight_s = _destination_parts(nu, costs, delta)
    src = weight_s * pi
    h = src.sum(axis=-1, keepdims=True)
    _check_normalizer(h)
    # nu(a) - xi(a)(1 - pi(a)) = nu(a) pi(a) + nu(a) e^{-delta c(a)} (1 - pi(a))
    tgt = nu_s * pi + nue_s * (1.0 - pi)
    return _renormalize(src / h), _renormalize(tgt / h)


def _marginals_general(pi, nu, cmat, delta):
    logk = _log_kernel(pi, nu, cmat, delta)
    logz = logsumexp(logk, axis=(-2, -1), keepdims=True)
    if not np.all(np.isfinite(logz)):
        raise DegenerateKernelError("degenerate kernel: all mass vanished")
    joint = np.exp(logk - logz)
    return _renormalize(joint.sum(axis=-1)), _renormalize(joint.sum(axis=-2))


def tilted_marginals(pi_w, config: TiltConfig, delta: float, *, general: bool = False):
    """Return ``(pi_star, nu_star)`` for one or many propensity vectors.

    Destination costs use the O(K) closed form unless ``general`` is set,
    in which case the full kernel is built and marginalized.
    """
    pi = _check_pi(pi_w, config.K)
    if not np.isfinite(delta):
        raise ValueError("delta must be finite")
    if config.cost.is_destination and not general:
        return _marginals_destination(pi, config.nu, config.cost.dest_costs, delta)
    return _marginals_general(pi, config.nu, config.cost.as_matrix(), delta)


def tilted_source(pi_w, config: TiltConfig, delta: float, *, general: bool = False):
    return tilted_marginals(pi_w, config, delta, general=general)[0]


def tilted_target(pi_w, config: TiltConfig, delta: float, *, general: bool = False):
    return tilted_marginals(pi_w, config, delta, general=general)[1]


def tilted_limits(pi_w, config: TiltConfig) -> tuple[np.ndarray, np.ndarray]:
    """Marginals in the limit ``delta -> inf`` for destination costs.

    With every cost strictly positive both limits equal the product of
    experts ``pi(a) nu(a)`` (normalized).
    """
    if not config.cost.is_destination:
        raise ValueError("limit laws need destination costs")
    pi = _check_pi(pi_w, config.K)
    nu, c = config.nu, config.cost.dest_costs
    zero = c == 0
    nu_dagger = nu * ~zero + nu[zero].sum()
    pi_dagger = pi + (1.0 - pi) * zero
    src = pi * nu_dagger
    tgt = pi_dagger * nu
    for part in (src, tgt):
        if np.any(part.sum(axis=-1) <= 0):
            raise DegenerateKernelError("degenerate limit: no common support")
    return _renormalize(src), _renormalize(tgt)


def product_of_experts(pi_w, nu) -> np.ndarray:
    return _renormalize(np.asarray(pi_w, dtype=float) * np.asarray(nu, dtype=float))


def ipi_propensity(pi1_w, delta: float):
    """Incremental propensity score: odds of treatment multiplied by ``e^delta``."""
    p = np.asarray(pi1_w, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("pi1_w must lie strictly inside (0, 1)")
    out = expit(delta + np.log(p) - np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def transition_kernel(config: TiltConfig, delta: float) -> np.ndarray:
    """Row-stochastic kernel ``gamma(a', .) / pi_star(a')``.

    The conditional law of the destination given the source does not depend
    on the propensity, so it is shared across covariate profiles.
    """
    logk = _log(config.nu)[None, :] - delta * config.cost.as_matrix()
    logz = logsumexp(logk, axis=1, keepdims=True)
    if not np.all(np.isfinite(logz)):
        raise DegenerateKernelError("degenerate kernel: a kernel row vanished")
    return np.exp(logk - logz)


def pushforward(pi_w, config: TiltConfig, delta: float) -> np.ndarray:
    """Organic propensity pushed through the coupling's Markov kernel."""
    pi = _check_pi(pi_w, config.K)
    if not np.isfinite(delta):
        raise ValueError("delta must be finite")
    return _renormalize(pi @ transition_kernel(config, delta))

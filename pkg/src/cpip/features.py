"""Covariate transforms applied before fitting nuisance models."""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def identity(w: np.ndarray) -> np.ndarray:
    return np.asarray(w, dtype=float)


def misspecify(w) -> np.ndarray:
    """Nonlinear map of four covariates onto three distorted features.

    ``X1 = 10 + W2 / (1 + exp(W1))``, ``X2 = (0.6 + W1 W3 / 25)^3`` and
    ``X3 = (W2 + W4 + 20)^2``. Works on a single row or a batch.
    """
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != 4:
        raise ValueError(f"misspecify expects 4 covariates, got {w.shape[-1]}")
    w1, w2, w3, w4 = np.moveaxis(w, -1, 0)
    x1 = 10.0 + w2 * expit(-w1)
    x2 = (0.6 + w1 * w3 / 25.0) ** 3
    x3 = (w2 + w4 + 20.0) ** 2
    return np.stack([x1, x2, x3], axis=-1)


TRANSFORMS = {
    "identity": identity,
    "misspecified": misspecify,
}


def apply_transform(tag: str, w: np.ndarray) -> np.ndarray:
    try:
        fn = TRANSFORMS[tag]
    except KeyError:
        raise ValueError(f"unknown feature transform {tag!r}") from None
    return fn(w)

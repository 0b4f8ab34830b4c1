"""Closed-form ridge maps and l2-penalized logistic classifiers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ArgumentError, ConvergenceWarning, DimensionError, SingularError

VARIANCE_FLOOR = 1e-6
PROB_EPS = 1e-6

DEFAULT_RIDGE_GRID = (1e-6, 1e-4, 1e-2, 1.0, 1e2)
DEFAULT_LOGISTIC_GRID = (1e-4, 1e-2, 1.0, 1e2)


def _as_matrix(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _encoding_array(V) -> np.ndarray:
    return np.asarray(getattr(V, "V", V), dtype=float)


# ---------------------------------------------------------------------------
# ridge


@dataclass(frozen=True)
class RidgeMap:
    """Linear map ``x -> map.T @ x + intercept`` from inputs to labels.

    ``intercept`` is zero unless the map was fit with an unpenalized
    constant feature.
    """
    map: np.ndarray
    ridge: float
    intercept: np.ndarray = None

    def __post_init__(self):
        M = np.asarray(self.map, dtype=float)
        if M.ndim != 2:
            raise DimensionError(f"map must be 2-D, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise ValueError("ridge map has non-finite entries")
        if self.ridge < 0:
            raise ArgumentError("ridge must be nonnegative")
        b = np.zeros(M.shape[1]) if self.intercept is None else np.asarray(self.intercept, float)
        if b.shape != (M.shape[1],):
            raise DimensionError(f"intercept shape {b.shape} does not match q={M.shape[1]}")
        object.__setattr__(self, "map", M)
        object.__setattr__(self, "intercept", b)
        object.__setattr__(self, "ridge", float(self.ridge))

    @property
    def p(self) -> int:
        return self.map.shape[0]

    @property
    def q(self) -> int:
        return self.map.shape[1]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.p:
            raise DimensionError(f"expected {self.p} features, got {X.shape[-1]}")
        return X @ self.map + self.intercept


def _spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    try:
        c, low = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularError(f"regularized Gram matrix is not positive definite: {exc}") from exc
    d = np.abs(np.diag(c))
    if d.min() <= 1e-7 * d.max():
        raise SingularError(
            f"regularized Gram matrix is numerically singular (cond ~ {(d.max() / d.min()) ** 2:.2e})")
    return linalg.cho_solve((c, low), B)


def default_ridge_floor(X) -> float:
    """Smallest ridge used when the Gram matrix is rank deficient."""
    X = _as_matrix(X, "X")
    return 1e-6 * float(np.einsum("ij,ij->", X, X)) / X.shape[1]


def fit_ridge_map(X, Y, ridge: float = 0.0, fit_intercept: bool = False) -> RidgeMap:
    """Solve ``(X'X + ridge*I) P = X'Y``.

    With ``fit_intercept`` an unpenalized constant feature is included,
    which is the same as centering both sides before the solve.
    When p > n the equivalent n x n system ``X (X'X + r I)^-1 = (XX' + r I)^-1 X``
    is factored instead.
    """
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if ridge < 0:
        raise ArgumentError("ridge must be nonnegative")
    n, p = X.shape
    if fit_intercept:
        x_mean = X.mean(axis=0)
        y_mean = Y.mean(axis=0)
        Xc, Yc = X - x_mean, Y - y_mean
    else:
        Xc, Yc = X, Y
    if p <= n:
        G = Xc.T @ Xc
        G[np.diag_indices_from(G)] += ridge
        P = _spd_solve(G, Xc.T @ Yc)
    else:
        if ridge <= 0:
            raise SingularError(f"ridge must be > 0 when p ({p}) > n ({n})")
        K = Xc @ Xc.T
        K[np.diag_indices_from(K)] += ridge
        P = Xc.T @ _spd_solve(K, Yc)
    intercept = y_mean - x_mean @ P if fit_intercept else None
    return RidgeMap(P, ridge, intercept)


def regress_codeword(P: RidgeMap, V, x) -> np.ndarray:
    """Codeword prediction ``(P V)' x`` for a single input or a batch of rows."""
    V = _encoding_array(V)
    if V.ndim != 2 or V.shape[0] != P.q:
        raise DimensionError(f"encoding has shape {V.shape}, expected ({P.q}, d)")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != P.p:
        raise DimensionError(f"expected {P.p} features, got {x.shape[-1]}")
    return x @ (P.map @ V) + P.intercept @ V


def estimate_residual_variances(P: RidgeMap, V, train) -> np.ndarray:
    """Per-projection training mean squared error, floored at ``VARIANCE_FLOOR``."""
    V = _encoding_array(V)
    X = np.asarray(train.features, dtype=float)
    Y = np.asarray(train.labels, dtype=float)
    if Y.shape[1] != V.shape[0]:
        raise DimensionError(f"labels have q={Y.shape[1]}, encoding has {V.shape[0]} rows")
    resid = Y @ V - regress_codeword(P, V, X)
    return np.maximum(np.mean(resid ** 2, axis=0), VARIANCE_FLOOR)


# ---------------------------------------------------------------------------
# logistic


@dataclass(frozen=True)
class BinaryClassifier:
    weights: np.ndarray
    intercept: float
    l2_penalty: float
    converged: bool = True
    n_iter: int = 0
    objective_trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "intercept", float(self.intercept))

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.weights.shape[0]:
            raise DimensionError(f"expected {self.weights.shape[0]} features, got {X.shape[-1]}")
        return X @ self.weights + self.intercept


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_objective(X, y, weights, intercept, l2_penalty) -> float:
    z = X @ weights + intercept
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2_penalty * weights @ weights)


def logistic_gradient(X, y, weights, intercept, l2_penalty):
    r = _sigmoid(X @ weights + intercept) - y
    return X.T @ r / len(y) + l2_penalty * weights, float(np.mean(r))


def fit_logistic(X, y, l2_penalty: float, max_iter: int = 500, tol: float = 1e-6,
                 warn: bool = False) -> BinaryClassifier:
    """Minimize mean logistic loss + ``l2_penalty/2 * |w|^2`` (intercept unpenalized).

    Gradient descent from zero with Barzilai-Borwein trial steps and an
    Armijo backtracking line search, so the objective never increases.
    Stops once the gradient max-norm is <= ``tol`` or after ``max_iter``
    iterations; ``converged`` records which.
    """
    X = _as_matrix(X, "X")
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows, y has {y.shape[0]}")
    if not np.all((y == 0) | (y == 1)):
        raise ArgumentError("y must be 0/1")
    if not l2_penalty > 0:
        raise ArgumentError("l2_penalty must be positive")
    n, p = X.shape
    theta = np.zeros(p + 1)

    def obj(t):
        return logistic_objective(X, y, t[:p], t[p], l2_penalty)

    def grad(t):
        gw, gb = logistic_gradient(X, y, t[:p], t[p], l2_penalty)
        return np.append(gw, gb)

    f = obj(theta)
    g = grad(theta)
    trace = [f]
    lipschitz = 0.25 * (np.einsum("ij,ij->", X, X) / n + 1.0) + l2_penalty
    step = 1.0 / lipschitz
    converged = bool(np.max(np.abs(g)) <= tol)
    it = 0
    while not converged and it < max_iter:
        it += 1
        gg = g @ g
        t = step
        while True:
            cand = theta - t * g
            f_cand = obj(cand)
            if f_cand <= f - 1e-4 * t * gg:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if f_cand > f:
            break
        g_cand = grad(cand)
        s, r = cand - theta, g_cand - g
        sr = s @ r
        step = (s @ s) / sr if sr > 0 else 2.0 * t
        theta, f, g = cand, f_cand, g_cand
        trace.append(f)
        converged = bool(np.max(np.abs(g)) <= tol)
    if warn and not converged:
        warnings.warn(f"logistic fit stopped after {it} iterations with gradient "
                      f"{np.max(np.abs(g)):.2e} > {tol}", ConvergenceWarning, stacklevel=2)
    return BinaryClassifier(theta[:p].copy(), theta[p], l2_penalty, converged, it, tuple(trace))


def predict_proba(c: BinaryClassifier, x):
    """Clipped class probabilities ``(p0, p1)``; vectorized over rows of ``x``."""
    p1 = np.clip(_sigmoid(c.decision_function(x)), PROB_EPS, 1.0 - PROB_EPS)
    if np.ndim(p1) == 0:
        p1 = float(p1)
    return 1.0 - p1, p1


def log_proba(classifiers: Sequence[BinaryClassifier], X) -> np.ndarray:
    """Array ``[..., q, 2]`` of clipped ``(log p0, log p1)`` for each classifier."""
    out = []
    for c in classifiers:
        p0, p1 = predict_proba(c, X)
        out.append(np.stack([np.log(p0), np.log(p1)], axis=-1))
    return np.stack(out, axis=-2)


# ---------------------------------------------------------------------------
# cross validation


def kfold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, folds)]


def fold_losses(X, Y_target, model_kind: str, grid, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Mean validation loss for each grid value, in the order given."""
    X = _as_matrix(X, "X")
    Y = _as_matrix(Y_target, "Y_target")
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows, targets have {Y.shape[0]}")
    if folds < 2 or folds > X.shape[0]:
        raise ArgumentError(f"folds must be in [2, n], got {folds}")
    if model_kind not in ("ridge", "logistic"):
        raise ArgumentError(f"unknown model kind {model_kind!r}")
    parts = kfold_indices(X.shape[0], folds, seed)
    losses = np.zeros(len(grid))
    for g, penalty in enumerate(grid):
        total = 0.0
        for k, val in enumerate(parts):
            tr = np.concatenate([parts[j] for j in range(folds) if j != k])
            if model_kind == "ridge":
                m = fit_ridge_map(X[tr], Y[tr], penalty, fit_intercept=True)
                total += np.mean((m.predict(X[val]) - Y[val]) ** 2)
            else:
                fold_loss = 0.0
                for j in range(Y.shape[1]):
                    c = fit_logistic(X[tr], Y[tr, j], penalty)
                    p0, p1 = predict_proba(c, X[val])
                    fold_loss -= np.mean(np.where(Y[val, j] == 1, np.log(p1), np.log(p0)))
                total += fold_loss / Y.shape[1]
        losses[g] = total / folds
    return losses


def cross_validate(X, Y_target, model_kind: str, grid: Sequence[float] = None,
                   folds: int = 5, seed: int = 0) -> float:
    """Grid value with the lowest mean validation loss; ties go to the larger penalty.

    Squared error is used for ``ridge`` and log loss for ``logistic``; ridge
    folds are fit with an unpenalized intercept.
    """
    if grid is None:
        grid = DEFAULT_RIDGE_GRID if model_kind == "ridge" else DEFAULT_LOGISTIC_GRID
    grid = sorted({float(g) for g in grid}, reverse=True)
    if not grid:
        raise ArgumentError("grid is empty")
    if any(g <= 0 for g in grid):
        raise ArgumentError("grid values must be positive")
    if len(grid) == 1:
        return grid[0]
    losses = fold_losses(X, Y_target, model_kind, grid, folds, seed)
    return grid[int(np.argmin(losses))]

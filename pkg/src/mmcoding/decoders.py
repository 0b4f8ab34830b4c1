"""Recover binary label vectors from predicted codewords."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg

from .encoders import EncodingMatrix
from .errors import ArgumentError, ConvergenceWarning, DimensionError, SizeError
from .linear_models import VARIANCE_FLOOR

MAX_EXHAUSTIVE_Q = 25


@dataclass(frozen=True)
class DecodeProblem:
    """Inputs of the joint Gaussian/Bernoulli decoding objective.

    ``label_log_probs[j] = (log p_j0, log p_j1)``; it must be given exactly
    when the encoding carries the raw labels.
    """
    V: EncodingMatrix
    codeword_pred: np.ndarray
    residual_variances: np.ndarray
    label_log_probs: np.ndarray = None
    lam: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.codeword_pred, dtype=float)
        s2 = np.asarray(self.residual_variances, dtype=float)
        if m.shape != (self.V.d,) or s2.shape != (self.V.d,):
            raise DimensionError(
                f"codeword {m.shape} / variances {s2.shape} do not match d={self.V.d}")
        if np.any(s2 < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ArgumentError("residual variances must be >= the variance floor")
        lp = self.label_log_probs
        if (lp is not None) != self.V.includes_identity:
            raise ArgumentError("label_log_probs must be given iff the encoding includes the labels")
        if lp is not None:
            lp = np.asarray(lp, dtype=float)
            if lp.shape != (self.V.q, 2):
                raise DimensionError(f"label_log_probs has shape {lp.shape}, expected ({self.V.q}, 2)")
        if self.lam < 0:
            raise ArgumentError("lambda must be nonnegative")
        object.__setattr__(self, "codeword_pred", m)
        object.__setattr__(self, "residual_variances", s2)
        object.__setattr__(self, "label_log_probs", lp)

    @property
    def q(self) -> int:
        return self.V.q

    def linear_term(self) -> np.ndarray:
        """Per-label classifier weight ``lambda * log(p_j0 / p_j1)``."""
        if self.label_log_probs is None:
            return np.zeros(self.q)
        return self.lam * (self.label_log_probs[:, 0] - self.label_log_probs[:, 1])


def decode_objective(p: DecodeProblem, y) -> float:
    y = np.asarray(y, dtype=float)
    if y.shape != (p.q,):
        raise DimensionError(f"label vector has shape {y.shape}, expected ({p.q},)")
    r = y @ p.V.V - p.codeword_pred
    return float(0.5 * np.sum(r * r / p.residual_variances) + p.linear_term() @ y)


def _batch_objective(p: DecodeProblem, Y: np.ndarray) -> np.ndarray:
    R = Y @ p.V.V - p.codeword_pred
    return 0.5 * (R * R / p.residual_variances).sum(axis=1) + Y @ p.linear_term()


@lru_cache(maxsize=32)
def _binary_table(k: int) -> np.ndarray:
    """All 2^k binary rows in lexicographic order (read-only)."""
    T = np.array(list(itertools.product((0, 1), repeat=k)), dtype=float).reshape(2 ** k, k)
    T.setflags(write=False)
    return T


def exhaustive_decode(p: DecodeProblem) -> np.ndarray:
    """Exact minimizer over all 2^q label vectors; ties go to the lexicographically smallest."""
    if p.q > MAX_EXHAUSTIVE_Q:
        raise SizeError(f"q={p.q} exceeds the exhaustive-decoding limit {MAX_EXHAUSTIVE_Q}")
    best_val, best = math.inf, None
    # rows of each block are in lexicographic order, blocks in increasing prefix
    head = max(p.q - 16, 0)
    tail = _binary_table(p.q - head)
    for prefix in itertools.product((0, 1), repeat=head):
        Y = np.hstack([np.tile(np.array(prefix, dtype=float), (len(tail), 1)), tail])
        vals = _batch_objective(p, Y)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best = vals[k], Y[k]
    return best.astype(np.int8)


def _meanfield_fields(p: DecodeProblem):
    # objective on binary y as a multilinear polynomial (y_j^2 = y_j):
    # F(y) = const + sum_j h_j y_j + sum_{j<l} W_jl y_j y_l
    V = p.V.V
    w = 1.0 / p.residual_variances
    W = (V * w) @ V.T
    h = 0.5 * np.diag(W) - (V * w) @ p.codeword_pred + p.linear_term()
    np.fill_diagonal(W, 0.0)
    return h, W


def meanfield_beliefs(p: DecodeProblem, max_sweeps: int = 200, tol: float = 1e-6):
    """Sequential mean-field sweeps; returns ``(beliefs, sweeps, converged)``."""
    h, W = _meanfield_fields(p)
    if p.label_log_probs is not None:
        b = np.exp(p.label_log_probs[:, 1]).copy()
    else:
        b = np.full(p.q, 0.5)
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for j in range(p.q):
            # energy difference between y_j = 1 and y_j = 0 under the other beliefs
            delta = h[j] + W[j] @ b
            new = 0.5 * (1.0 - math.tanh(0.5 * delta))
            change = max(change, abs(new - b[j]))
            b[j] = new
        if change < tol:
            return b, sweep, True
    return b, max_sweeps, False


def meanfield_decode(p: DecodeProblem, max_sweeps: int = 200, tol: float = 1e-6,
                     warn: bool = True) -> np.ndarray:
    """Mean-field approximation to :func:`exhaustive_decode`, thresholded at 0.5."""
    if p.q < 1:
        raise ArgumentError("q must be >= 1")
    b, sweeps, ok = meanfield_beliefs(p, max_sweeps, tol)
    if not ok and warn:
        warnings.warn(f"mean-field decoding hit the sweep cap ({sweeps})",
                      ConvergenceWarning, stacklevel=2)
    # strict threshold so an exact tie decodes to 0, as the exhaustive decoder does
    return (b > 0.5).astype(np.int8)


def _check_codeword(V: EncodingMatrix, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (V.d,):
        raise DimensionError(f"codeword has shape {z.shape}, expected ({V.d},)")
    return z


def pca_round_decode(V: EncodingMatrix, codeword_pred) -> np.ndarray:
    """Round ``V z`` element-wise at 0.5 (ties go to 1)."""
    if V.includes_identity:
        raise ArgumentError("rounding decoder expects a plain (non-augmented) encoding")
    z = _check_codeword(V, codeword_pred)
    return (V.V @ z >= 0.5).astype(np.int8)


def cosamp_solve(V: EncodingMatrix, codeword_pred, sparsity: int, max_iter: int = 50,
                 stall_tol: float = 1e-6) -> np.ndarray:
    """CoSaMP estimate of a ``sparsity``-sparse y with ``V'y ~ z``.

    The returned real vector is the least-squares fit on the final support.
    """
    z = _check_codeword(V, codeword_pred)
    q = V.q
    if not 1 <= sparsity <= q:
        raise ArgumentError(f"sparsity must be in [1, {q}], got {sparsity}")
    Phi = V.V.T                              # d x q measurement matrix
    y = np.zeros(q)
    residual = z.copy()
    prev_norm = np.linalg.norm(residual)
    if prev_norm == 0:
        return y
    for _ in range(max_iter):
        proxy = Phi.T @ residual
        omega = np.argsort(-np.abs(proxy), kind="stable")[:2 * sparsity]
        support = np.union1d(omega, np.flatnonzero(y))
        b = np.zeros(q)
        b[support] = np.linalg.lstsq(Phi[:, support], z, rcond=None)[0]
        keep = np.argsort(-np.abs(b), kind="stable")[:sparsity]
        y = np.zeros(q)
        y[keep] = b[keep]
        residual = z - Phi @ y
        norm = np.linalg.norm(residual)
        if abs(prev_norm - norm) < stall_tol or norm < stall_tol:
            break
        prev_norm = norm
    support = np.flatnonzero(y)
    if support.size:
        y = np.zeros(q)
        y[support] = np.linalg.lstsq(Phi[:, support], z, rcond=None)[0]
    return y


def cosamp_decode(V: EncodingMatrix, codeword_pred, sparsity: int, max_iter: int = 50) -> np.ndarray:
    return (cosamp_solve(V, codeword_pred, sparsity, max_iter) >= 0.5).astype(np.int8)


def l1_objective(V: EncodingMatrix, z, y, l1_penalty) -> float:
    r = np.asarray(y, float) @ V.V - z
    return float(0.5 * r @ r + l1_penalty * np.sum(np.abs(y)))


def l1_solve(V: EncodingMatrix, codeword_pred, l1_penalty: float, max_iter: int = 2000,
             tol: float = 1e-9):
    """Minimize ``0.5|V'y - z|^2 + l1_penalty |y|_1`` by accelerated proximal gradient.

    Soft-thresholding steps of length 1/L (L the top eigenvalue of VV') with
    monotone momentum: a trial point is kept only if it does not raise the
    objective, so the recorded trace never increases. Stops once a plain
    proximal step from the current point moves no coordinate by more than
    ``tol`` (a stationarity certificate) or after ``max_iter`` iterations.

    Returns ``(y, objective_trace)``.
    """
    z = _check_codeword(V, codeword_pred)
    if l1_penalty < 0:
        raise ArgumentError("l1_penalty must be nonnegative")
    M = V.V
    L = float(linalg.eigvalsh(M @ M.T)[-1])
    y = np.zeros(V.q)
    f = l1_objective(V, z, y, l1_penalty)
    trace = [f]
    if L <= 0:
        return y, trace
    step = 1.0 / L

    def prox_step(u):
        u = u - step * (M @ (u @ M - z))
        return np.sign(u) * np.maximum(np.abs(u) - step * l1_penalty, 0.0)

    w, t = y.copy(), 1.0
    for _ in range(max_iter):
        u = prox_step(w)
        f_u = l1_objective(V, z, u, l1_penalty)
        prev = y
        if f_u <= f:
            y, f = u, f_u
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        w = y + (t / t_next) * (u - y) + ((t - 1.0) / t_next) * (y - prev)
        t = t_next
        plain = prox_step(y)
        done = np.max(np.abs(plain - y), initial=0.0) <= tol
        if done:
            f_plain = l1_objective(V, z, plain, l1_penalty)
            if f_plain < f:
                y, f = plain, f_plain
        trace.append(f)
        if done:
            break
    return y, trace


def l1_decode(V: EncodingMatrix, codeword_pred, l1_penalty: float, max_iter: int = 2000,
              tol: float = 1e-9) -> np.ndarray:
    y, _ = l1_solve(V, codeword_pred, l1_penalty, max_iter, tol)
    return (y >= 0.5).astype(np.int8)

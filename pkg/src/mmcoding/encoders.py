"""Label-space encoding matrices: random projections, PCA and CCA.

The max-margin encoder lives in :mod:`mmcoding.margin_metric`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ArgumentError, RankWarning, SingularError
from .linear_models import fit_ridge_map


@dataclass(frozen=True)
class EncodingMatrix:
    """A q x d matrix of label projections.

    When ``includes_identity`` is set the codeword also carries the q raw
    labels, which are predicted by per-label classifiers rather than by
    regression on these columns. Identity-augmented encodings may contain
    all-zero columns (a rank-deficient learned metric produces them); plain
    encodings may not.
    """
    V: np.ndarray
    includes_identity: bool = False

    def __post_init__(self):
        V = np.array(self.V, dtype=float)
        if V.ndim != 2 or V.shape[1] < 1:
            raise ArgumentError(f"encoding must be q x d with d >= 1, got {V.shape}")
        if not np.all(np.isfinite(V)):
            raise ArgumentError("encoding has non-finite entries")
        if not self.includes_identity and np.any(np.all(V == 0, axis=0)):
            raise ArgumentError("encoding has an all-zero column")
        V.setflags(write=False)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "includes_identity", bool(self.includes_identity))

    @property
    def q(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]

    def encode(self, Y) -> np.ndarray:
        return np.asarray(Y, dtype=float) @ self.V


def fix_signs(V: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    V = np.array(V, dtype=float)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def random_projections(q: int, d: int, distribution: str = "gaussian", seed: int = 0) -> EncodingMatrix:
    """I.i.d. projections with entries N(0, 1/d) or +-1/sqrt(d)."""
    if q < 1 or d < 1:
        raise ArgumentError("q and d must be >= 1")
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        V = rng.normal(0.0, 1.0 / np.sqrt(d), size=(q, d))
    elif distribution == "rademacher":
        V = rng.choice([-1.0, 1.0], size=(q, d)) / np.sqrt(d)
    else:
        raise ArgumentError(f"unknown distribution {distribution!r}")
    # a Gaussian column is zero with probability 0, but keep the invariant explicit
    zero = np.all(V == 0, axis=0)
    V[0, zero] = 1.0 / np.sqrt(d)
    return EncodingMatrix(V, includes_identity=False)


def pca_projections(Y, d: int) -> EncodingMatrix:
    """Top-d right singular vectors of the (uncentered) label matrix."""
    Y = np.asarray(Y, dtype=float)
    q = Y.shape[1]
    if not 1 <= d <= q:
        raise ArgumentError(f"d must be in [1, {q}], got {d}")
    if not np.any(Y):
        raise ArgumentError("label matrix is all zero")
    _, s, Vt = linalg.svd(Y, full_matrices=True)
    s = np.concatenate([s, np.zeros(q - len(s))])
    if d < q and abs(s[d - 1] - s[d]) <= 1e-10:
        warnings.warn(f"singular values {d} and {d + 1} coincide ({s[d - 1]:.3g}); "
                      "the PCA basis is not unique", RankWarning, stacklevel=2)
    return EncodingMatrix(fix_signs(Vt[:d].T), includes_identity=False)


def cca_eigenproblem(X, Y, reg: float):
    """Matrices ``(A, B)`` of the label-side CCA problem ``A v = lambda B v``.

    ``A = Y'X (X'X + reg I)^-1 X'Y`` and ``B = Y'Y + reg I``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    W = fit_ridge_map(X, Y, reg).map          # (X'X + reg I)^-1 X'Y
    A = (X.T @ Y).T @ W
    A = 0.5 * (A + A.T)
    B = Y.T @ Y
    B[np.diag_indices_from(B)] += reg
    return A, B


def cca_projections(X, Y, d: int, reg: float = None, return_eigenvalues: bool = False):
    """Label-side regularized CCA directions.

    Columns solve ``A v = lambda B v`` (see :func:`cca_eigenproblem`) at the
    top ``d`` eigenvalues and are scaled so ``v'Bv = 1``. The input-side
    directions are never formed. The eigenvalues are squared canonical
    correlations, returned in non-increasing order with ``return_eigenvalues``.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    q = Y.shape[1]
    if not 1 <= d <= q:
        raise ArgumentError(f"d must be in [1, {q}], got {d}")
    if reg is None:
        reg = 1e-4 * X.shape[0]
    if not reg > 0:
        raise ArgumentError("reg must be positive")
    A, B = cca_eigenproblem(X, Y, reg)
    try:
        lam, U = linalg.eigh(A, B)
    except linalg.LinAlgError as exc:
        raise SingularError(f"CCA covariance blocks are singular: {exc}") from exc
    order = np.argsort(lam)[::-1][:d]
    lam, U = lam[order], fix_signs(U[:, order])
    # eigh already returns B-orthonormal vectors; renormalize against drift
    U = U / np.sqrt(np.einsum("ij,ij->j", U, B @ U))
    enc = EncodingMatrix(U, includes_identity=True)
    if return_eigenvalues:
        return enc, lam
    return enc

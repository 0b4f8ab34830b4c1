import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcoding.encoders import (EncodingMatrix, cca_eigenproblem, cca_projections, fix_signs,
                               pca_projections, random_projections)
from mmcoding.errors import ArgumentError, RankWarning
from oracles import power_iteration


def test_encoding_matrix_invariants():
    with pytest.raises(ArgumentError):
        EncodingMatrix(np.zeros((3, 0)))
    with pytest.raises(ArgumentError):
        EncodingMatrix(np.array([[1.0, 0.0], [2.0, 0.0]]))
    with pytest.raises(ArgumentError):
        EncodingMatrix(np.array([[np.nan]]))
    # a learned metric of deficient rank yields zero columns; allowed with the raw labels kept
    E = EncodingMatrix(np.array([[1.0, 0.0], [2.0, 0.0]]), includes_identity=True)
    assert (E.q, E.d) == (2, 2)


def test_random_projections_determinism_and_support():
    a = random_projections(7, 5, "gaussian", seed=3)
    b = random_projections(7, 5, "gaussian", seed=3)
    np.testing.assert_array_equal(a.V, b.V)
    assert not a.includes_identity
    r = random_projections(9, 4, "rademacher", seed=1)
    assert np.all(np.isclose(np.abs(r.V), 0.5))
    with pytest.raises(ArgumentError):
        random_projections(3, 3, "uniform")


def test_random_projection_moments():
    V = random_projections(50, 100, "gaussian", seed=0).V
    assert abs(V.mean()) <= 0.01
    assert abs(V.var() - 1 / 100) <= 0.1 / 100


@pytest.mark.parametrize("dist", ["gaussian", "rademacher"])
def test_random_projection_column_norms(dist):
    V = random_projections(200, 30, dist, seed=2).V
    # entries have variance 1/d, so column norms concentrate near sqrt(q/d)
    norms = np.linalg.norm(V, axis=0) / np.sqrt(200 / 30)
    assert abs(norms.mean() - 1.0) <= 0.15


def test_pca_single_column():
    Y = np.zeros((5, 4))
    Y[[0, 2, 3], 2] = 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        V = pca_projections(Y, 1).V
    np.testing.assert_allclose(V[:, 0], np.eye(4)[2], atol=1e-12)


def test_pca_complete_basis_reconstructs():
    rng = np.random.default_rng(0)
    Y = rng.integers(0, 2, size=(30, 5)).astype(float)
    V = pca_projections(Y, 5).V
    np.testing.assert_allclose(V.T @ V, np.eye(5), atol=1e-10)
    assert np.linalg.norm(Y - Y @ V @ V.T) <= 1e-8


def test_pca_top_vector_matches_power_iteration():
    rng = np.random.default_rng(1)
    Y = rng.integers(0, 2, size=(40, 6)).astype(float)
    v = pca_projections(Y, 1).V[:, 0]
    ref = power_iteration(Y.T @ Y)
    assert min(np.linalg.norm(v - ref), np.linalg.norm(v + ref)) <= 1e-6


def test_pca_rank_warning_and_errors():
    Y = np.eye(3)
    with pytest.warns(RankWarning):
        pca_projections(Y, 1)
    with pytest.raises(ArgumentError):
        pca_projections(Y, 4)
    with pytest.raises(ArgumentError):
        pca_projections(np.zeros((3, 2)), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_pca_orthonormal_and_ordered(seed, q):
    rng = np.random.default_rng(seed)
    Y = rng.integers(0, 2, size=(20, q)).astype(float)
    if not Y.any():
        Y[0, 0] = 1
    d = int(rng.integers(1, q + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankWarning)
        V = pca_projections(Y, d).V
    np.testing.assert_allclose(V.T @ V, np.eye(d), atol=1e-10)
    s = np.linalg.norm(Y @ V, axis=0)
    assert np.all(np.diff(s) <= 1e-9)
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(d)] > 0)


def test_cca_identical_views():
    rng = np.random.default_rng(2)
    Y = rng.integers(0, 2, size=(60, 3)).astype(float)
    _, lam = cca_projections(Y, Y, 3, reg=1e-8, return_eigenvalues=True)
    assert np.all(lam >= 1 - 1e-4)


def test_cca_independent_views():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(2000, 5))
    Y = rng.integers(0, 2, size=(2000, 3)).astype(float)
    Yc = Y - Y.mean(0)
    _, lam = cca_projections(X - X.mean(0), Yc, 3, return_eigenvalues=True)
    assert np.sqrt(lam[0]) <= 0.15


def test_cca_generalized_eigen_residual_and_normalization():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 6))
    Y = (X[:, :4] + rng.normal(size=(80, 4)) > 0).astype(float)
    reg = 0.5
    enc, lam = cca_projections(X, Y, 4, reg=reg, return_eigenvalues=True)
    A, B = cca_eigenproblem(X, Y, reg)
    assert enc.includes_identity
    for k in range(4):
        v = enc.V[:, k]
        assert np.linalg.norm(A @ v - lam[k] * B @ v) <= 1e-6 * np.linalg.norm(B @ v)
        assert v @ B @ v == pytest.approx(1.0, abs=1e-10)
    assert np.all(np.diff(lam) <= 1e-12)
    assert np.all((lam >= -1e-10) & (lam <= 1 + 1e-10))


def test_cca_errors():
    X, Y = np.eye(4), np.eye(4)[:, :2]
    with pytest.raises(ArgumentError):
        cca_projections(X, Y, 3, reg=1.0)
    with pytest.raises(ArgumentError):
        cca_projections(X, Y, 1, reg=0.0)


def test_fix_signs():
    V = fix_signs(np.array([[1.0, -3.0], [-2.0, 1.0]]))
    np.testing.assert_array_equal(V, [[-1.0, 3.0], [2.0, -1.0]])

import csv
import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcoding.data import Dataset
from mmcoding.errors import ArgumentError, ConvergenceWarning, NonPsdError
from mmcoding.linear_models import BinaryClassifier, RidgeMap, fit_ridge_map
from mmcoding.margin_metric import (MarginSample, MetricQ, build_phi, cutting_plane,
                                    interpolated_log_prob, learn_metric, make_cut,
                                    margin_samples, metric_to_projections, oracle_batch,
                                    oracle_objective, psd_project, relaxed_hamming,
                                    separation_oracle, solve_restricted_master)
from oracles import binary_vectors, master_grid_q2, oracle_f


def random_psd(rng, q, scale=1.0, rank=None):
    B = rng.normal(size=(q, rank or q)) * scale
    return B @ B.T


def random_sample(rng, q):
    p1 = rng.uniform(0.05, 0.95, size=q)
    lp = np.log(np.column_stack([1 - p1, p1]))
    return MarginSample(rng.normal(0.5, 0.5, size=q), rng.integers(0, 2, size=q), lp)


def relaxed_objective(Q, samples, C):
    """Exact objective of the fully relaxed problem at Q (slacks from the oracle)."""
    _, _, f_star = oracle_batch(Q, samples)
    f_true = np.array([oracle_objective(Q, s, s.y_true) for s in samples])
    return 0.5 * np.trace(Q) + C / len(samples) * np.maximum(f_true - f_star, 0).sum()


# ------------------------------------------------------------------ types

def test_metricq_invariants():
    with pytest.raises(NonPsdError):
        MetricQ(np.diag([1.0, -0.1]))
    with pytest.raises(NonPsdError):
        MetricQ(np.array([[1.0, 0.5], [0.0, 1.0]]))
    MetricQ(np.diag([1.0, -1e-10]))
    assert MetricQ.zeros(3).Q.shape == (3, 3)


# ------------------------------------------------------------ elementary

def test_build_phi_examples():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=4), rng.uniform(size=3)
    zero = RidgeMap(np.zeros((4, 3)), 0.0)
    np.testing.assert_array_equal(build_phi(zero, x, y), -y)
    P = RidgeMap(rng.normal(size=(4, 3)), 0.0)
    assert np.max(np.abs(build_phi(P, x, P.map.T @ x))) <= 1e-14
    ref = np.array([sum(P.map[i, j] * x[i] for i in range(4)) - y[j] for j in range(3)])
    assert np.max(np.abs(build_phi(P, x, y) - ref)) <= 1e-14


def test_relaxed_hamming_examples():
    assert relaxed_hamming([1, 0, 1], [1, 0, 1]) == 0
    assert relaxed_hamming([1, 0], [0, 1]) == 2
    assert relaxed_hamming([1, 0], [0.5, 0.5]) == 1.0


def test_interpolated_log_prob_examples():
    rng = np.random.default_rng(1)
    s = random_sample(rng, 4)
    y = np.array([1, 0, 0, 1])
    expected = sum(s.log_prob_params[j, y[j]] for j in range(4))
    assert interpolated_log_prob(s, y) == pytest.approx(expected, abs=1e-14)
    flat = MarginSample(np.zeros(3), np.zeros(3), np.log(np.full((3, 2), 0.5)))
    assert interpolated_log_prob(flat, rng.uniform(size=3)) == pytest.approx(3 * math.log(0.5))
    one = MarginSample(np.zeros(1), np.zeros(1), np.log([[0.2, 0.8]]))
    assert interpolated_log_prob(one, [0.25]) == pytest.approx(-1.2629, abs=5e-5)


def test_oracle_objective_matches_term_by_term():
    rng = np.random.default_rng(2)
    for _ in range(20):
        q = int(rng.integers(1, 6))
        Q, s, y = random_psd(rng, q), random_sample(rng, q), rng.uniform(size=q)
        ref = oracle_f(Q.tolist(), s.phi_base, s.y_true, s.log_prob_params, y)
        assert oracle_objective(Q, s, y) == pytest.approx(ref, abs=1e-12)


def test_cut_encodes_margin_difference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        q = int(rng.integers(1, 6))
        Q, s, y = random_psd(rng, q), random_sample(rng, q), rng.uniform(size=q)
        cut = make_cut(s, 0, y)
        gap = oracle_objective(Q, s, s.y_true) - oracle_objective(Q, s, y)
        assert cut.value(Q) == pytest.approx(gap, abs=1e-10)


# ------------------------------------------------------------------ oracle

def test_oracle_zero_metric_flips_all_labels():
    rng = np.random.default_rng(4)
    t = np.array([1, 0, 1, 1, 0])
    s = MarginSample(rng.normal(size=5), t, np.log(np.full((5, 2), 0.5)))
    y, viol = separation_oracle(MetricQ.zeros(5), s)
    np.testing.assert_allclose(y, 1 - t, atol=1e-9)
    assert viol == pytest.approx(5.0, abs=1e-9)


def test_oracle_beats_fine_grid_q2():
    rng = np.random.default_rng(5)
    grid = np.linspace(0.0, 1.0, 101)
    G = np.array(list(itertools.product(grid, grid)))
    for _ in range(30):
        Q, s = random_psd(rng, 2), random_sample(rng, 2)
        y, _ = separation_oracle(Q, s)
        best = min(oracle_objective(Q, s, g) for g in G)
        assert oracle_objective(Q, s, y) <= best + 1e-4
        assert np.all((y >= -1e-12) & (y <= 1 + 1e-12))


def test_oracle_dominates_binary_enumeration():
    rng = np.random.default_rng(6)
    for _ in range(60):
        q = int(rng.integers(2, 9))
        Q, s = random_psd(rng, q, scale=rng.choice([0.1, 1.0, 3.0])), random_sample(rng, q)
        y, _ = separation_oracle(Q, s)
        best = min(oracle_objective(Q, s, np.array(b, float)) for b in binary_vectors(q))
        assert oracle_objective(Q, s, y) <= best + 1e-6


def test_oracle_violation_definition_and_batch_consistency():
    rng = np.random.default_rng(7)
    samples = [random_sample(rng, 4) for _ in range(6)]
    Q = random_psd(rng, 4)
    slacks = rng.uniform(0, 1, size=6)
    Y, viol, f_star = oracle_batch(Q, samples, slacks)
    for i, s in enumerate(samples):
        y1, v1 = separation_oracle(Q, s, slacks[i])
        assert v1 == pytest.approx(viol[i], abs=1e-7)
        assert f_star[i] == pytest.approx(oracle_objective(Q, s, Y[i]), abs=1e-9)
        expect = oracle_objective(Q, s, s.y_true) - f_star[i] - slacks[i]
        assert viol[i] == pytest.approx(expect, abs=1e-9)


def test_oracle_rejects_indefinite_metric():
    rng = np.random.default_rng(8)
    with pytest.raises(NonPsdError):
        separation_oracle(np.diag([1.0, -1.0]), random_sample(rng, 2))


# ------------------------------------------------------------- projection

def test_psd_project_examples():
    np.testing.assert_allclose(psd_project(np.eye(3)).Q, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(psd_project(np.diag([3.0, -1.0])).Q, np.diag([3.0, 0.0]), atol=1e-15)
    with pytest.raises(ArgumentError):
        psd_project(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_psd_project_frobenius_optimal():
    rng = np.random.default_rng(9)
    S = rng.normal(size=(4, 4))
    S = S + S.T
    dist = np.linalg.norm(psd_project(S).Q - S)
    for _ in range(1000):
        M = random_psd(rng, 4, scale=rng.uniform(0.1, 2.0), rank=int(rng.integers(1, 5)))
        assert dist <= np.linalg.norm(M - S) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_psd_project_properties(seed, q):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(q, q))
    S = S + S.T
    Q = psd_project(S).Q
    assert np.linalg.eigvalsh(Q)[0] >= -1e-8
    np.testing.assert_allclose(psd_project(Q).Q, Q, atol=1e-10)


# ------------------------------------------------------------------ master

def test_master_empty_cut_set():
    sol = solve_restricted_master([], 5, 1e6, q=3)
    np.testing.assert_array_equal(sol.metric.Q, np.zeros((3, 3)))
    np.testing.assert_array_equal(sol.slacks, np.zeros(5))
    assert sol.objective == 0.0


def test_master_tiny_c_gives_zero_metric():
    rng = np.random.default_rng(10)
    s = random_sample(rng, 3)
    cuts = [make_cut(s, 0, rng.uniform(size=3)) for _ in range(3)]
    for solver in ("conic", "subgradient"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            sol = solve_restricted_master(cuts, 1, 1e-12, solver=solver)
        assert np.max(np.abs(sol.metric.Q)) <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("C", [1.0, 10.0])
def test_master_matches_grid_search(seed, C):
    rng = np.random.default_rng(seed)
    s = MarginSample(rng.normal(0.5, 0.3, 2), np.array([1.0, 0.0]),
                     np.log(np.array([[0.5, 0.5], [0.6, 0.4]])))
    cut = make_cut(s, 0, np.array([0.0, 1.0]))
    sol = solve_restricted_master([cut], 1, C)
    R = max(2.0 * np.max(np.abs(sol.metric.Q)), 1e-3)
    coarse, arg = master_grid_q2(cut.A, cut.b, C, ((0, R), (-R, R), (0, R)))
    h = 3 * 2 * R / 199
    fine, _ = master_grid_q2(cut.A, cut.b, C, ((max(arg[0] - h, 0), arg[0] + h),
                                                (arg[1] - h, arg[1] + h),
                                                (max(arg[2] - h, 0), arg[2] + h)))
    best = min(coarse, fine)
    assert sol.objective <= best * (1 + 1e-9)
    assert abs(sol.objective - best) <= 1e-3 * abs(best)


def test_master_solution_invariants_and_solvers_agree():
    rng = np.random.default_rng(11)
    samples = [random_sample(rng, 3) for _ in range(5)]
    cuts = [make_cut(s, i, rng.uniform(size=3)) for i, s in enumerate(samples) for _ in range(2)]
    a = solve_restricted_master(cuts, 5, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        b = solve_restricted_master(cuts, 5, 1.0, solver="subgradient")
    for sol in (a, b):
        assert np.all(sol.slacks >= -1e-10)
        expect = 0.5 * np.trace(sol.metric.Q) + 1.0 / 5 * sol.slacks.sum()
        assert sol.objective == pytest.approx(expect, abs=1e-8)
    assert b.objective == pytest.approx(a.objective, rel=1e-3)


def test_master_validation():
    rng = np.random.default_rng(12)
    cut = make_cut(random_sample(rng, 2), 3, [0.5, 0.5])
    with pytest.raises(ArgumentError):
        solve_restricted_master([cut], 2, 1.0)
    with pytest.raises(ArgumentError):
        solve_restricted_master([cut], 5, 0.0)
    with pytest.raises(ArgumentError):
        solve_restricted_master([cut], 5, 1.0, solver="simplex")


# -------------------------------------------------------------- learning

def _toy_training(rng, n=40, q=3):
    Y = rng.integers(0, 2, size=(n, q))
    X = (2 * Y - 1) + 0.7 * rng.normal(size=(n, q))
    return Dataset(X, Y, [f"x{i}" for i in range(q)], [f"y{j}" for j in range(q)])


def test_learn_metric_zero_rounds_is_zero():
    rng = np.random.default_rng(13)
    d = _toy_training(rng)
    P = fit_ridge_map(d.features, d.labels, 1e-3, fit_intercept=True)
    clfs = [BinaryClassifier(np.zeros(3), 0.0, 1.0)] * 3
    Q = learn_metric(d, P, clfs, max_rounds=0).Q
    assert np.array_equal(Q, np.zeros((3, 3)))


def test_learn_metric_confident_classifiers_need_no_metric():
    rng = np.random.default_rng(14)
    q = 4
    Y = rng.integers(0, 2, size=(30, q))
    X = 2.0 * Y - 1.0
    P = fit_ridge_map(X, Y, 1e-3, fit_intercept=True)
    clfs = [BinaryClassifier(20.0 * np.eye(q)[j], 0.0, 1.0) for j in range(q)]
    samples = margin_samples(X, Y, P, clfs)
    # constraints already hold at Q = 0 for every binary label vector
    for s in samples:
        for b in binary_vectors(q):
            b = np.array(b, float)
            assert oracle_objective(np.zeros((q, q)), s, s.y_true) <= oracle_objective(
                np.zeros((q, q)), s, b) + 1e-12
    result = cutting_plane(samples)
    assert result.cuts == [] and len(result.rounds) == 1
    assert np.trace(result.metric.Q) <= 1e-3
    Q = learn_metric(Dataset(X, Y, list("abcd"), list("ABCD")), P, clfs).Q
    assert np.trace(Q) <= 1e-3


def test_learn_metric_couples_dependent_labels():
    rng = np.random.default_rng(0)
    n = 40
    y1 = rng.integers(0, 2, n)
    Y = np.column_stack([y1, y1])
    X = (2 * y1 - 1)[:, None] + 0.8 * rng.normal(size=(n, 3))
    P = fit_ridge_map(X, Y, 1e-3, fit_intercept=True)
    clfs = [BinaryClassifier(np.zeros(3), 0.0, 1.0)] * 2
    samples = margin_samples(X, Y, P, clfs)
    result = cutting_plane(samples, C=1e6, eps_violation=1e-6, max_rounds=300)
    Q = result.metric.Q
    assert abs(Q[0, 1]) > 0.01
    # the master value is a lower bound on the relaxed optimum and the exact
    # objective at Q an upper bound; a diagonal metric is clearly worse
    upper = relaxed_objective(Q, samples, 1e6)
    assert result.master.objective <= upper * (1 + 1e-9)
    assert upper - result.master.objective <= 1e-4 * upper
    assert relaxed_objective(np.diag(np.diag(Q)), samples, 1e6) > 1.05 * upper


def test_cutting_plane_monotone_and_trace_file(tmp_path):
    rng = np.random.default_rng(15)
    d = _toy_training(rng, n=30, q=3)
    P = fit_ridge_map(d.features, d.labels, 1e-2, fit_intercept=True)
    clfs = [BinaryClassifier(np.eye(3)[j], 0.0, 1.0) for j in range(3)]
    path = tmp_path / "trace.csv"
    Q = learn_metric(d, P, clfs, C=1e6, trace_path=path)
    assert np.linalg.eigvalsh(Q.Q)[0] >= -1e-8
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and rows[-1]["cuts_added"] == "0"
    obj = [float(r["master_objective"]) for r in rows]
    assert all(b >= a - 1e-4 * max(1.0, abs(a)) for a, b in zip(obj, obj[1:]))


def test_cutting_plane_round_cap_warns():
    rng = np.random.default_rng(16)
    samples = [random_sample(rng, 3) for _ in range(10)]
    with pytest.warns(ConvergenceWarning):
        result = cutting_plane(samples, C=1e6, max_rounds=1)
    assert not result.converged


# ----------------------------------------------------- metric -> encoding

def test_projection_identity_and_rank_one():
    V = metric_to_projections(np.eye(4), 4).V
    np.testing.assert_allclose(V @ V.T, np.eye(4), atol=1e-10)
    v = np.array([1.0, -2.0, 0.5])
    col = metric_to_projections(np.outer(v, v), 1).V[:, 0]
    assert min(np.linalg.norm(col - v), np.linalg.norm(col + v)) <= 1e-10
    enc = metric_to_projections(np.outer(v, v), 3)
    assert enc.includes_identity


def test_projection_best_rank_d():
    rng = np.random.default_rng(17)
    for _ in range(20):
        q = int(rng.integers(2, 9))
        d = int(rng.integers(1, q))
        Q = random_psd(rng, q)
        V = metric_to_projections(Q, d).V
        # truncated eigendecomposition via SVD (independent routine)
        U, s, _ = np.linalg.svd(Q)
        best = U[:, :d] @ np.diag(s[:d]) @ U[:, :d].T
        assert abs(np.linalg.norm(Q - V @ V.T) - np.linalg.norm(Q - best)) <= 1e-8
        norms = np.linalg.norm(V, axis=0)
        assert np.all(np.diff(norms) <= 1e-10)


def test_projection_errors():
    with pytest.raises(ArgumentError):
        metric_to_projections(np.eye(2), 3)
    with pytest.raises(NonPsdError):
        metric_to_projections(np.diag([1.0, -1.0]), 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10))
def test_projection_round_trip_property(seed, q):
    rng = np.random.default_rng(seed)
    Q = random_psd(rng, q, rank=int(rng.integers(1, q + 1)))
    V = metric_to_projections(Q, q).V
    assert np.linalg.norm(V @ V.T - Q) <= 1e-8 * max(1.0, np.linalg.norm(Q))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_trace_and_quadratic_form_identities(seed, q, d):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(q, d))
    phi = rng.normal(size=q)
    assert abs(np.trace(V @ V.T) - np.linalg.norm(V) ** 2) <= 1e-10 * max(1.0, np.linalg.norm(V) ** 2)
    lhs = phi @ (V @ V.T) @ phi
    assert abs(lhs - np.linalg.norm(V.T @ phi) ** 2) <= 1e-10 * max(1.0, abs(lhs))

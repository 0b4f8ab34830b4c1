"""Maximum-margin label metric learned by cutting plane with a relaxed oracle.

For training sample i with regression prediction ``a_i = P'x_i`` and label
vector ``t_i``, the margin constraints read, for every relaxed label vector
y in the unit box::

    f_i(t_i) - f_i(y) <= xi_i,
    f_i(y) = (a_i - y)' Q (a_i - y) - logP~_i(y) - |t_i - y|_1

where ``logP~_i`` linearly interpolates the per-label classifier
log-probabilities. Each constraint is affine in ``(Q, xi_i)``, so a cut is
stored as ``<A, Q> + b <= xi_i``. The metric minimizes
``trace(Q)/2 + C/n * sum(xi)`` over the PSD cone.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .encoders import EncodingMatrix, fix_signs
from .errors import ArgumentError, ConvergenceWarning, DimensionError, EigenFailure, NonPsdError
from .linear_models import BinaryClassifier, RidgeMap, log_proba

log = logging.getLogger(__name__)

PSD_TOL = 1e-8
SYM_TOL = 1e-10


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class MetricQ:
    Q: np.ndarray

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise DimensionError(f"metric must be square, got {Q.shape}")
        if not np.all(np.isfinite(Q)):
            raise NonPsdError("metric has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(Q)))) if Q.size else 1.0
        if np.max(np.abs(Q - Q.T), initial=0.0) > SYM_TOL * scale:
            raise NonPsdError("metric is not symmetric")
        Q = 0.5 * (Q + Q.T)
        if Q.size and linalg.eigvalsh(Q)[0] < -PSD_TOL * scale:
            raise NonPsdError(f"metric has eigenvalue {linalg.eigvalsh(Q)[0]:.3e} < 0")
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)

    @property
    def q(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def zeros(cls, q: int) -> "MetricQ":
        return cls(np.zeros((q, q)))


@dataclass(frozen=True)
class MarginSample:
    """Per-sample oracle inputs.

    ``log_prob_params[j] = (log p_j0, log p_j1)`` from the label classifiers.
    """
    phi_base: np.ndarray
    y_true: np.ndarray
    log_prob_params: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.phi_base, dtype=float)
        t = np.asarray(self.y_true, dtype=float)
        lp = np.asarray(self.log_prob_params, dtype=float)
        q = a.shape[0]
        if a.ndim != 1 or t.shape != (q,) or lp.shape != (q, 2):
            raise DimensionError(
                f"inconsistent sample shapes: phi {a.shape}, y {t.shape}, log-probs {lp.shape}")
        if not np.all((t == 0) | (t == 1)):
            raise ArgumentError("y_true must be binary")
        if not np.all(np.isfinite(lp)):
            raise ArgumentError("log-probabilities must be finite")
        object.__setattr__(self, "phi_base", a)
        object.__setattr__(self, "y_true", t)
        object.__setattr__(self, "log_prob_params", lp)

    @property
    def q(self) -> int:
        return self.phi_base.shape[0]


@dataclass(frozen=True)
class Cut:
    """Constraint ``<A, Q> + b <= xi[sample_index]`` generated at ``y_violator``."""
    sample_index: int
    y_violator: np.ndarray
    A: np.ndarray
    b: float

    def value(self, Q) -> float:
        return float(np.sum(self.A * np.asarray(getattr(Q, "Q", Q))) + self.b)


@dataclass(frozen=True)
class MasterSolution:
    metric: MetricQ
    slacks: np.ndarray
    objective: float
    iterations: int
    converged: bool = True


@dataclass
class RoundRecord:
    round: int
    cuts_added: int
    total_cuts: int
    objective: float
    max_violation: float


@dataclass
class CuttingPlaneResult:
    metric: MetricQ
    master: MasterSolution
    cuts: list
    rounds: list = field(default_factory=list)
    converged: bool = True


# ---------------------------------------------------------------------------
# elementary pieces


def build_phi(P: RidgeMap, x, y) -> np.ndarray:
    """Feature vector ``P'x - y`` (plus the map's intercept, if any)."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != P.q:
        raise DimensionError(f"label vector has length {y.shape[-1]}, map has q={P.q}")
    return P.predict(x) - y


def relaxed_hamming(y_true, y) -> float:
    return float(np.sum(np.abs(np.asarray(y_true, float) - np.asarray(y, float))))


def interpolated_log_prob(s: MarginSample, y) -> float:
    y = np.asarray(y, dtype=float)
    lp = s.log_prob_params
    return float(np.sum((1.0 - y) * lp[:, 0] + y * lp[:, 1]))


def oracle_objective(Q, s: MarginSample, y) -> float:
    """``phi'Q phi - logP~(y) - Delta~(y_true, y)`` at a relaxed label vector."""
    Q = np.asarray(getattr(Q, "Q", Q))
    phi = s.phi_base - np.asarray(y, dtype=float)
    return float(phi @ Q @ phi) - interpolated_log_prob(s, y) - relaxed_hamming(s.y_true, y)


def _as_metric(Q) -> MetricQ:
    if isinstance(Q, MetricQ):
        return Q
    try:
        return MetricQ(Q)
    except NonPsdError:
        raise
    except ArgumentError as exc:
        raise NonPsdError(str(exc)) from exc


def make_cut(s: MarginSample, index: int, y) -> Cut:
    y = np.asarray(y, dtype=float)
    phi_true = s.phi_base - s.y_true
    phi = s.phi_base - y
    A = np.outer(phi_true, phi_true) - np.outer(phi, phi)
    b = (-interpolated_log_prob(s, s.y_true) + relaxed_hamming(s.y_true, y)
         + interpolated_log_prob(s, y))
    return Cut(int(index), y.copy(), A, float(b))


def psd_project(S) -> MetricQ:
    """Frobenius-nearest PSD matrix: clip negative eigenvalues to zero."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"expected a square matrix, got {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-8 * scale:
        raise ArgumentError("matrix is not symmetric; symmetrize first")
    S = 0.5 * (S + S.T)
    try:
        lam, U = linalg.eigh(S)
    except linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    Q = (U * np.maximum(lam, 0.0)) @ U.T
    return MetricQ(0.5 * (Q + Q.T))


# ---------------------------------------------------------------------------
# separation oracle


def _stack_samples(samples: Sequence[MarginSample]):
    a = np.stack([s.phi_base for s in samples])
    t = np.stack([s.y_true for s in samples])
    lp = np.stack([s.log_prob_params for s in samples])
    # on the unit box: Delta~ = sum(t) + sum(y * (1 - 2t)),
    # logP~ = sum(l0) + sum(y * (l1 - l0))
    c = -(lp[..., 1] - lp[..., 0]) - (1.0 - 2.0 * t)
    const = -lp[..., 0].sum(axis=1) - t.sum(axis=1)
    return a, t, c, const


def _box_objective(Q, a, c, const, Y):
    R = a - Y
    return np.einsum("ij,jk,ik->i", R, Q, R) + np.einsum("ij,ij->i", c, Y) + const


def _polish(Q, a, c, const, y, max_steps):
    """Active-set Newton refinement of a near-optimal box point."""
    Qa = Q @ a
    f = float(_box_objective(Q, a[None], c[None], const, y[None])[0])
    for _ in range(max_steps):
        g = 2.0 * (Q @ y - Qa) + c
        pg = y - np.clip(y - g, 0.0, 1.0)
        if np.max(np.abs(pg)) <= 1e-13 * max(1.0, np.max(np.abs(g))):
            break
        fixed = ((y <= 0.0) & (g > 0.0)) | ((y >= 1.0) & (g < 0.0))
        free = ~fixed
        target = y.copy()
        if free.any():
            F = np.flatnonzero(free)
            rhs = Qa[F] - Q[np.ix_(F, np.flatnonzero(fixed))] @ y[fixed] - 0.5 * c[F]
            target[F] = np.linalg.lstsq(Q[np.ix_(F, F)], rhs, rcond=None)[0]
        direction = target - y
        accepted = False
        t = 1.0
        for _ in range(40):
            cand = np.clip(y + t * direction, 0.0, 1.0)
            f_cand = float(_box_objective(Q, a[None], c[None], const, cand[None])[0])
            if f_cand < f:
                y, f, accepted = cand, f_cand, True
                break
            t *= 0.5
        if not accepted:
            lip = 2.0 * max(float(np.max(np.abs(linalg.eigvalsh(Q)))), 1e-12)
            cand = np.clip(y - g / lip, 0.0, 1.0)
            f_cand = float(_box_objective(Q, a[None], c[None], const, cand[None])[0])
            if f_cand < f:
                y, f = cand, f_cand
            else:
                break
    return y, f


def oracle_batch(Q, samples: Sequence[MarginSample], slacks=None, tol: float = 1e-6,
                 max_iter: int = 1000):
    """Separation oracle for many samples sharing one metric.

    Returns ``(Y_star, violations, f_star)``. The box QP is solved by
    projected gradient with Armijo backtracking (all samples share the
    Hessian ``2Q``) started at the true labels flipped halfway toward the box
    center, then refined by an active-set Newton step.
    """
    M = _as_metric(Q)
    Q = M.Q
    a, t, c, const = _stack_samples(samples)
    if a.shape[1] != M.q:
        raise DimensionError(f"samples have q={a.shape[1]}, metric has q={M.q}")
    n = a.shape[0]
    slacks = np.zeros(n) if slacks is None else np.asarray(slacks, dtype=float)

    lmax = float(linalg.eigvalsh(Q)[-1]) if M.q else 0.0
    base_step = 1.0 / max(2.0 * lmax, 1e-12)
    step = np.full(n, base_step)
    Y = 0.25 + 0.5 * (1.0 - t)
    f = _box_objective(Q, a, c, const, Y)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        G = 2.0 * (Y[idx] - a[idx]) @ Q + c[idx]
        pg = Y[idx] - np.clip(Y[idx] - G, 0.0, 1.0)
        done = np.linalg.norm(pg, axis=1) <= tol
        active[idx[done]] = False
        idx, G = idx[~done], G[~done]
        if idx.size == 0:
            break
        s = step[idx].copy()
        pending = np.ones(idx.size, dtype=bool)
        new_Y = Y[idx].copy()
        new_f = f[idx].copy()
        for _ in range(60):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            cand = np.clip(Y[idx[p]] - s[p, None] * G[p], 0.0, 1.0)
            fc = _box_objective(Q, a[idx[p]], c[idx[p]], const[idx[p]], cand)
            d = cand - Y[idx[p]]
            ok = fc <= f[idx[p]] + np.einsum("ij,ij->i", G[p], d) + 0.5 / s[p] * np.einsum("ij,ij->i", d, d)
            new_Y[p[ok]] = cand[ok]
            new_f[p[ok]] = fc[ok]
            pending[p[ok]] = False
            s[p[~ok]] *= 0.5
        Y[idx] = new_Y
        f[idx] = new_f
        step[idx] = np.maximum(s, base_step)

    polish_steps = 2 * M.q + 5
    for i in range(n):
        Y[i], f[i] = _polish(Q, a[i], c[i], const[i], Y[i], polish_steps)

    f_true = _box_objective(Q, a, c, const, t)
    return Y, f_true - f - slacks, f


def separation_oracle(Q, s: MarginSample, slack: float = 0.0, tol: float = 1e-6,
                      max_iter: int = 1000):
    """Most violated relaxed label vector for one sample.

    Returns ``(y_star, violation)`` with ``violation = f(y_true) - f(y_star) - slack``.
    """
    Y, viol, _ = oracle_batch(Q, [s], [slack], tol=tol, max_iter=max_iter)
    return Y[0], float(viol[0])


# ---------------------------------------------------------------------------
# restricted master


def _stack_cuts(cuts: Sequence[Cut], q: int):
    A = np.stack([c.A for c in cuts]).reshape(len(cuts), q * q)
    b = np.array([c.b for c in cuts])
    idx = np.array([c.sample_index for c in cuts], dtype=int)
    return A, b, idx


def _slacks_for(Qm: np.ndarray, A, b, idx, n):
    xi = np.zeros(n)
    if len(b):
        vals = A @ Qm.ravel() + b
        np.maximum.at(xi, idx, vals)
    return xi


def _finish(Qm, A, b, idx, n, C, iterations, converged) -> MasterSolution:
    metric = psd_project(0.5 * (Qm + Qm.T))
    xi = _slacks_for(metric.Q, A, b, idx, n)
    obj = 0.5 * float(np.trace(metric.Q)) + C / n * float(xi.sum())
    return MasterSolution(metric, xi, obj, iterations, converged)


def _master_conic(A, b, idx, n, q, C, tol):
    import cvxpy as cp

    used = np.unique(idx)
    pos = np.searchsorted(used, idx)
    Qv = cp.Variable((q, q), PSD=True)
    xi = cp.Variable(len(used), nonneg=True)
    # A rows are symmetric so row-major and column-major vec agree
    constraints = [A @ cp.vec(Qv, order="F") + b <= xi[pos]]
    prob = cp.Problem(cp.Minimize(0.5 * cp.trace(Qv) + (C / n) * cp.sum(xi)), constraints)
    best, iters = None, 0
    # at large C the tight tolerances can stall short of OPTIMAL; retry looser once
    for t in (tol, max(tol, 1e-7)):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            try:
                prob.solve(solver=cp.CLARABEL, tol_gap_abs=t, tol_gap_rel=t, tol_feas=t,
                           max_iter=500)
            except cp.SolverError:
                continue
        iters += int((prob.solver_stats.num_iters if prob.solver_stats else 0) or 0)
        if Qv.value is not None:
            best = np.asarray(Qv.value)
            if prob.status == cp.OPTIMAL:
                return best, iters, True
    if best is None:
        raise EigenFailure(f"conic master solve failed: {prob.status}")
    return best, iters, False


def _master_subgradient(A, b, idx, n, q, C, tol, max_iter, patience=50):
    """Exact-penalty subgradient descent with PSD projection after every step."""
    eye = np.eye(q).ravel()
    rows = np.arange(len(b))

    def evaluate(Qm):
        vals = A @ Qm.ravel() + b
        xi = np.zeros(n)
        np.maximum.at(xi, idx, vals)
        obj = 0.5 * np.trace(Qm) + C / n * xi.sum()
        # one maximizing cut per sample with positive slack
        best = np.full(n, -1)
        order = np.lexsort((-vals, idx))
        first = np.ones(len(order), dtype=bool)
        first[1:] = idx[order][1:] != idx[order][:-1]
        winners = order[first]
        keep = vals[winners] > 0
        best[idx[winners[keep]]] = rows[winners[keep]]
        return obj, best

    Qm = np.zeros((q, q))
    obj, best = evaluate(Qm)
    best_obj, best_Q = obj, Qm.copy()
    radius = max(1.0, float(np.max(np.abs(b)) / max(np.max(np.linalg.norm(A, axis=1)), 1e-12)))
    stall, it = 0, 0
    for it in range(1, max_iter + 1):
        active = best[best >= 0]
        G = 0.5 * eye + C / n * A[active].sum(axis=0)
        gnorm = np.linalg.norm(G)
        if gnorm == 0:
            break
        Qm = Qm - (radius / np.sqrt(it)) * (G / gnorm).reshape(q, q)
        Qm = psd_project(0.5 * (Qm + Qm.T)).Q.copy()
        obj, best = evaluate(Qm)
        if obj < best_obj - tol * max(1.0, abs(best_obj)):
            best_obj, best_Q, stall = obj, Qm.copy(), 0
        else:
            if obj < best_obj:
                best_obj, best_Q = obj, Qm.copy()
            stall += 1
            if stall >= patience:
                return best_Q, it, True
    return best_Q, it, False


def solve_restricted_master(cuts: Sequence[Cut], n: int, C: float, tol: float = 1e-9,
                            solver: str = "conic", max_iter: int = 5000, q: int = None) -> MasterSolution:
    """Minimize ``trace(Q)/2 + C/n * sum(xi)`` subject to the given cuts.

    ``solver='conic'`` solves the semidefinite program with an interior-point
    method; ``solver='subgradient'`` runs the first-order exact-penalty
    scheme. Either way the returned metric is projected onto the PSD cone
    and the slacks and objective are recomputed exactly from it.
    """
    if not C > 0:
        raise ArgumentError("C must be positive")
    if n < 1:
        raise ArgumentError("n must be >= 1")
    if not cuts:
        if q is None:
            raise ArgumentError("q is required when there are no cuts")
        return MasterSolution(MetricQ.zeros(q), np.zeros(n), 0.0, 0, True)
    q = cuts[0].A.shape[0]
    if any(not 0 <= c.sample_index < n for c in cuts):
        raise ArgumentError("cut references a sample outside [0, n)")
    A, b, idx = _stack_cuts(cuts, q)
    if solver == "conic":
        Qm, iters, ok = _master_conic(A, b, idx, n, q, C, tol)
    elif solver == "subgradient":
        Qm, iters, ok = _master_subgradient(A, b, idx, n, q, C, tol, max_iter)
    else:
        raise ArgumentError(f"unknown master solver {solver!r}")
    if not ok:
        warnings.warn(f"restricted master ({solver}) stopped without converging",
                      ConvergenceWarning, stacklevel=2)
    return _finish(Qm, A, b, idx, n, C, iters, ok)


# ---------------------------------------------------------------------------
# cutting plane


def margin_samples(X, Y, P: RidgeMap, classifiers: Sequence[BinaryClassifier]) -> list[MarginSample]:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(classifiers) != Y.shape[1]:
        raise DimensionError(f"{len(classifiers)} classifiers for q={Y.shape[1]} labels")
    A = P.predict(X)
    LP = log_proba(classifiers, X)
    return [MarginSample(A[i], Y[i], LP[i]) for i in range(X.shape[0])]


def cutting_plane(samples: Sequence[MarginSample], C: float = 1e6, eps_violation: float = None,
                  max_rounds: int = 100, solver: str = "conic") -> CuttingPlaneResult:
    """Alternate restricted-master solves and per-sample separation.

    Each round adds at most one cut per sample (its most violated relaxed
    label vector) when the violation exceeds ``eps_violation``; cuts are
    never removed.
    """
    n = len(samples)
    if n < 1:
        raise ArgumentError("no training samples")
    q = samples[0].q
    if eps_violation is None:
        eps_violation = 1e-3 * q
    master = solve_restricted_master([], n, C, q=q)
    cuts: list[Cut] = []
    seen: list[list[np.ndarray]] = [[] for _ in range(n)]
    rounds = []
    converged = True
    for r in range(1, max_rounds + 1):
        Y_star, viol, _ = oracle_batch(master.metric, samples, master.slacks)
        added = 0
        for i in np.flatnonzero(viol > eps_violation):
            if any(np.max(np.abs(prev - Y_star[i])) <= 1e-9 for prev in seen[i]):
                continue
            cuts.append(make_cut(samples[i], i, Y_star[i]))
            seen[i].append(Y_star[i].copy())
            added += 1
        max_viol = float(viol.max())
        if added == 0:
            rounds.append(RoundRecord(r, 0, len(cuts), master.objective, max_viol))
            break
        master = solve_restricted_master(cuts, n, C, solver=solver)
        rounds.append(RoundRecord(r, added, len(cuts), master.objective, max_viol))
        log.debug("round %d: +%d cuts (%d total), objective %.6g, max violation %.3g",
                  r, added, len(cuts), master.objective, max_viol)
    else:
        if max_rounds > 0:
            converged = False
            warnings.warn(f"cutting plane stopped at the round cap ({max_rounds})",
                          ConvergenceWarning, stacklevel=2)
    return CuttingPlaneResult(master.metric, master, cuts, rounds, converged)


def learn_metric(train, P: RidgeMap, classifiers: Sequence[BinaryClassifier], C: float = 1e6,
                 eps_violation: float = None, max_rounds: int = 100, solver: str = "conic",
                 trace_path=None) -> MetricQ:
    """Learn the label metric on ``train`` (features as seen by ``P`` and the classifiers)."""
    if not C > 0:
        raise ArgumentError("C must be positive")
    samples = margin_samples(train.features, train.labels, P, classifiers)
    result = cutting_plane(samples, C, eps_violation, max_rounds, solver)
    if trace_path is not None:
        write_trace_csv(result.rounds, trace_path)
    return result.metric


def write_trace_csv(rounds: Sequence[RoundRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "cuts_added", "total_cuts", "master_objective", "max_violation"])
        for rec in rounds:
            w.writerow([rec.round, rec.cuts_added, rec.total_cuts,
                        repr(rec.objective), repr(rec.max_violation)])


def metric_to_projections(Q, d: int) -> EncodingMatrix:
    """Square root ``U D^(1/2)`` of the metric, keeping the ``d`` leading columns."""
    M = _as_metric(Q)
    if not 1 <= d <= M.q:
        raise ArgumentError(f"d must be in [1, {M.q}], got {d}")
    lam, U = linalg.eigh(M.Q)
    order = np.argsort(lam)[::-1][:d]
    V = U[:, order] * np.sqrt(np.maximum(lam[order], 0.0))
    return EncodingMatrix(fix_signs(V), includes_identity=True)

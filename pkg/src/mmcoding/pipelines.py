"""The benchmark methods as fit/predict pipelines, plus model persistence."""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from . import decoders
from .data import Dataset
from .encoders import EncodingMatrix, cca_projections, pca_projections, random_projections
from .errors import (ArgumentError, DimensionError, InsufficientDataError, ModelIOError,
                     VersionError)
from .linear_models import (DEFAULT_LOGISTIC_GRID, DEFAULT_RIDGE_GRID, VARIANCE_FLOOR,
                            BinaryClassifier, RidgeMap, cross_validate, default_ridge_floor,
                            estimate_residual_variances, fit_logistic, fit_ridge_map,
                            kfold_indices, log_proba, predict_proba)
from .margin_metric import MetricQ, MarginSample, cutting_plane, learn_metric, metric_to_projections

METHODS = ("BR", "CodingCS", "CodingPCA", "CodingPCA_R", "CodingCCA", "MaxMargin", "CLR")
FORMAT_VERSION = "mmcoding-model/1"

_ALIASES = {"CodingPCA-R": "CodingPCA_R"}


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    d: Optional[int] = None
    C: float = 1e6
    lambda_decode: float = 1.0
    seed: int = 0
    cv_folds: int = 5
    ridge_grid: tuple = DEFAULT_RIDGE_GRID
    logistic_grid: tuple = DEFAULT_LOGISTIC_GRID
    standardize: bool = True
    decoder: str = "exhaustive"
    cs_distribution: str = "gaussian"
    cs_sparsity: Optional[int] = None
    cca_reg: Optional[float] = None
    eps_violation: Optional[float] = None
    max_rounds: int = 100
    master_solver: str = "conic"
    variance_estimate: str = "cross_fit"
    margin_inputs: str = "cross_fit"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in METHODS:
            raise ArgumentError(f"unknown method {self.kind!r}; expected one of {METHODS}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "ridge_grid", tuple(float(g) for g in self.ridge_grid))
        object.__setattr__(self, "logistic_grid", tuple(float(g) for g in self.logistic_grid))
        if self.d is not None and self.d < 1:
            raise ArgumentError("d must be >= 1")
        if self.decoder not in ("exhaustive", "meanfield"):
            raise ArgumentError(f"unknown decoder {self.decoder!r}")
        for name in ("variance_estimate", "margin_inputs"):
            if getattr(self, name) not in ("cross_fit", "in_sample"):
                raise ArgumentError(f"{name} must be 'cross_fit' or 'in_sample'")

    def resolved_d(self, q: int) -> int:
        if self.d is not None:
            return self.d
        return 100 if self.kind == "CodingCS" else q

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        d = dict(d)
        for key in ("ridge_grid", "logistic_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X, enabled: bool = True) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        if not enabled:
            return cls(np.zeros(X.shape[1]), np.ones(X.shape[1]))
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(X.mean(axis=0), sd)

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass(frozen=True)
class FittedModel:
    method: MethodSpec
    standardizer: Standardizer
    q: int
    label_names: tuple
    classifiers: tuple = ()
    ridge: Optional[RidgeMap] = None
    encoding: Optional[EncodingMatrix] = None
    residual_variances: Optional[np.ndarray] = None
    metric: Optional[MetricQ] = None
    pairwise: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.standardizer.mean.shape[0]

    @property
    def n_base_models(self) -> int:
        """Number of base predictors, counted as in the result tables."""
        k = self.method.kind
        if k == "BR":
            return len(self.classifiers)
        if k == "CLR":
            return len(self.pairwise) + len(self.classifiers)
        n_reg = self.encoding.d if self.encoding is not None else 0
        return len(self.classifiers) + n_reg


# ---------------------------------------------------------------------------
# fitting


def _fit_classifiers(X, Y, spec: MethodSpec) -> tuple:
    out = []
    for j in range(Y.shape[1]):
        penalty = cross_validate(X, Y[:, j], "logistic", spec.logistic_grid,
                                 spec.cv_folds, spec.seed + 7919 * (j + 1))
        out.append(fit_logistic(X, Y[:, j], penalty))
    return tuple(out)


def _fit_label_map(X, Y, targets, spec: MethodSpec) -> RidgeMap:
    """Ridge map from inputs to labels, penalty cross-validated on ``targets``.

    Ridge is linear in its targets, so for an encoding V the codeword
    regressors are exactly ``P V``; CV is run on the codeword the method
    actually regresses (one penalty shared by all of its regressors).
    """
    grid = spec.ridge_grid
    if X.shape[1] >= X.shape[0]:
        floor = default_ridge_floor(X)
        grid = tuple(max(g, floor) for g in grid)
    ridge = cross_validate(X, targets, "ridge", grid, spec.cv_folds, spec.seed)
    return fit_ridge_map(X, Y, ridge, fit_intercept=True)


def _pair_classifier(X, Y, j, k, penalty) -> BinaryClassifier:
    mask = Y[:, j] != Y[:, k]
    target = Y[mask, j]
    if mask.sum() < 2 or target.min() == target.max():
        raise InsufficientDataError(f"pair ({j}, {k}) has {int(mask.sum())} informative samples")
    return fit_logistic(X[mask], target, penalty)


def _out_of_fold(X, Y, P: RidgeMap, classifiers, spec: MethodSpec):
    """Held-out label-map predictions and (optionally) classifier log-probabilities.

    Every row is predicted by models refit, with the already selected
    penalties, on the folds that exclude it.
    """
    n = X.shape[0]
    A = np.zeros_like(Y)
    LP = np.zeros((n, Y.shape[1], 2)) if classifiers else None
    for val in kfold_indices(n, spec.cv_folds, spec.seed + 104729):
        tr = np.setdiff1d(np.arange(n), val)
        A[val] = fit_ridge_map(X[tr], Y[tr], P.ridge, fit_intercept=True).predict(X[val])
        if classifiers:
            fold_clfs = [fit_logistic(X[tr], Y[tr, j], c.l2_penalty)
                         for j, c in enumerate(classifiers)]
            LP[val] = log_proba(fold_clfs, X[val])
    return A, LP


def _residual_variances(P, enc, std_train, spec, A_oof=None):
    if spec.variance_estimate == "in_sample":
        return estimate_residual_variances(P, enc, std_train)
    Y = np.asarray(std_train.labels, dtype=float)
    if A_oof is None:
        A_oof, _ = _out_of_fold(std_train.features, Y, P, (), spec)
    resid = (Y - A_oof) @ enc.V
    return np.maximum(np.mean(resid ** 2, axis=0), VARIANCE_FLOOR)


def fit(spec: MethodSpec, train: Dataset) -> FittedModel:
    """Fit one method on a training set; features are standardized internally."""
    if train.n < 2:
        raise ArgumentError("need at least two training samples")
    std = Standardizer.fit(train.features, spec.standardize)
    X = std.transform(train.features)
    Y = np.asarray(train.labels, dtype=float)
    q = train.q
    d = spec.resolved_d(q)
    kind = spec.kind
    base = dict(method=spec, standardizer=std, q=q, label_names=train.label_names)
    std_train = Dataset(X, train.labels, train.feature_names, train.label_names)

    if kind == "BR":
        return FittedModel(**base, classifiers=_fit_classifiers(X, Y, spec))

    if kind == "CLR":
        classifiers = _fit_classifiers(X, Y, spec)
        pairwise = {}
        for j, k in combinations(range(q), 2):
            penalty = float(np.sqrt(classifiers[j].l2_penalty * classifiers[k].l2_penalty))
            try:
                pairwise[(j, k)] = _pair_classifier(X, Y, j, k, penalty)
            except InsufficientDataError:
                pairwise[(j, k)] = None
        return FittedModel(**base, classifiers=classifiers, pairwise=pairwise)

    if kind == "MaxMargin":
        classifiers = _fit_classifiers(X, Y, spec)
        P = _fit_label_map(X, Y, Y, spec)
        A_oof = None
        if spec.margin_inputs == "in_sample":
            metric = learn_metric(std_train, P, classifiers, spec.C, spec.eps_violation,
                                  spec.max_rounds, spec.master_solver)
        else:
            A_oof, LP = _out_of_fold(X, Y, P, classifiers, spec)
            samples = [MarginSample(A_oof[i], Y[i], LP[i]) for i in range(train.n)]
            metric = cutting_plane(samples, spec.C, spec.eps_violation, spec.max_rounds,
                                   spec.master_solver).metric
        enc = metric_to_projections(metric, d)
        s2 = _residual_variances(P, enc, std_train, spec, A_oof)
        return FittedModel(**base, classifiers=classifiers, ridge=P, encoding=enc,
                           residual_variances=s2, metric=metric)

    info = {}
    if kind == "CodingCS":
        enc = random_projections(q, d, spec.cs_distribution, spec.seed)
        sparsity = spec.cs_sparsity or math.ceil(Y.sum(axis=1).mean())
        info["sparsity"] = int(min(max(sparsity, 1), q))
    elif kind in ("CodingPCA", "CodingPCA_R"):
        enc = EncodingMatrix(pca_projections(Y, d).V, includes_identity=(kind == "CodingPCA_R"))
    else:  # CodingCCA
        enc = cca_projections(X, Y - Y.mean(axis=0), d, spec.cca_reg)
    P = _fit_label_map(X, Y, enc.encode(Y), spec)
    if not enc.includes_identity:
        return FittedModel(**base, ridge=P, encoding=enc, info=info)
    classifiers = _fit_classifiers(X, Y, spec)
    s2 = _residual_variances(P, enc, std_train, spec)
    return FittedModel(**base, classifiers=classifiers, ridge=P, encoding=enc,
                       residual_variances=s2, info=info)


# ---------------------------------------------------------------------------
# prediction


def decode_problems(m: FittedModel, X) -> list[decoders.DecodeProblem]:
    """Per-row decoding problems for the identity-augmented coding methods."""
    Xs = m.standardizer.transform(np.atleast_2d(X))
    M = m.ridge.predict(Xs) @ m.encoding.V
    LP = log_proba(m.classifiers, Xs)
    return [decoders.DecodeProblem(m.encoding, M[i], m.residual_variances, LP[i],
                                   m.method.lambda_decode) for i in range(Xs.shape[0])]


def _clr_predict(m: FittedModel, Xs) -> np.ndarray:
    n, q = Xs.shape[0], m.q
    votes = np.zeros((n, q))
    for (j, k), clf in m.pairwise.items():
        if clf is None:
            votes[:, j] += 0.5
            votes[:, k] += 0.5
            continue
        _, p1 = predict_proba(clf, Xs)
        wins = p1 >= 0.5
        votes[:, j] += wins
        votes[:, k] += ~wins
    calib = np.column_stack([predict_proba(c, Xs)[1] >= 0.5 for c in m.classifiers])
    votes += calib
    virtual = (~calib).sum(axis=1)
    return (votes > virtual[:, None]).astype(np.int8)


def predict(m: FittedModel, x) -> np.ndarray:
    """Predicted label vector for one input, or a label matrix for a batch of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != m.p:
        raise DimensionError(f"expected {m.p} features, got {X.shape[1]}")
    Xs = m.standardizer.transform(X)
    kind = m.method.kind
    if kind == "BR":
        out = np.column_stack([predict_proba(c, Xs)[1] >= 0.5 for c in m.classifiers])
        out = out.astype(np.int8)
    elif kind == "CLR":
        out = _clr_predict(m, Xs)
    elif kind == "CodingCS":
        M = m.ridge.predict(Xs) @ m.encoding.V
        out = np.array([decoders.cosamp_decode(m.encoding, z, m.info["sparsity"]) for z in M])
    elif kind == "CodingPCA":
        M = m.ridge.predict(Xs) @ m.encoding.V
        out = np.array([decoders.pca_round_decode(m.encoding, z) for z in M])
    else:
        use_mf = m.method.decoder == "meanfield" or m.q > decoders.MAX_EXHAUSTIVE_Q
        decode = decoders.meanfield_decode if use_mf else decoders.exhaustive_decode
        out = np.array([decode(p) for p in decode_problems(m, X)])
    out = np.asarray(out, dtype=np.int8).reshape(X.shape[0], m.q)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# persistence


def _classifier_arrays(prefix, classifiers, p):
    present = np.array([c is not None for c in classifiers], dtype=bool)
    W = np.zeros((len(classifiers), p))
    b = np.zeros(len(classifiers))
    pen = np.zeros(len(classifiers))
    conv = np.zeros(len(classifiers), dtype=bool)
    it = np.zeros(len(classifiers), dtype=np.int64)
    for i, c in enumerate(classifiers):
        if c is not None:
            W[i], b[i], pen[i], conv[i], it[i] = c.weights, c.intercept, c.l2_penalty, c.converged, c.n_iter
    return {f"{prefix}_present": present, f"{prefix}_W": W, f"{prefix}_b": b,
            f"{prefix}_pen": pen, f"{prefix}_conv": conv, f"{prefix}_iter": it}


def _classifiers_from(arrays, prefix):
    out = []
    for i, present in enumerate(arrays[f"{prefix}_present"]):
        if not present:
            out.append(None)
            continue
        out.append(BinaryClassifier(arrays[f"{prefix}_W"][i].copy(), arrays[f"{prefix}_b"][i],
                                    float(arrays[f"{prefix}_pen"][i]),
                                    bool(arrays[f"{prefix}_conv"][i]),
                                    int(arrays[f"{prefix}_iter"][i])))
    return out


def save_model(m: FittedModel, path) -> None:
    """Write a versioned ``.npz`` container (JSON header + float64 arrays)."""
    meta = {
        "version": FORMAT_VERSION,
        "method": asdict(m.method),
        "q": m.q,
        "label_names": list(m.label_names),
        "info": m.info,
        "has_ridge": m.ridge is not None,
        "has_encoding": m.encoding is not None,
        "includes_identity": bool(m.encoding.includes_identity) if m.encoding is not None else False,
        "has_variances": m.residual_variances is not None,
        "has_metric": m.metric is not None,
        "pairs": [list(k) for k in m.pairwise],
    }
    arrays = {"std_mean": m.standardizer.mean, "std_scale": m.standardizer.scale}
    arrays.update(_classifier_arrays("clf", m.classifiers, m.p))
    arrays.update(_classifier_arrays("pair", list(m.pairwise.values()), m.p))
    if m.ridge is not None:
        arrays.update(ridge_map=m.ridge.map, ridge_intercept=m.ridge.intercept,
                      ridge_value=np.array(m.ridge.ridge))
    if m.encoding is not None:
        arrays["encoding"] = m.encoding.V
    if m.residual_variances is not None:
        arrays["variances"] = m.residual_variances
    if m.metric is not None:
        arrays["metric"] = m.metric.Q
    header = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, __meta__=header, **arrays)
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise ModelIOError(f"cannot write {path}: {exc}") from exc


def load_model(path) -> FittedModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ModelIOError(f"cannot read {path}: {exc}") from exc
    try:
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    except (zipfile.BadZipFile, ValueError, KeyError, EOFError, OSError, UnicodeDecodeError) as exc:
        raise ModelIOError(f"{path} is not a readable model file: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise VersionError(f"model version {meta.get('version')!r}, expected {FORMAT_VERSION!r}")
    try:
        spec = MethodSpec.from_dict(meta["method"])
        std = Standardizer(arrays["std_mean"], arrays["std_scale"])
        ridge = None
        if meta["has_ridge"]:
            ridge = RidgeMap(arrays["ridge_map"], float(arrays["ridge_value"]), arrays["ridge_intercept"])
        enc = EncodingMatrix(arrays["encoding"], meta["includes_identity"]) if meta["has_encoding"] else None
        pair_list = _classifiers_from(arrays, "pair")
        pairwise = {tuple(k): c for k, c in zip(meta["pairs"], pair_list)}
        return FittedModel(
            method=spec, standardizer=std, q=int(meta["q"]),
            label_names=tuple(meta["label_names"]),
            classifiers=tuple(_classifiers_from(arrays, "clf")),
            ridge=ridge, encoding=enc,
            residual_variances=arrays["variances"] if meta["has_variances"] else None,
            metric=MetricQ(arrays["metric"]) if meta["has_metric"] else None,
            pairwise=pairwise, info=meta["info"])
    except KeyError as exc:
        raise ModelIOError(f"{path} is missing field {exc}") from exc

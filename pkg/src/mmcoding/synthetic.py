"""Synthetic multi-label data with correlated labels, for tests and demos."""
from __future__ import annotations

import numpy as np

from .data import Dataset


def make_multilabel(n: int = 600, p: int = 40, q: int = 6, n_factors: int = 3,
                    feature_noise: float = 1.0, label_noise: float = 0.5,
                    positive_rate: float = 0.25, seed: int = 0) -> Dataset:
    """Labels and features both driven by shared latent factors.

    Labels load on a few common factors, so they are dependent given the
    features only through what the noisy features fail to reveal.
    """
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, n_factors))
    label_load = rng.normal(size=(n_factors, q))
    scores = Z @ label_load + label_noise * rng.normal(size=(n, q))
    thresh = np.quantile(scores, 1.0 - positive_rate, axis=0)
    Y = (scores > thresh).astype(np.int8)
    feat_load = rng.normal(size=(n_factors, p))
    X = Z @ feat_load + feature_noise * rng.normal(size=(n, p))
    return Dataset(X, Y, [f"x{i}" for i in range(p)], [f"y{j}" for j in range(q)])


def make_exclusive_multilabel(n: int = 2000, p: int = 60, q: int = 6, n_factors: int = 4,
                              feature_noise: float = 1.0, temperature: float = 1.0,
                              second_label_rate: float = 0.1, seed: int = 0) -> Dataset:
    """Mostly single-label data: one dominant label per row, occasionally a runner-up.

    Label cardinality stays close to one, so decoders that model the joint
    label vector can beat independent per-label thresholds on subset accuracy.
    """
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, n_factors))
    logits = Z @ rng.normal(size=(n_factors, q)) + temperature * rng.gumbel(size=(n, q))
    order = np.argsort(-logits, axis=1)
    Y = np.zeros((n, q), dtype=np.int8)
    Y[np.arange(n), order[:, 0]] = 1
    extra = rng.random(n) < second_label_rate
    Y[np.flatnonzero(extra), order[extra, 1]] = 1
    X = Z @ rng.normal(size=(n_factors, p)) + feature_noise * rng.normal(size=(n, p))
    return Dataset(X, Y, [f"x{i}" for i in range(p)], [f"y{j}" for j in range(q)])

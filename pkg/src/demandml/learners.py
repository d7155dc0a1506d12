"""Nuisance regression learners behind one fit/predict interface.

Three kinds: plain linear least squares, linear with lag-by-similarity
interaction expansion, and gradient boosted regression trees (stagewise
squared-loss boosting, exact greedy splits). Fitted models are immutable
and predict deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from ._tree_kernel import boost_fit, boost_predict
from .errors import ConfigError, DataError

LINEAR = "linear"
LINEAR_INTERACTIONS = "linear_interactions"
BOOSTED_TREES = "boosted_trees"
_KINDS = (LINEAR, LINEAR_INTERACTIONS, BOOSTED_TREES)

#: built-in interaction rule: q_lag and p_lag each crossed with every sim_* column
LAGS_X_SIMILARITIES = "lags_x_similarities"


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    interactions: str | tuple[tuple[str, str], ...] = LAGS_X_SIMILARITIES
    n_trees: int = 300
    learning_rate: float = 0.05
    max_depth: int = 3
    min_samples_leaf: int = 20
    subsample: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; valid: {_KINDS}")
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigError("tree parameters must be positive")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigError("subsample must lie in (0, 1]")


@dataclass(frozen=True)
class TreeEnsemble:
    """Heap-layout tree arrays: node i has children 2i+1 / 2i+2, feature < 0
    marks a leaf predicting value[node]."""

    init: float
    learning_rate: float
    feature: np.ndarray    # (n_trees, n_nodes) int64
    threshold: np.ndarray  # (n_trees, n_nodes) float64
    value: np.ndarray      # (n_trees, n_nodes) float64
    train_losses: np.ndarray | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        if self.feature.shape[0] == 0:
            return np.full(X.shape[0], self.init)
        return boost_predict(X, self.init, self.learning_rate,
                             np.ascontiguousarray(self.feature, dtype=np.int64),
                             np.ascontiguousarray(self.threshold, dtype=float),
                             np.ascontiguousarray(self.value, dtype=float))


@dataclass(frozen=True)
class FittedLearner:
    kind: str
    input_names: tuple[str, ...]
    feature_names: tuple[str, ...]
    coef: np.ndarray | None = None          # linear: [intercept, slopes...]
    dropped: tuple[str, ...] = ()           # rank-deficiency pivot report
    interaction_pairs: tuple[tuple[str, str], ...] = ()
    ensemble: TreeEnsemble | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


def resolve_interaction_pairs(names: Sequence[str],
                              rule: str | Sequence[tuple[str, str]]
                              ) -> tuple[tuple[str, str], ...]:
    if rule == LAGS_X_SIMILARITIES:
        sims = [n for n in names if n.startswith("sim_")]
        lags = [n for n in ("q_lag", "p_lag") if n in names]
        if not sims or len(lags) < 2:
            raise ConfigError(
                "lags_x_similarities interactions need q_lag, p_lag and at "
                f"least one sim_* column; have {list(names)}")
        return tuple((lag, sim) for lag in lags for sim in sims)
    pairs = tuple((a, b) for a, b in rule)
    for a, b in pairs:
        for col in (a, b):
            if col not in names:
                raise ConfigError(f"interaction refers to unknown column {col!r}")
    return pairs


def expand_interactions(X: np.ndarray, names: Sequence[str],
                        rule: str | Sequence[tuple[str, str]]
                        ) -> tuple[np.ndarray, tuple[str, ...]]:
    """Append elementwise products per the rule; labels are 'a×b'."""
    pairs = resolve_interaction_pairs(names, rule)
    names = list(names)
    cols = [X]
    for a, b in pairs:
        cols.append((X[:, names.index(a)] * X[:, names.index(b)])[:, None])
    return np.hstack(cols), tuple(names) + tuple(f"{a}×{b}" for a, b in pairs)


def _fit_linear_design(A: np.ndarray, y: np.ndarray,
                       labels: Sequence[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Least squares via pivoted QR; dependent columns are zeroed out and
    reported rather than crashing the fit."""
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(A.shape) * np.finfo(float).eps if diag[0] > 0 else 0.0
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    beta = np.zeros(A.shape[1])
    if rank:
        beta[keep], *_ = np.linalg.lstsq(A[:, keep], y, rcond=None)
    dropped = tuple(labels[i] for i in sorted(piv[rank:]))
    return beta, dropped


def fit(spec: LearnerSpec, X: np.ndarray, y: np.ndarray,
        names: Sequence[str] | None = None) -> FittedLearner:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError("X must be (n, p) and y must be (n,)")
    n, p = X.shape
    input_names = tuple(names) if names is not None else tuple(
        f"x{j}" for j in range(p))
    if len(input_names) != p:
        raise DataError("names length must match X columns")

    if spec.kind == BOOSTED_TREES:
        if n < 2 * spec.min_samples_leaf:
            raise DataError(f"boosted trees need n >= 2*min_samples_leaf = "
                            f"{2 * spec.min_samples_leaf}, got {n}")
        init, feat, thr, val, losses = boost_fit(
            X, y, spec.n_trees, spec.learning_rate, spec.max_depth,
            spec.min_samples_leaf, spec.subsample,
            int(spec.seed) % (2 ** 32))
        ensemble = TreeEnsemble(init=float(init), learning_rate=spec.learning_rate,
                                feature=feat, threshold=thr, value=val,
                                train_losses=losses)
        return FittedLearner(kind=spec.kind, input_names=input_names,
                             feature_names=input_names, ensemble=ensemble)

    design_X, design_names = X, input_names
    pairs: tuple[tuple[str, str], ...] = ()
    if spec.kind == LINEAR_INTERACTIONS:
        pairs = resolve_interaction_pairs(input_names, spec.interactions)
        design_X, design_names = expand_interactions(X, input_names, pairs)
    if n <= design_X.shape[1]:
        raise DataError(f"linear fit needs n > p, got n={n}, "
                        f"p={design_X.shape[1]}")
    A = np.column_stack([np.ones(n), design_X])
    beta, dropped = _fit_linear_design(A, y, ("(intercept)", *design_names))
    return FittedLearner(kind=spec.kind, input_names=input_names,
                         feature_names=design_names, coef=beta,
                         dropped=dropped, interaction_pairs=pairs)


def predict(model: FittedLearner, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.input_names):
        raise DataError(f"expected {len(model.input_names)} columns, "
                        f"got shape {X.shape}")
    if model.kind == BOOSTED_TREES:
        return model.ensemble.predict(X)
    if model.interaction_pairs:
        X, _ = expand_interactions(X, model.input_names, model.interaction_pairs)
    return model.coef[0] + X @ model.coef[1:]


def r2_score(y: np.ndarray, y_hat: np.ndarray) -> float:
    """1 - SS_res/SS_tot; negative when predictions beat-by-the-mean fails."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise DataError("r2_score needs two equal-length vectors of size >= 2")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("r2_score undefined for constant y")
    return 1.0 - float(((y - y_hat) ** 2).sum()) / ss_tot

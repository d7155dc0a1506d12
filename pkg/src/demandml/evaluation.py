"""Predictive evaluation harness: out-of-sample R2 for signal targets.

For each target in {Q, P, dQ, dP} and each configured learner x feature-set
pair, a model is trained on the first product split and scored on the
second. Predictions use lagged values of the time-varying tabular controls
plus the static embedding-derived features, so every row is a genuine
one-step-ahead prediction problem; lagged outcomes are deliberately
excluded from the feature sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import compression
from .config import RunConfig
from .errors import ConfigError
from .learners import LearnerSpec, fit, r2_score
from .panel import PanelDataset, split_by_product
from .pipeline import _materialize_input

TARGETS = ("Q_it", "P_it", "dQ_it", "dP_it")

_SET_LABELS = {
    "tabular": "all tabular",
    "pca": "+{K} PCAs",
    "similarities": "+{K} Similarities",
    "embeddings": "+{m} Embeddings",
}
_KIND_LABELS = {"linear": "Linear Reg", "boosted_trees": "Boosted Trees Reg"}


@dataclass(frozen=True)
class EvalRow:
    method: str
    learner: str
    feature_set: str
    r2: dict[str, float]


@dataclass(frozen=True)
class EvalTable:
    rows: tuple[EvalRow, ...]

    def to_csv(self, path, header_comments=()) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            fh.write("method,learner,feature_set," + ",".join(TARGETS) + "\n")
            for row in self.rows:
                cells = [repr(row.r2[t]) for t in TARGETS]
                fh.write(f"\"{row.method}\",{row.learner},{row.feature_set},"
                         + ",".join(cells) + "\n")

    def format(self) -> str:
        width = max(len(r.method) for r in self.rows) + 2
        lines = ["Method [features] \\ Target".ljust(width)
                 + "".join(t.rjust(10) for t in TARGETS)]
        for row in self.rows:
            lines.append(row.method.ljust(width) + "".join(
                f"{100 * row.r2[t]:>9.2f}%" for t in TARGETS))
        return "\n".join(lines)

    def lookup(self, learner: str, feature_set: str) -> EvalRow:
        for row in self.rows:
            if row.learner == learner and row.feature_set == feature_set:
                return row
        raise ConfigError(f"no eval row for ({learner}, {feature_set})")


def _eval_design(panel: PanelDataset, features: np.ndarray,
                 feature_cols: list[int]):
    """Feature matrix and the four targets for rows t = 1..T."""
    n, periods = panel.n_products, panel.n_periods
    t_rows = periods - 1
    blocks = []
    if feature_cols:
        blocks.append(np.repeat(features[:, feature_cols], t_rows, axis=0))
    if panel.tabular_names:
        blocks.append(panel.tabular[:, :-1, :].reshape(n * t_rows, -1))
    if not blocks:
        raise ConfigError("evaluation needs at least one feature column")
    X = np.hstack(blocks)
    targets = {
        "Q_it": panel.q[:, 1:].reshape(-1),
        "P_it": panel.p[:, 1:].reshape(-1),
        "dQ_it": np.diff(panel.q, axis=1).reshape(-1),
        "dP_it": np.diff(panel.p, axis=1).reshape(-1),
    }
    return X, targets


def _eval_spec(kind: str, base: LearnerSpec) -> LearnerSpec:
    if kind == base.kind:
        return base
    if kind == "boosted_trees":
        return LearnerSpec(kind=kind, seed=base.seed)
    return LearnerSpec(kind=kind)


def run_predictive_eval(cfg: RunConfig) -> EvalTable:
    """Train on split I1, score on split I2, per configured grid cell."""
    for kind in cfg.eval.learners:
        if kind not in _KIND_LABELS:
            raise ConfigError(f"eval supports learners {sorted(_KIND_LABELS)}, "
                              f"got {kind!r}")
    panel, embeddings, _ = _materialize_input(cfg)
    i1, i2 = split_by_product(panel, cfg.split_fraction, cfg.split_seed)
    id_to_row = {pid: i for i, pid in enumerate(panel.product_ids)}
    i1_rows = [id_to_row[pid] for pid in i1.product_ids]
    i2_rows = [id_to_row[pid] for pid in i2.product_ids]

    model, *_ = compression.fit_compression(
        embeddings[i1_rows], cfg.compression_m, cfg.compression_k,
        cfg.compression_seed)
    x_e, x_pc, x_sim = compression.transform(model, embeddings)
    features = np.hstack([x_sim, x_pc, x_e])
    k, m = cfg.compression_k, cfg.compression_m
    set_cols = {
        "tabular": [],
        "similarities": list(range(k)),
        "pca": list(range(k, 2 * k)),
        "embeddings": list(range(2 * k, 2 * k + m)),
    }

    rows = []
    for feature_set in cfg.eval.feature_sets:
        cols = set_cols[feature_set]
        X_train, y_train = _eval_design(i1, features[i1_rows], cols)
        X_test, y_test = _eval_design(i2, features[i2_rows], cols)
        for kind in cfg.eval.learners:
            spec = _eval_spec(kind, cfg.learner_q)
            r2 = {}
            for target in TARGETS:
                model_t = fit(spec, X_train, y_train[target])
                r2[target] = r2_score(y_test[target],
                                      model_t.predict(X_test))
            label = _SET_LABELS[feature_set].format(K=k, m=m)
            rows.append(EvalRow(
                method=f"{_KIND_LABELS[kind]} [{label}]",
                learner=kind, feature_set=feature_set, r2=r2))
    return EvalTable(rows=tuple(rows))

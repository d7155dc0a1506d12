"""Cross-fitted partialling-out and residual-on-residual price effect
estimation with cluster-robust inference.

The pipeline: assign products to folds (whole time series per fold, so
lagged outcomes never leak across the fit/predict boundary), regress the
quantity and price signals on the state within each training split, keep
out-of-fold residuals Q_perp and P_perp, then estimate either the single
slope  delta = (sum P_perp^2)^-1 sum P_perp Q_perp  or the heterogeneous
regression of Q_perp on P_perp interacted with centered effect modifiers.
Standard errors cluster at the product level via the sandwich
(X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1 with the G/(G-1)*(n-1)/(n-k)
small-sample factor.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from joblib import Parallel, delayed
from scipy import stats

from . import learners
from .errors import ConfigError, DataError, NumericalError
from .learners import LearnerSpec
from .panel import StateRows

_LINEAR_KINDS = (learners.LINEAR, learners.LINEAR_INTERACTIONS)


@dataclass(frozen=True)
class FoldPlan:
    """Product-level fold assignment; every observation of a product shares
    one fold and fold sizes differ by at most one product."""

    n_folds: int
    product_ids: tuple[str, ...]
    assignment: np.ndarray  # (N,) fold index aligned with product_ids

    def fold_of(self, ids: np.ndarray) -> np.ndarray:
        mapping = dict(zip(self.product_ids, self.assignment))
        uniq, inv = np.unique(np.asarray(ids, dtype=object), return_inverse=True)
        missing = [u for u in uniq if u not in mapping]
        if missing:
            raise ConfigError(f"fold plan does not cover products {missing[:5]}")
        return np.array([mapping[u] for u in uniq], dtype=int)[inv]


def make_folds(products, L: int, seed: int) -> FoldPlan:
    """Deterministically split product ids into L folds of near-equal size."""
    ids = tuple(sorted(products))
    if len(set(ids)) != len(ids):
        raise DataError("duplicate product ids")
    if L < 2:
        raise ConfigError("cross-fitting needs L >= 2 folds; use the "
                          "full-sample mode (plan=None) for no cross-fitting")
    if L > len(ids):
        raise ConfigError(f"cannot make {L} folds from {len(ids)} products")
    perm = np.random.default_rng(seed).permutation(len(ids))
    assignment = np.empty(len(ids), dtype=int)
    assignment[perm] = np.arange(len(ids)) % L
    return FoldPlan(n_folds=L, product_ids=ids, assignment=assignment)


@dataclass(frozen=True)
class ResidualPanel:
    """Out-of-fold residuals plus the effect-modifier design.

    Modifier columns are (constant, standardized lagged quantity,
    standardized lagged price, centered similarities); zero-variance
    modifiers are dropped and recorded. folds is -1 everywhere for the
    full-sample (no cross-fitting) mode.
    """

    product_ids: np.ndarray
    periods: np.ndarray
    q_perp: np.ndarray
    p_perp: np.ndarray
    modifiers: np.ndarray
    modifier_names: tuple[str, ...]
    folds: np.ndarray
    dropped_modifiers: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        return self.q_perp.shape[0]


def build_modifiers(rows: StateRows, standardize_lags: bool = True,
                    rescale_similarities: bool = False):
    """Modifier matrix per the reporting convention: lags centered and (by
    default) scaled to unit variance, similarities centered only."""
    n = rows.n_rows
    cols = [np.ones(n)]
    names = ["Centercept"]
    dropped: list[str] = []

    def add(values: np.ndarray, label: str, rescale: bool):
        sd = values.std()
        if sd == 0.0:
            dropped.append(label)
            return
        centered = values - values.mean()
        cols.append(centered / sd if rescale else centered)
        names.append(label)

    if "q_lag" in rows.names:
        add(rows.column("q_lag"), "Lagged Quantity", standardize_lags)
    if "p_lag" in rows.names:
        add(rows.column("p_lag"), "Lagged Price", standardize_lags)
    for name in rows.names:
        if name.startswith("sim_"):
            add(rows.column(name), f"Cluster Similarity {name[4:]}",
                rescale_similarities)
    return np.column_stack(cols), tuple(names), tuple(dropped)


def _derived_spec(spec: LearnerSpec, fold: int, target: int) -> LearnerSpec:
    if spec.kind != learners.BOOSTED_TREES:
        return spec
    child = np.random.SeedSequence((spec.seed, fold, target)).generate_state(1)[0]
    return dataclasses.replace(spec, seed=int(child))


def _fit_fold(rows: StateRows, train: np.ndarray, spec_q: LearnerSpec,
              spec_p: LearnerSpec, fold: int):
    X_train = rows.X[train]
    try:
        model_q = learners.fit(_derived_spec(spec_q, fold, 0), X_train,
                               rows.q[train], names=rows.names)
        model_p = learners.fit(_derived_spec(spec_p, fold, 1), X_train,
                               rows.p[train], names=rows.names)
    except DataError as exc:
        raise DataError(f"fold {fold}: {exc}") from None
    return model_q, model_p


def partial_out(rows: StateRows, spec: LearnerSpec, plan: FoldPlan | None,
                spec_p: LearnerSpec | None = None, n_jobs: int = 1,
                standardize_lags: bool = True,
                rescale_similarities: bool = False) -> ResidualPanel:
    """Residualize the outcome and treatment on the state.

    With a fold plan, nuisances for fold l are fit on every other fold and
    predict fold l only. With plan=None the linear specification is fit and
    predicted on the full sample (no cross-fitting); tree learners are
    rejected there because in-sample tree residuals are overfit.
    """
    spec_p = spec if spec_p is None else spec_p
    q_hat = np.empty(rows.n_rows)
    p_hat = np.empty(rows.n_rows)

    if plan is None:
        for s in (spec, spec_p):
            if s.kind not in _LINEAR_KINDS:
                raise ConfigError("full-sample partialling-out is only valid "
                                  "for linear specifications; use cross-fitting "
                                  f"for {s.kind}")
        model_q = learners.fit(spec, rows.X, rows.q, names=rows.names)
        model_p = learners.fit(spec_p, rows.X, rows.p, names=rows.names)
        q_hat = model_q.predict(rows.X)
        p_hat = model_p.predict(rows.X)
        folds = np.full(rows.n_rows, -1)
    else:
        folds = plan.fold_of(rows.product_ids)
        masks = [(folds == l) for l in range(plan.n_folds)]
        empty = [l for l, m in enumerate(masks) if not m.any()]
        if empty:
            raise DataError(f"folds {empty} contain no estimation rows")
        jobs = ((rows, ~masks[l], spec, spec_p, l) for l in range(plan.n_folds))
        if n_jobs == 1:
            fitted = [_fit_fold(*args) for args in jobs]
        else:
            fitted = Parallel(n_jobs=n_jobs)(delayed(_fit_fold)(*args)
                                             for args in jobs)
        for l, (model_q, model_p) in enumerate(fitted):
            q_hat[masks[l]] = model_q.predict(rows.X[masks[l]])
            p_hat[masks[l]] = model_p.predict(rows.X[masks[l]])

    modifiers, names, dropped = build_modifiers(
        rows, standardize_lags=standardize_lags,
        rescale_similarities=rescale_similarities)
    return ResidualPanel(
        product_ids=rows.product_ids.copy(),
        periods=rows.periods.copy(),
        q_perp=rows.q - q_hat,
        p_perp=rows.p - p_hat,
        modifiers=modifiers,
        modifier_names=names,
        folds=folds,
        dropped_modifiers=dropped,
    )


@dataclass(frozen=True)
class EffectEstimate:
    """Coefficients with cluster-robust covariance and normal (default) or
    t(G-1) reference distribution for tests and intervals."""

    names: tuple[str, ...]
    coef: np.ndarray
    covariance: np.ndarray
    n_obs: int
    n_clusters: int
    level: float = 0.90
    dist: str = "normal"
    dropped_modifiers: tuple[str, ...] = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def t_stats(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.coef / se
            degenerate = np.where(self.coef == 0, 0.0,
                                  np.sign(self.coef) * np.inf)
        return np.where(se > 0, t, degenerate)

    def _critical(self, level: float | None = None) -> float:
        level = self.level if level is None else level
        tail = 0.5 + level / 2.0
        if self.dist == "t":
            return float(stats.t.ppf(tail, df=max(self.n_clusters - 1, 1)))
        return float(stats.norm.ppf(tail))

    @property
    def p_values(self) -> np.ndarray:
        t = np.abs(self.t_stats)
        if self.dist == "t":
            return 2.0 * stats.t.sf(t, df=max(self.n_clusters - 1, 1))
        return 2.0 * stats.norm.sf(t)

    def conf_int(self, level: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        crit = self._critical(level)
        return self.coef - crit * self.se, self.coef + crit * self.se

    def __getitem__(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"no coefficient named {name!r}; "
                              f"have {list(self.names)}") from None


def clustered_covariance(design: np.ndarray, residuals: np.ndarray,
                         clusters: np.ndarray) -> np.ndarray:
    """Cluster-robust sandwich covariance of OLS coefficients."""
    X = np.asarray(design, dtype=float)
    e = np.asarray(residuals, dtype=float)
    n, k = X.shape
    if e.shape != (n,) or len(clusters) != n:
        raise DataError("design, residuals and clusters must align")
    _, inv = np.unique(np.asarray(clusters, dtype=object), return_inverse=True)
    G = int(inv.max()) + 1
    if G < 2:
        raise DataError("clustered covariance needs at least 2 clusters")
    xtx = X.T @ X
    try:
        bread = np.linalg.inv(xtx)
    except np.linalg.LinAlgError:
        raise NumericalError("X'X is singular; design is rank deficient") from None
    scores = np.zeros((G, k))
    np.add.at(scores, inv, X * e[:, None])
    meat = scores.T @ scores
    factor = (G / (G - 1)) * ((n - 1) / (n - k))
    V = factor * bread @ meat @ bread
    return (V + V.T) / 2.0


def estimate_homogeneous(res: ResidualPanel, level: float = 0.90,
                         dist: str = "normal") -> EffectEstimate:
    """Single slope of Q_perp on P_perp (no intercept), clustered by product."""
    p = res.p_perp
    denom = float(p @ p)
    if denom <= 0.0:
        raise NumericalError("no treatment variation: sum of squared price "
                             "residuals is zero")
    delta = float(p @ res.q_perp) / denom
    resid = res.q_perp - delta * p
    V = clustered_covariance(p[:, None], resid, res.product_ids)
    return EffectEstimate(
        names=("Price Effect",),
        coef=np.array([delta]),
        covariance=V,
        n_obs=res.n_rows,
        n_clusters=len(np.unique(res.product_ids)),
        level=level,
        dist=dist,
        dropped_modifiers=res.dropped_modifiers,
    )


def estimate_heterogeneous(res: ResidualPanel, level: float = 0.90,
                           dist: str = "normal") -> EffectEstimate:
    """Least squares of Q_perp on P_perp interacted with the modifiers.

    The coefficient on P_perp times the constant is the centercept, i.e. the
    average effect over the estimation rows.
    """
    D = res.p_perp[:, None] * res.modifiers
    _, R, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(D.shape) * np.finfo(float).eps if diag[0] > 0 else 0.0
    rank = int((diag > tol).sum())
    if rank < D.shape[1]:
        culprits = [res.modifier_names[i] for i in sorted(piv[rank:])]
        raise NumericalError(f"collinear modifier columns: {culprits}")
    theta, *_ = np.linalg.lstsq(D, res.q_perp, rcond=None)
    resid = res.q_perp - D @ theta
    V = clustered_covariance(D, resid, res.product_ids)
    return EffectEstimate(
        names=res.modifier_names,
        coef=theta,
        covariance=V,
        n_obs=res.n_rows,
        n_clusters=len(np.unique(res.product_ids)),
        level=level,
        dist=dist,
        dropped_modifiers=res.dropped_modifiers,
    )


def wald_joint_test(est: EffectEstimate, subset) -> tuple[float, int, float]:
    """Chi-square test that the named coefficients are jointly zero.

    Returns (statistic, degrees of freedom, p-value).
    """
    labels = list(subset)
    if not labels:
        raise ConfigError("wald_joint_test needs a non-empty subset")
    idx = [est[label] for label in labels]
    theta = est.coef[idx]
    V = est.covariance[np.ix_(idx, idx)]
    try:
        solved = scipy.linalg.solve(V, theta, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise NumericalError("covariance block is singular") from None
    if not np.isfinite(solved).all():
        raise NumericalError("covariance block is singular")
    w = max(float(theta @ solved), 0.0)
    df = len(idx)
    return w, df, float(stats.chi2.sf(w, df))


@dataclass(frozen=True)
class SortedEffectsCurve:
    """Per-observation effects sorted ascending with pointwise bands."""

    percentile: np.ndarray
    alpha: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float

    def to_csv(self, path, header_comments=()) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            fh.write("index,alpha,lo,hi\n")
            for row in zip(self.percentile, self.alpha, self.ci_lower,
                           self.ci_upper):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def sorted_effects(est: EffectEstimate, modifiers: np.ndarray,
                   level: float | None = None) -> SortedEffectsCurve:
    """Evaluate alpha(s_i) = x_i' theta for every modifier row, with
    pointwise variance x_i' V x_i, sorted ascending."""
    M = np.asarray(modifiers, dtype=float)
    if M.ndim != 2 or M.shape[1] != len(est.names):
        raise DataError(f"modifier matrix must have {len(est.names)} columns")
    level = est.level if level is None else level
    alpha = M @ est.coef
    var = np.einsum("ij,jk,ik->i", M, est.covariance, M)
    se = np.sqrt(np.clip(var, 0.0, None))
    crit = dataclasses.replace(est, level=level)._critical()
    order = np.argsort(alpha, kind="stable")
    n = alpha.shape[0]
    return SortedEffectsCurve(
        percentile=np.arange(1, n + 1) / n,
        alpha=alpha[order],
        ci_lower=(alpha - crit * se)[order],
        ci_upper=(alpha + crit * se)[order],
        level=level,
    )


def rank_fwl_check(rows: StateRows) -> tuple[float, float]:
    """Frisch-Waugh-Lovell check for the linear full-sample path.

    Returns (residual-on-residual slope, joint-OLS coefficient on the
    treatment); the two must agree to numerical precision.
    """
    n = rows.n_rows
    A = np.column_stack([np.ones(n), rows.p, rows.X])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise NumericalError("joint design is rank deficient")
    res = partial_out(rows, LearnerSpec(kind=learners.LINEAR), plan=None)
    denom = float(res.p_perp @ res.p_perp)
    if denom <= 0.0:
        raise NumericalError("treatment fully explained by the state")
    delta_dml = float(res.p_perp @ res.q_perp) / denom
    beta, *_ = np.linalg.lstsq(A, rows.q, rcond=None)
    return delta_dml, float(beta[1])


# -- report formatting --------------------------------------------------------

def format_estimate_table(est: EffectEstimate, label: str = "Modifier") -> str:
    """Fixed-width table with the columns coef, std err, t, P-val.,
    [lo%, hi%] at the estimate's confidence level, 3 decimals."""
    lo_pct = (1.0 - est.level) / 2.0 * 100.0
    hi_pct = 100.0 - lo_pct
    headers = ["coef", "std err", "t", "P-val.", f"[{lo_pct:.1f}%", f"{hi_pct:.1f}%]"]
    name_w = max(len(label), *(len(n) for n in est.names))
    lines = [label.ljust(name_w) + "".join(h.rjust(10) for h in headers)]
    lo, hi = est.conf_int()
    for i, name in enumerate(est.names):
        cells = [est.coef[i], est.se[i], est.t_stats[i], est.p_values[i],
                 lo[i], hi[i]]
        lines.append(name.ljust(name_w)
                     + "".join(f"{c:>10.3f}" for c in cells))
    return "\n".join(lines)


def wald_report(est: EffectEstimate) -> dict[str, dict[str, float]]:
    """Joint-significance p-values for the modifier groups: every modifier
    except the centercept, and the similarity modifiers alone."""
    all_mods = [n for n in est.names if n != "Centercept"]
    sims = [n for n in est.names if n.startswith("Cluster Similarity")]
    out: dict[str, dict[str, float]] = {}
    for label, subset in (("All Modifiers", all_mods),
                          ("Similarities Only", sims)):
        if not subset:
            continue
        stat, df, p = wald_joint_test(est, subset)
        out[label] = {"statistic": stat, "df": df, "p_value": p}
    return out


def format_wald_table(report: dict[str, dict[str, float]],
                      model_label: str) -> str:
    cols = list(report)
    head = "Model".ljust(40) + "".join(c.rjust(20) for c in cols)
    row = model_label.ljust(40) + "".join(
        f"{report[c]['p_value']:>20.3f}" for c in cols)
    return head + "\n" + row

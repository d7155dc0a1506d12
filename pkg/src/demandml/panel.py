"""Product-by-period panel of quantity and price signals.

The quantity signal q is the log inverse time-averaged sales rank and the
price signal p is the log time-averaged price. Panels are balanced: every
product carries observations for periods 0..T with no gaps. Control columns
come in two groups: time-varying tabular controls (ratings, review counts,
flags) and static embedding-derived features per product. Feature columns
are recognised by name prefix: ``emb_`` (normalized embedding coordinates),
``sim_`` (centroid cosine similarities), ``pc_`` (principal components).

All containers are frozen; operations return new objects and are safe to
share across threads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

FEATURE_PREFIXES = ("emb_", "sim_", "pc_")

#: valid control-set selectors for build_state
CONTROL_FAMILIES = {
    "embeddings": "emb_",
    "similarities": "sim_",
    "pca": "pc_",
    "tabular": None,
}


def _is_feature_name(name: str) -> bool:
    return name.startswith(FEATURE_PREFIXES)


@dataclass(frozen=True)
class PanelObservation:
    """One (product, period) record."""

    product_id: str
    period: int
    q: float
    p: float
    tabular_controls: np.ndarray
    embedding_features: np.ndarray


@dataclass(frozen=True)
class StateVector:
    """State S_it = (Q_{i,t-1}, P_{i,t-1}, X_it), defined for t >= 1."""

    q_lag: float
    p_lag: float
    controls: np.ndarray
    control_names: tuple[str, ...]


@dataclass(frozen=True)
class PanelDataset:
    """Balanced panel stored column-wise, sorted by (product_id, period).

    q, p have shape (N, T+1); tabular has shape (N, T+1, n_tab); features
    are static per product with shape (N, n_feat).
    """

    product_ids: tuple[str, ...]
    q: np.ndarray
    p: np.ndarray
    tabular: np.ndarray
    tabular_names: tuple[str, ...]
    features: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        n, periods = self.q.shape
        if len(self.product_ids) != n:
            raise DataError("product_ids length does not match q rows")
        if self.p.shape != (n, periods):
            raise DataError("p shape differs from q shape")
        if self.tabular.shape[:2] != (n, periods):
            raise DataError("tabular controls shape mismatch")
        if self.tabular.shape[2] != len(self.tabular_names):
            raise DataError("tabular_names length mismatch")
        if self.features.shape != (n, len(self.feature_names)):
            raise DataError("feature_names length mismatch")
        if len(set(self.product_ids)) != n:
            raise DataError("duplicate product ids")
        if any(self.product_ids[i] > self.product_ids[i + 1] for i in range(n - 1)):
            raise DataError("product ids must be sorted")
        if not (np.isfinite(self.q).all() and np.isfinite(self.p).all()):
            raise DataError("q and p must be finite")

    @property
    def n_products(self) -> int:
        return len(self.product_ids)

    @property
    def n_periods(self) -> int:
        """Total period count T+1 (periods indexed 0..T)."""
        return self.q.shape[1]

    @property
    def control_names(self) -> tuple[str, ...]:
        return self.tabular_names + self.feature_names

    def observation(self, product_id: str, period: int) -> PanelObservation:
        i = self.product_ids.index(product_id)
        return PanelObservation(
            product_id=product_id,
            period=period,
            q=float(self.q[i, period]),
            p=float(self.p[i, period]),
            tabular_controls=self.tabular[i, period].copy(),
            embedding_features=self.features[i].copy(),
        )

    def iter_observations(self) -> Iterator[PanelObservation]:
        for i, pid in enumerate(self.product_ids):
            for t in range(self.n_periods):
                yield PanelObservation(
                    pid, t, float(self.q[i, t]), float(self.p[i, t]),
                    self.tabular[i, t].copy(), self.features[i].copy(),
                )

    def subset(self, indices: Sequence[int]) -> "PanelDataset":
        idx = np.asarray(sorted(indices), dtype=int)
        return PanelDataset(
            product_ids=tuple(self.product_ids[i] for i in idx),
            q=self.q[idx].copy(),
            p=self.p[idx].copy(),
            tabular=self.tabular[idx].copy(),
            tabular_names=self.tabular_names,
            features=self.features[idx].copy(),
            feature_names=self.feature_names,
        )

    def with_features(self, features: np.ndarray, names: Sequence[str]) -> "PanelDataset":
        """Return a copy carrying new static per-product feature columns."""
        features = np.asarray(features, dtype=float)
        if features.shape[0] != self.n_products:
            raise DataError("feature rows do not match product count")
        bad = [n for n in names if not _is_feature_name(n)]
        if bad:
            raise ConfigError(f"feature names must use prefixes {FEATURE_PREFIXES}: {bad}")
        return replace(self, features=features, feature_names=tuple(names))

    # -- CSV round trip ----------------------------------------------------

    def to_csv(self, path, header_comments: Sequence[str] = ()) -> None:
        """Write rows `product_id,period,q,p,<controls...>` (UTF-8, '.' decimal)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["product_id", "period", "q", "p", *self.control_names])
            for i, pid in enumerate(self.product_ids):
                for t in range(self.n_periods):
                    row = [pid, t, repr(float(self.q[i, t])), repr(float(self.p[i, t]))]
                    row += [repr(float(v)) for v in self.tabular[i, t]]
                    row += [repr(float(v)) for v in self.features[i]]
                    writer.writerow(row)

    @staticmethod
    def from_csv(path) -> "PanelDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if not rows:
            raise DataError(f"{path}: empty panel file")
        header = rows[0]
        if header[:4] != ["product_id", "period", "q", "p"]:
            raise DataError(f"{path}: header must start with product_id,period,q,p")
        control_names = header[4:]
        records: dict[str, dict[int, list[float]]] = {}
        for r in rows[1:]:
            pid, t = r[0], int(r[1])
            per_product = records.setdefault(pid, {})
            if t in per_product:
                raise DataError(f"duplicate observation for product {pid}, period {t}")
            per_product[t] = [float(v) for v in r[2:]]
        return _assemble_panel(records, control_names)


def _assemble_panel(records: Mapping[str, Mapping[int, list[float]]],
                    control_names: Sequence[str]) -> PanelDataset:
    product_ids = tuple(sorted(records))
    periods = sorted(records[product_ids[0]])
    n_periods = len(periods)
    if periods != list(range(n_periods)):
        raise DataError(f"product {product_ids[0]}: periods must be 0..T without gaps")
    for pid in product_ids:
        if sorted(records[pid]) != periods:
            raise DataError(f"unbalanced panel: product {pid} periods differ")
    tab_names = tuple(n for n in control_names if not _is_feature_name(n))
    feat_names = tuple(n for n in control_names if _is_feature_name(n))
    tab_cols = [i for i, n in enumerate(control_names) if not _is_feature_name(n)]
    feat_cols = [i for i, n in enumerate(control_names) if _is_feature_name(n)]

    n = len(product_ids)
    q = np.empty((n, n_periods))
    p = np.empty((n, n_periods))
    tab = np.empty((n, n_periods, len(tab_names)))
    feats = np.empty((n, len(feat_names)))
    for i, pid in enumerate(product_ids):
        for t in range(n_periods):
            vals = records[pid][t]
            if len(vals) != 2 + len(control_names):
                raise DataError(f"product {pid}, period {t}: wrong column count")
            q[i, t], p[i, t] = vals[0], vals[1]
            controls = vals[2:]
            tab[i, t] = [controls[c] for c in tab_cols]
            row_feats = np.array([controls[c] for c in feat_cols])
            if t == 0:
                feats[i] = row_feats
            elif feat_cols and not np.array_equal(feats[i], row_feats):
                raise DataError(f"product {pid}: embedding features vary over time")
    return PanelDataset(product_ids, q, p, tab, tab_names, feats, feat_names)


# -- signal construction from raw ticks -------------------------------------

def read_raw_ticks(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Read `product_id,tick,rank,price` rows into per-product tick series."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["product_id", "tick", "rank", "price"]:
        raise DataError(f"{path}: header must be product_id,tick,rank,price")
    acc: dict[str, list[tuple[int, float, float]]] = {}
    for r in rows[1:]:
        acc.setdefault(r[0], []).append((int(r[1]), float(r[2]), float(r[3])))
    out = {}
    for pid, ticks in acc.items():
        ticks.sort()
        out[pid] = (np.array([t[1] for t in ticks]), np.array([t[2] for t in ticks]))
    return out


def build_signals(raw: Mapping[str, tuple[np.ndarray, np.ndarray]],
                  period_length: int,
                  n_periods: int,
                  stride: int | None = None) -> PanelDataset:
    """Aggregate raw rank/price ticks into period signals.

    Period t covers ticks [t*stride, t*stride + period_length); by default
    stride equals period_length (non-overlapping periods). The quantity
    signal is q = log(1 / mean(rank)) and the price signal p = log(mean(price)),
    with the arithmetic mean taken over the ticks of the period.
    """
    if period_length < 1 or n_periods < 1:
        raise ConfigError("period_length and n_periods must be >= 1")
    stride = period_length if stride is None else stride
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    needed = (n_periods - 1) * stride + period_length
    records: dict[str, dict[int, list[float]]] = {}
    for pid in sorted(raw):
        ranks, prices = (np.asarray(a, dtype=float) for a in raw[pid])
        if ranks.shape != prices.shape:
            raise DataError(f"product {pid}: rank and price tick counts differ")
        if ranks.size < needed:
            raise DataError(
                f"product {pid}: {ranks.size} ticks < {needed} needed for "
                f"{n_periods} periods of length {period_length} (stride {stride})")
        for bad_name, series in (("rank", ranks), ("price", prices)):
            nonpos = np.nonzero(series <= 0)[0]
            if nonpos.size:
                raise DataError(
                    f"product {pid}: nonpositive {bad_name} at tick {int(nonpos[0])}")
        per_product = {}
        for t in range(n_periods):
            lo = t * stride
            window = slice(lo, lo + period_length)
            q = -math.log(ranks[window].mean())
            p = math.log(prices[window].mean())
            per_product[t] = [q, p]
        records[pid] = per_product
    return _assemble_panel(records, [])


# -- derived views -----------------------------------------------------------

@dataclass(frozen=True)
class SignalDifferences:
    """First differences dq_it = q_it - q_{i,t-1} for t = 1..T (columns)."""

    product_ids: tuple[str, ...]
    dq: np.ndarray
    dp: np.ndarray


def difference_signals(panel: PanelDataset) -> SignalDifferences:
    if panel.n_periods < 2:
        raise DataError("differencing needs at least 2 periods")
    return SignalDifferences(
        product_ids=panel.product_ids,
        dq=np.diff(panel.q, axis=1),
        dp=np.diff(panel.p, axis=1),
    )


@dataclass(frozen=True)
class StateRows:
    """Stacked estimation rows (one per product and period t >= 1).

    X columns are q_lag, p_lag followed by the selected controls at time t;
    q and p hold the contemporaneous outcome and treatment signals. Rows are
    sorted by (product_id, period).
    """

    product_ids: np.ndarray
    periods: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    q: np.ndarray
    p: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.names.index(name)]
        except ValueError:
            raise ConfigError(f"no state column named {name!r}") from None

    def drop_columns(self, names: Iterable[str]) -> "StateRows":
        drop = set(names)
        missing = drop - set(self.names)
        if missing:
            raise ConfigError(f"cannot drop unknown columns {sorted(missing)}")
        keep = [i for i, n in enumerate(self.names) if n not in drop]
        return replace(self, X=self.X[:, keep],
                       names=tuple(n for n in self.names if n not in drop))

    def state_vector(self, row: int) -> StateVector:
        return StateVector(
            q_lag=float(self.column("q_lag")[row]),
            p_lag=float(self.column("p_lag")[row]),
            controls=self.X[row, 2:].copy(),
            control_names=self.names[2:],
        )


def build_state(panel: PanelDataset,
                control_set: Sequence[str] = ("similarities", "tabular")) -> StateRows:
    """Assemble (state, outcome, treatment) rows for every period t >= 1.

    control_set selects which control families enter the state alongside the
    lagged signals: any of "embeddings", "similarities", "pca", "tabular".
    """
    if panel.n_periods < 2:
        raise DataError("state construction needs at least 2 periods")
    families = list(dict.fromkeys(control_set))
    unknown = [f for f in families if f not in CONTROL_FAMILIES]
    if unknown:
        raise ConfigError(f"unknown control families {unknown}; "
                          f"valid: {sorted(CONTROL_FAMILIES)}")
    feat_cols: list[int] = []
    feat_names: list[str] = []
    use_tabular = False
    for fam in families:
        prefix = CONTROL_FAMILIES[fam]
        if prefix is None:
            if not panel.tabular_names:
                raise ConfigError("control set requests tabular controls "
                                  "but the panel has none")
            use_tabular = True
            continue
        cols = [i for i, n in enumerate(panel.feature_names) if n.startswith(prefix)]
        if not cols:
            raise ConfigError(f"control set requests {fam} but the panel has "
                              f"no {prefix}* feature columns")
        feat_cols.extend(cols)
        feat_names.extend(panel.feature_names[i] for i in cols)

    n, t_total = panel.n_products, panel.n_periods
    t_rows = t_total - 1
    q_lag = panel.q[:, :-1].reshape(-1)
    p_lag = panel.p[:, :-1].reshape(-1)
    blocks = [q_lag[:, None], p_lag[:, None]]
    names = ["q_lag", "p_lag"]
    if feat_cols:
        feats = np.repeat(panel.features[:, feat_cols], t_rows, axis=0)
        blocks.append(feats)
        names.extend(feat_names)
    if use_tabular:
        blocks.append(panel.tabular[:, 1:, :].reshape(n * t_rows, -1))
        names.extend(panel.tabular_names)
    return StateRows(
        product_ids=np.repeat(np.array(panel.product_ids, dtype=object), t_rows),
        periods=np.tile(np.arange(1, t_total), n),
        X=np.column_stack(blocks),
        names=tuple(names),
        q=panel.q[:, 1:].reshape(-1),
        p=panel.p[:, 1:].reshape(-1),
    )


def split_by_product(panel: PanelDataset, fraction: float,
                     seed: int) -> tuple[PanelDataset, PanelDataset]:
    """Partition products into two disjoint sub-panels, deterministically."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    n = panel.n_products
    if n < 2:
        raise DataError("need at least 2 products to split")
    perm = np.random.default_rng(seed).permutation(n)
    n1 = min(max(int(round(fraction * n)), 1), n - 1)
    return panel.subset(perm[:n1]), panel.subset(perm[n1:])


def rank_to_demand_elasticity(delta: float, theta: float) -> float:
    """Convert a rank-based price coefficient into a demand elasticity.

    Under the power-law link between sales and sales rank with shape theta,
    the demand elasticity is the rank-based coefficient divided by theta.
    """
    if theta <= 0:
        raise ConfigError(f"theta must be positive, got {theta}")
    return delta / theta

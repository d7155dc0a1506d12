"""Synthetic dynamic panels with known per-observation price elasticity.

The generator follows a structural equation model: each period the state
S_it = (Q_{i,t-1}, P_{i,t-1}, X_it) is assembled, the time-varying tabular
controls evolve by an AR(1) recursion, price responds to the state plus its
own shock, a random elasticity A_it is drawn around the configured
elasticity function, and the quantity signal is Q_it = A_it * P_it + q(S_it)
plus demand noise. The demand shock can be leaked into the price equation
with weight kappa to create deliberate confounding; kappa = 0 keeps price
exogenous conditional on the state.

Product heterogeneity enters through latent clusters on the unit
hypersphere: every product gets an embedding near one of K centroid
directions, and the panel carries the cosine similarities of the true
embeddings to the true centroids as static `sim_*` feature columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError
from .panel import PanelDataset, StateVector

_CENTROID_COS_MAX = 0.5
_CENTROID_TRIES_PER_DIRECTION = 200


@dataclass(frozen=True)
class HomogeneousElasticity:
    """Constant elasticity: alpha(S) = alpha0 for every observation."""

    alpha0: float


@dataclass(frozen=True)
class HeterogeneousElasticity:
    """Linear elasticity function of centered effect modifiers.

    alpha(S) = a0 + sum_k sim_coefs[k] * (sim_k - sim_centers[k])
                  + b_price_lag * (p_lag - p_lag_center) / p_lag_scale
                  + b_quantity_lag * (q_lag - q_lag_center) / q_lag_scale

    With the centers and scales set to the population moments of the
    modifiers, a0 is the average effect.
    """

    a0: float
    sim_coefs: tuple[float, ...]
    b_price_lag: float = 0.0
    b_quantity_lag: float = 0.0
    sim_centers: tuple[float, ...] = ()
    p_lag_center: float = 0.0
    p_lag_scale: float = 1.0
    q_lag_center: float = 0.0
    q_lag_scale: float = 1.0

    def __post_init__(self):
        if self.p_lag_scale <= 0 or self.q_lag_scale <= 0:
            raise ConfigError("lag scales must be positive")
        if self.sim_centers and len(self.sim_centers) != len(self.sim_coefs):
            raise ConfigError("sim_centers length must match sim_coefs")


ElasticitySpec = Union[HomogeneousElasticity, HeterogeneousElasticity]


@dataclass(frozen=True)
class SignalSpec:
    """Linear structural function of the state, plus an i.i.d. noise scale."""

    intercept: float
    q_lag: float
    p_lag: float
    sim: tuple[float, ...]
    tabular: tuple[float, ...]
    noise_scale: float

    def __post_init__(self):
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


@dataclass(frozen=True)
class OutcomeSpec(SignalSpec):
    """Outcome structural function; optionally adds a smooth nonlinearity
    nonlin_scale * tanh(q_lag - nonlin_center) so tree learners have
    curvature to find while linear learners are misspecified."""

    nonlin_scale: float = 0.0
    nonlin_center: float = 0.0


@dataclass(frozen=True)
class StateSpec:
    """AR(1) recursion for each time-varying tabular control."""

    intercepts: tuple[float, ...]
    own_lag: tuple[float, ...]
    noise_scale: tuple[float, ...]

    def __post_init__(self):
        k = len(self.intercepts)
        if len(self.own_lag) != k or len(self.noise_scale) != k:
            raise ConfigError("state spec vectors must share one length")
        if any(s < 0 for s in self.noise_scale):
            raise ConfigError("state noise scales must be >= 0")


@dataclass(frozen=True)
class SemConfig:
    n_products: int
    n_periods: int
    embedding_dim: int
    n_clusters: int
    elasticity: ElasticitySpec
    outcome: OutcomeSpec
    price: SignalSpec
    state: StateSpec
    confounding: float = 0.0
    elasticity_noise: float = 0.0
    embedding_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_products < 1 or self.n_periods < 1:
            raise ConfigError("n_products and n_periods must be >= 1")
        if self.n_clusters < 1:
            raise ConfigError("need n_clusters >= 1")
        if self.embedding_dim < self.n_clusters:
            raise ConfigError("embedding_dim must be >= n_clusters")
        if self.elasticity_noise < 0 or self.embedding_noise < 0:
            raise ConfigError("noise scales must be >= 0")
        for label, coef in (("outcome.q_lag", self.outcome.q_lag),
                            ("price.p_lag", self.price.p_lag),
                            *((f"state.own_lag[{i}]", c)
                              for i, c in enumerate(self.state.own_lag))):
            if abs(coef) >= 1.0:
                raise ConfigError(
                    f"stability: |{label}| = {abs(coef)} >= 1 makes the "
                    "state recursion explosive")
        k, n_tab = self.n_clusters, len(self.state.intercepts)
        for label, spec in (("outcome", self.outcome), ("price", self.price)):
            if len(spec.sim) != k:
                raise ConfigError(f"{label}.sim must have length {k}")
            if len(spec.tabular) != n_tab:
                raise ConfigError(f"{label}.tabular must have length {n_tab}")
        if isinstance(self.elasticity, HeterogeneousElasticity):
            if len(self.elasticity.sim_coefs) != k:
                raise ConfigError(f"elasticity sim_coefs must have length {k}")

    @property
    def nominal_ace(self) -> float:
        """The configured average effect (exact when the heterogeneous
        centers equal the population modifier means)."""
        if isinstance(self.elasticity, HomogeneousElasticity):
            return self.elasticity.alpha0
        return self.elasticity.a0


@dataclass(frozen=True)
class GroundTruth:
    """Per-observation truth for periods t = 1..T (the estimable rows)."""

    a: np.ndarray                 # (N, T) realized elasticity A_it
    cace: np.ndarray              # (N, T) alpha(S_it)
    ace: float                    # configured population average effect
    cluster_label: np.ndarray     # (N,)
    true_embeddings: np.ndarray   # (N, d)
    centroids: np.ndarray         # (K, d)


def simulate_embeddings(config: SemConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw unit-norm product embeddings around K separated centroids.

    Returns (embeddings (N, d), cluster_label (N,), centroids (K, d)).
    Centroid directions are sampled uniformly on the hypersphere and accepted
    only while all pairwise cosines stay below 0.5; cluster sizes are
    balanced to within one product. embedding_noise is the expected Euclidean
    length of the isotropic perturbation added before renormalization.
    """
    if config.n_clusters > config.n_products:
        raise ConfigError("n_clusters cannot exceed n_products")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0])
    d, k = config.embedding_dim, config.n_clusters
    centroids = np.empty((k, d))
    accepted = 0
    tries = 0
    while accepted < k:
        if tries >= _CENTROID_TRIES_PER_DIRECTION * k:
            raise ConfigError(
                f"could not place {k} centroid directions with pairwise "
                f"cosine < {_CENTROID_COS_MAX} in dimension {d}; "
                "increase embedding_dim")
        tries += 1
        cand = rng.standard_normal(d)
        cand /= np.linalg.norm(cand)
        if accepted and (centroids[:accepted] @ cand).max() >= _CENTROID_COS_MAX:
            continue
        centroids[accepted] = cand
        accepted += 1

    n = config.n_products
    labels = rng.permutation(n) % k
    noise = rng.standard_normal((n, d)) * (config.embedding_noise / math.sqrt(d))
    emb = centroids[labels] + noise
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return emb, labels, centroids


def _eval_elasticity(spec: ElasticitySpec, q_lag, p_lag, sims) -> np.ndarray:
    q_lag = np.asarray(q_lag, dtype=float)
    if isinstance(spec, HomogeneousElasticity):
        return np.full(q_lag.shape, spec.alpha0)
    centers = np.asarray(spec.sim_centers if spec.sim_centers
                         else np.zeros(len(spec.sim_coefs)))
    out = spec.a0 + (np.asarray(sims) - centers) @ np.asarray(spec.sim_coefs)
    out = out + spec.b_price_lag * (np.asarray(p_lag) - spec.p_lag_center) / spec.p_lag_scale
    out = out + spec.b_quantity_lag * (q_lag - spec.q_lag_center) / spec.q_lag_scale
    return out


def _eval_signal(spec: SignalSpec, q_lag, p_lag, sims, tab) -> np.ndarray:
    out = spec.intercept + spec.q_lag * q_lag + spec.p_lag * p_lag
    if len(spec.sim):
        out = out + sims @ np.asarray(spec.sim)
    if len(spec.tabular):
        out = out + tab @ np.asarray(spec.tabular)
    if isinstance(spec, OutcomeSpec) and spec.nonlin_scale:
        out = out + spec.nonlin_scale * np.tanh(q_lag - spec.nonlin_center)
    return out


def ground_truth_cace(truth: GroundTruth, state: StateVector,
                      config: SemConfig) -> float:
    """Evaluate the configured elasticity function at one state vector.

    A homogeneous config returns alpha0 regardless of the state. The
    similarity modifiers are read from the state's `sim_*` control columns.
    """
    sims = np.array([state.controls[i]
                     for i, name in enumerate(state.control_names)
                     if name.startswith("sim_")])
    if (isinstance(config.elasticity, HeterogeneousElasticity)
            and sims.size != len(config.elasticity.sim_coefs)):
        raise ConfigError("state carries a different number of sim_* columns "
                          "than the elasticity spec")
    return float(_eval_elasticity(config.elasticity, state.q_lag,
                                  state.p_lag, sims))


def _stationary_point(config: SemConfig, sims: np.ndarray,
                      x_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-product (q, p) fixed point of the noiseless recursion.

    Starting from the intercept-implied values, iterate the deterministic
    system until the signals settle; this makes the noiseless simulator
    exactly stationary from period 0 on.
    """
    q = np.full(sims.shape[0],
                config.outcome.intercept / (1.0 - config.outcome.q_lag))
    p = np.full(sims.shape[0],
                config.price.intercept / (1.0 - config.price.p_lag))
    for _ in range(500):
        p_new = _eval_signal(config.price, q, p, sims, x_bar)
        alpha = _eval_elasticity(config.elasticity, q, p, sims)
        q_new = alpha * p_new + _eval_signal(config.outcome, q, p, sims, x_bar)
        if (np.abs(q_new - q).max() < 1e-13
                and np.abs(p_new - p).max() < 1e-13):
            q, p = q_new, p_new
            break
        q, p = q_new, p_new
    return q, p


def simulate(config: SemConfig) -> tuple[PanelDataset, GroundTruth]:
    """Generate a balanced panel with periods 0..T and its ground truth.

    Period -1 starts at the deterministic stationary point of the noiseless
    recursion and one burn-in period is generated and discarded, so period 0
    already carries realized shocks. For t >= 1 the recorded truth holds
    A_it and alpha(S_it) aligned with the estimable state rows.
    """
    emb, labels, centroids = simulate_embeddings(config)
    sims = emb @ centroids.T
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])

    n, t_count = config.n_products, config.n_periods
    n_tab = len(config.state.intercepts)
    s_int = np.asarray(config.state.intercepts)
    s_lag = np.asarray(config.state.own_lag)
    s_sd = np.asarray(config.state.noise_scale)

    x = np.tile(s_int / (1.0 - s_lag), (n, 1))
    q, p = _stationary_point(config, sims, x)

    q_panel = np.empty((n, t_count + 1))
    p_panel = np.empty((n, t_count + 1))
    tab_panel = np.empty((n, t_count + 1, n_tab))
    a_truth = np.empty((n, t_count))
    cace_truth = np.empty((n, t_count))

    # step -1 is the discarded burn-in; steps 0..T are stored
    for step in range(-1, t_count + 1):
        x = s_int + s_lag * x + s_sd * rng.standard_normal((n, n_tab))
        eps_p = rng.standard_normal(n)
        eps = rng.standard_normal(n)
        p_new = (_eval_signal(config.price, q, p, sims, x)
                 + config.price.noise_scale * eps_p
                 + config.confounding * eps)
        cace = _eval_elasticity(config.elasticity, q, p, sims)
        a = cace
        if config.elasticity_noise:
            a = cace + config.elasticity_noise * rng.standard_normal(n)
        q_new = (a * p_new + _eval_signal(config.outcome, q, p, sims, x)
                 + config.outcome.noise_scale * eps)
        if step >= 0:
            q_panel[:, step] = q_new
            p_panel[:, step] = p_new
            tab_panel[:, step] = x
            if step >= 1:
                a_truth[:, step - 1] = a
                cace_truth[:, step - 1] = cace
        q, p = q_new, p_new

    width = len(str(n - 1))
    panel = PanelDataset(
        product_ids=tuple(f"prod_{i:0{width}d}" for i in range(n)),
        q=q_panel,
        p=p_panel,
        tabular=tab_panel,
        tabular_names=tuple(f"ctrl_{j}" for j in range(n_tab)),
        features=sims,
        feature_names=tuple(f"sim_{j}" for j in range(config.n_clusters)),
    )
    truth = GroundTruth(
        a=a_truth,
        cace=cace_truth,
        ace=config.nominal_ace,
        cluster_label=labels,
        true_embeddings=emb,
        centroids=centroids,
    )
    return panel, truth


# -- config (de)serialization ------------------------------------------------

def sem_config_to_dict(config: SemConfig) -> dict:
    el = config.elasticity
    if isinstance(el, HomogeneousElasticity):
        el_dict = {"kind": "homogeneous", "alpha0": el.alpha0}
    else:
        el_dict = {
            "kind": "heterogeneous",
            "a0": el.a0,
            "sim_coefs": list(el.sim_coefs),
            "b_price_lag": el.b_price_lag,
            "b_quantity_lag": el.b_quantity_lag,
            "sim_centers": list(el.sim_centers),
            "p_lag_center": el.p_lag_center,
            "p_lag_scale": el.p_lag_scale,
            "q_lag_center": el.q_lag_center,
            "q_lag_scale": el.q_lag_scale,
        }
    return {
        "n_products": config.n_products,
        "n_periods": config.n_periods,
        "embedding_dim": config.embedding_dim,
        "n_clusters": config.n_clusters,
        "elasticity": el_dict,
        "outcome": {
            "intercept": config.outcome.intercept,
            "q_lag": config.outcome.q_lag,
            "p_lag": config.outcome.p_lag,
            "sim": list(config.outcome.sim),
            "tabular": list(config.outcome.tabular),
            "noise_scale": config.outcome.noise_scale,
            "nonlin_scale": config.outcome.nonlin_scale,
            "nonlin_center": config.outcome.nonlin_center,
        },
        "price": {
            "intercept": config.price.intercept,
            "q_lag": config.price.q_lag,
            "p_lag": config.price.p_lag,
            "sim": list(config.price.sim),
            "tabular": list(config.price.tabular),
            "noise_scale": config.price.noise_scale,
        },
        "state": {
            "intercepts": list(config.state.intercepts),
            "own_lag": list(config.state.own_lag),
            "noise_scale": list(config.state.noise_scale),
        },
        "confounding": config.confounding,
        "elasticity_noise": config.elasticity_noise,
        "embedding_noise": config.embedding_noise,
        "seed": config.seed,
    }


def sem_config_from_dict(data: dict) -> SemConfig:
    try:
        el_data = dict(data["elasticity"])
        kind = el_data.pop("kind")
        if kind == "homogeneous":
            elasticity: ElasticitySpec = HomogeneousElasticity(**el_data)
        elif kind == "heterogeneous":
            for key in ("sim_coefs", "sim_centers"):
                if key in el_data:
                    el_data[key] = tuple(el_data[key])
            elasticity = HeterogeneousElasticity(**el_data)
        else:
            raise ConfigError(f"unknown elasticity kind {kind!r}")
        outcome = dict(data["outcome"])
        price = dict(data["price"])
        state = dict(data["state"])
        for block in (outcome, price):
            block["sim"] = tuple(block["sim"])
            block["tabular"] = tuple(block["tabular"])
        return SemConfig(
            n_products=data["n_products"],
            n_periods=data["n_periods"],
            embedding_dim=data["embedding_dim"],
            n_clusters=data["n_clusters"],
            elasticity=elasticity,
            outcome=OutcomeSpec(**outcome),
            price=SignalSpec(**price),
            state=StateSpec(**{k: tuple(v) for k, v in state.items()}),
            confounding=data.get("confounding", 0.0),
            elasticity_noise=data.get("elasticity_noise", 0.0),
            embedding_noise=data.get("embedding_noise", 0.3),
            seed=data["seed"],
        )
    except KeyError as exc:
        raise ConfigError(f"simulator config missing key {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"bad simulator config: {exc}") from None

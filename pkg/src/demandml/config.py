"""Run configuration: YAML schema, validation, and hashing.

The canonical config format is YAML with these top-level keys (see
README.md for a complete annotated example):

    input:        {simulate: <sem config>} or {load: {panel, embeddings, truth}}
    split:        {fraction, seed}
    compression:  {m, K, seed}
    control_set:  list drawn from [embeddings, similarities, pca, tabular]
    learners:     {q: <learner spec>, p: <learner spec>}
    effect:       homogeneous | heterogeneous | both
    folds:        {L, seed}
    crossfit:     true | false   (false = full-sample linear partialling-out)
    level:        confidence level for intervals
    theta:        power-law shape for the demand-elasticity conversion
    eval:         {learners: [...], feature_sets: [...]}   (predictive eval)
    jobs:         worker cap for fold fits

Every seed is explicit; nothing falls back to wall-clock entropy. Configs
round-trip losslessly through to_dict/from_dict, and the config hash is the
sha256 of the canonical (sorted-key) YAML dump.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .learners import LearnerSpec
from .simulator import SemConfig, sem_config_from_dict, sem_config_to_dict

EFFECT_MODES = ("homogeneous", "heterogeneous", "both")
EVAL_FEATURE_SETS = ("tabular", "pca", "similarities", "embeddings")


@dataclass(frozen=True)
class LoadPaths:
    panel: str
    embeddings: str | None = None
    truth: str | None = None


@dataclass(frozen=True)
class EvalConfig:
    learners: tuple[str, ...] = ("linear", "boosted_trees")
    feature_sets: tuple[str, ...] = EVAL_FEATURE_SETS

    def __post_init__(self):
        bad = [f for f in self.feature_sets if f not in EVAL_FEATURE_SETS]
        if bad:
            raise ConfigError(f"unknown eval feature sets {bad}")


@dataclass(frozen=True)
class RunConfig:
    simulate: SemConfig | None
    load: LoadPaths | None
    split_fraction: float = 0.5
    split_seed: int = 1
    compression_m: int = 256
    compression_k: int = 5
    compression_seed: int = 2
    control_set: tuple[str, ...] = ("similarities", "tabular")
    learner_q: LearnerSpec = field(default_factory=lambda: LearnerSpec(kind="boosted_trees"))
    learner_p: LearnerSpec = field(default_factory=lambda: LearnerSpec(kind="boosted_trees"))
    effect: str = "both"
    folds: int = 5
    fold_seed: int = 3
    crossfit: bool = True
    level: float = 0.90
    theta: float = 0.5
    eval: EvalConfig = field(default_factory=EvalConfig)
    jobs: int = 1

    def __post_init__(self):
        if (self.simulate is None) == (self.load is None):
            raise ConfigError("input must be exactly one of simulate/load")
        if self.effect not in EFFECT_MODES:
            raise ConfigError(f"effect must be one of {EFFECT_MODES}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split fraction must lie in (0, 1)")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("confidence level must lie in (0, 1)")
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if self.compression_m < 1 or self.compression_k < 1:
            raise ConfigError("compression m and K must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2 (set crossfit: false for "
                              "the no-cross-fit linear mode)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


def _learner_to_dict(spec: LearnerSpec) -> dict:
    out = {"kind": spec.kind, "seed": spec.seed}
    if spec.kind == "boosted_trees":
        out.update(n_trees=spec.n_trees, learning_rate=spec.learning_rate,
                   max_depth=spec.max_depth,
                   min_samples_leaf=spec.min_samples_leaf,
                   subsample=spec.subsample)
    elif spec.kind == "linear_interactions" and spec.interactions != "lags_x_similarities":
        out["interactions"] = [list(p) for p in spec.interactions]
    return out


def _learner_from_dict(data: dict) -> LearnerSpec:
    data = dict(data)
    if "interactions" in data and not isinstance(data["interactions"], str):
        data["interactions"] = tuple(tuple(p) for p in data["interactions"])
    try:
        return LearnerSpec(**data)
    except TypeError as exc:
        raise ConfigError(f"bad learner spec: {exc}") from None


def run_config_to_dict(cfg: RunConfig) -> dict:
    if cfg.simulate is not None:
        input_block: dict = {"simulate": sem_config_to_dict(cfg.simulate)}
    else:
        load: dict = {"panel": cfg.load.panel}
        if cfg.load.embeddings is not None:
            load["embeddings"] = cfg.load.embeddings
        if cfg.load.truth is not None:
            load["truth"] = cfg.load.truth
        input_block = {"load": load}
    return {
        "input": input_block,
        "split": {"fraction": cfg.split_fraction, "seed": cfg.split_seed},
        "compression": {"m": cfg.compression_m, "K": cfg.compression_k,
                        "seed": cfg.compression_seed},
        "control_set": list(cfg.control_set),
        "learners": {"q": _learner_to_dict(cfg.learner_q),
                     "p": _learner_to_dict(cfg.learner_p)},
        "effect": cfg.effect,
        "folds": {"L": cfg.folds, "seed": cfg.fold_seed},
        "crossfit": cfg.crossfit,
        "level": cfg.level,
        "theta": cfg.theta,
        "eval": {"learners": list(cfg.eval.learners),
                 "feature_sets": list(cfg.eval.feature_sets)},
        "jobs": cfg.jobs,
    }


def run_config_from_dict(data: dict) -> RunConfig:
    try:
        input_block = data["input"]
        simulate = load = None
        if "simulate" in input_block:
            simulate = sem_config_from_dict(input_block["simulate"])
        elif "load" in input_block:
            load = LoadPaths(**input_block["load"])
        else:
            raise ConfigError("input block needs 'simulate' or 'load'")
        split = data.get("split", {})
        comp = data.get("compression", {})
        folds = data.get("folds", {})
        eval_block = data.get("eval", {})
        return RunConfig(
            simulate=simulate,
            load=load,
            split_fraction=split.get("fraction", 0.5),
            split_seed=split.get("seed", 1),
            compression_m=comp.get("m", 256),
            compression_k=comp.get("K", 5),
            compression_seed=comp.get("seed", 2),
            control_set=tuple(data.get("control_set",
                                       ("similarities", "tabular"))),
            learner_q=_learner_from_dict(data["learners"]["q"]),
            learner_p=_learner_from_dict(data["learners"]["p"]),
            effect=data.get("effect", "both"),
            folds=folds.get("L", 5),
            fold_seed=folds.get("seed", 3),
            crossfit=data.get("crossfit", True),
            level=data.get("level", 0.90),
            theta=data.get("theta", 0.5),
            eval=EvalConfig(
                learners=tuple(eval_block.get("learners",
                                              ("linear", "boosted_trees"))),
                feature_sets=tuple(eval_block.get("feature_sets",
                                                  EVAL_FEATURE_SETS)),
            ),
            jobs=data.get("jobs", 1),
        )
    except KeyError as exc:
        raise ConfigError(f"run config missing key {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"bad run config: {exc}") from None


def canonical_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(run_config_to_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_yaml(cfg).encode("utf-8")).hexdigest()


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return run_config_from_dict(data)


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_yaml(cfg))

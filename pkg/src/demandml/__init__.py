"""Demand analysis on product panels: simulation, compression, DML."""

from .compression import (
    CompressionModel,
    center_normalize,
    centroid_similarities,
    fit_compression,
    jl_project,
    load_compression_model,
    pca_features,
    save_compression_model,
    transform,
)
from .dml import (
    EffectEstimate,
    FoldPlan,
    ResidualPanel,
    SortedEffectsCurve,
    clustered_covariance,
    estimate_heterogeneous,
    estimate_homogeneous,
    format_estimate_table,
    make_folds,
    partial_out,
    rank_fwl_check,
    sorted_effects,
    wald_joint_test,
    wald_report,
)
from .errors import ConfigError, DataError, DemandMlError, NumericalError
from .learners import (
    FittedLearner,
    LearnerSpec,
    TreeEnsemble,
    expand_interactions,
    fit,
    predict,
    r2_score,
)
from .panel import (
    PanelDataset,
    PanelObservation,
    SignalDifferences,
    StateRows,
    StateVector,
    build_signals,
    build_state,
    difference_signals,
    rank_to_demand_elasticity,
    read_raw_ticks,
    split_by_product,
)
from .simulator import (
    GroundTruth,
    HeterogeneousElasticity,
    HomogeneousElasticity,
    OutcomeSpec,
    SemConfig,
    SignalSpec,
    StateSpec,
    ground_truth_cace,
    simulate,
    simulate_embeddings,
)

__version__ = "0.1.0"

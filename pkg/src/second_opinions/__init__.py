"""Counterfactual second opinions from panels of experts.

Experts are modelled as noisy argmax classifiers whose noise vector is
shared within latent groups; observing one expert's label then pins down
a posterior over that shared noise, from which the labels other experts
*would have produced* on the same instance can be simulated.  The package
covers the full pipeline: per-expert conditional models, posterior noise
inference, group recovery by greedy clique partitioning of a similarity
graph, evaluation against baselines, and synthetic panel generation.
"""

from .errors import (
    DatasetFormatError,
    DatasetSchemaError,
    EmptyDatasetError,
    GraphTooLargeError,
    InsufficientDataError,
    InvalidArgumentError,
    InvalidEdgeError,
    MissingExpertError,
    NotACliqueCoverError,
    SecondOpinionsError,
)
from .types import (
    CounterfactualEstimate,
    CounterfactualQuery,
    EPSILON_PROB,
    Partition,
    SimplexDistribution,
    floor_probs,
)
from .rng import ordered_map, substream
from .scm import (
    counterfactual_argmax,
    counterfactual_distribution,
    mechanism,
    posterior_noise_from_uniforms,
    sample_joint,
    sample_joint_batch,
    sample_posterior_noise,
    sample_posterior_noise_batch,
    sample_prior_noise,
)
from .models import (
    ABSENT,
    CnbModel,
    ConditionalModel,
    GnbModel,
    LogitModel,
    baseline_gnb_argmax,
    baseline_gnb_cnb_argmax,
    load_models,
    model_from_jsonable,
    save_models,
    train_cnb,
    train_gnb,
)
from .data import (
    PanelDataset,
    Sample,
    SyntheticConfig,
    apply_sparsity,
    generate_synthetic,
    load_dataset,
    preprocess,
    save_dataset,
    sparsity_retained_count,
)
from .partitioning import (
    SimilarityGraph,
    ViolationRecord,
    brute_force_partition,
    compute_edge_weights,
    detect_violations,
    greedy_partition,
    objective,
    partition_with_restarts,
    write_violations_csv,
)
from .evaluation import (
    CounterfactualPredictor,
    EvalReport,
    FunctionPredictor,
    MarginalArgmaxPredictor,
    ProductArgmaxPredictor,
    adjusted_rand_index,
    cnb_models_from_panel,
    edge_ratio,
    evaluate,
    write_report_files,
    zero_one_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ABSENT",
    "CnbModel",
    "ConditionalModel",
    "CounterfactualEstimate",
    "CounterfactualPredictor",
    "CounterfactualQuery",
    "DatasetFormatError",
    "DatasetSchemaError",
    "EPSILON_PROB",
    "EmptyDatasetError",
    "EvalReport",
    "FunctionPredictor",
    "GnbModel",
    "GraphTooLargeError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "InvalidEdgeError",
    "LogitModel",
    "MarginalArgmaxPredictor",
    "MissingExpertError",
    "NotACliqueCoverError",
    "PanelDataset",
    "Partition",
    "ProductArgmaxPredictor",
    "Sample",
    "SecondOpinionsError",
    "SimilarityGraph",
    "SimplexDistribution",
    "SyntheticConfig",
    "ViolationRecord",
    "adjusted_rand_index",
    "apply_sparsity",
    "baseline_gnb_argmax",
    "baseline_gnb_cnb_argmax",
    "brute_force_partition",
    "cnb_models_from_panel",
    "compute_edge_weights",
    "counterfactual_argmax",
    "counterfactual_distribution",
    "detect_violations",
    "edge_ratio",
    "evaluate",
    "floor_probs",
    "generate_synthetic",
    "greedy_partition",
    "load_dataset",
    "load_models",
    "mechanism",
    "model_from_jsonable",
    "objective",
    "ordered_map",
    "partition_with_restarts",
    "posterior_noise_from_uniforms",
    "preprocess",
    "sample_joint",
    "sample_joint_batch",
    "sample_posterior_noise",
    "sample_posterior_noise_batch",
    "sample_prior_noise",
    "save_dataset",
    "save_models",
    "sparsity_retained_count",
    "substream",
    "train_cnb",
    "train_gnb",
    "write_report_files",
    "write_violations_csv",
    "zero_one_loss",
]

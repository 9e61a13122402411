"""Difficulty-aware dynamic mixture-of-experts for graph node classification.

Nodes whose predictive distribution is uncertain get a larger expert budget;
confident nodes get a smaller one. The package covers the model and its
custom differentiation tape, synthetic graph generation, the regularized
training loop, post-hoc analysis (entropy stratification, ablations), the
capacity scaling law, and a command line front end.
"""

from .analysis import (
    AblationResult,
    ActivationStats,
    DecileBucket,
    DecileReport,
    activation_stats,
    decile_activation_spearman,
    proxy_config,
    run_ablation,
    stratify_by_entropy,
    train_proxy,
    variant_label,
)
from .graph import (
    Graph,
    GraphFormatError,
    SbmSpec,
    edge_homophily,
    generate_sbm,
    load_graph_dir,
    split_nodes,
    write_graph,
)
from .moe_core import (
    CheckpointError,
    EvalReport,
    ModelConfig,
    ModelParams,
    RoutingState,
    RoutingTrace,
    TopK,
    evaluate,
    forward,
    init_params,
    load_checkpoint,
    map_budget,
    predict,
    predictive_entropy,
    save_checkpoint,
    select_top_p,
    select_top_p_batch,
)
from .theory import (
    ScalingParams,
    ScalingRow,
    fit_scaling_exponent,
    generalization_error,
    optimal_k_bruteforce,
    optimal_k_closed_form,
    optimal_k_int,
    scaling_rows,
)
from .training import (
    EpochReport,
    FixedTopP,
    Full,
    LossBreakdown,
    NoLoadBalance,
    NoRoutingEntropy,
    RandomTopP,
    StaticTopK,
    TrainConfig,
    TrainingDivergence,
    TrainState,
    Variant,
    fit,
    make_variant,
    total_loss,
    write_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "AblationResult",
    "ActivationStats",
    "CheckpointError",
    "DecileBucket",
    "DecileReport",
    "EpochReport",
    "EvalReport",
    "FixedTopP",
    "Full",
    "Graph",
    "GraphFormatError",
    "LossBreakdown",
    "ModelConfig",
    "ModelParams",
    "NoLoadBalance",
    "NoRoutingEntropy",
    "RandomTopP",
    "RoutingState",
    "RoutingTrace",
    "SbmSpec",
    "ScalingParams",
    "ScalingRow",
    "StaticTopK",
    "TopK",
    "TrainConfig",
    "TrainingDivergence",
    "TrainState",
    "Variant",
    "activation_stats",
    "decile_activation_spearman",
    "edge_homophily",
    "evaluate",
    "fit",
    "fit_scaling_exponent",
    "forward",
    "generalization_error",
    "generate_sbm",
    "init_params",
    "load_checkpoint",
    "load_graph_dir",
    "make_variant",
    "map_budget",
    "optimal_k_bruteforce",
    "optimal_k_closed_form",
    "optimal_k_int",
    "predict",
    "predictive_entropy",
    "proxy_config",
    "run_ablation",
    "save_checkpoint",
    "scaling_rows",
    "select_top_p",
    "select_top_p_batch",
    "split_nodes",
    "stratify_by_entropy",
    "total_loss",
    "train_proxy",
    "variant_label",
    "write_graph",
    "write_metrics",
]

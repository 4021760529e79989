"""umgad: unsupervised anomaly detection on multiplex attributed graphs.

Masked graph autoencoders reconstruct attributes and structure over three
views of the same multiplex graph (original, attribute-augmented,
subgraph-augmented); reconstruction residuals fuse into per-node anomaly
scores and a knee point on the ranked score curve separates anomalies
without supervision.
"""

from .autodiff import AdamW, Parameter, RngStream, Var, backward, finite_diff_check
from .detect import (
    AnomalyScores,
    ScoreCurve,
    ThresholdResult,
    auc,
    classify,
    inject_anomalies,
    macro_f1,
    rank_curve,
    score_nodes,
    select_threshold,
)
from .graph import (
    MultiplexGraph,
    RelationalSubgraph,
    load_multiplex,
    normalize_adjacency,
    save_multiplex,
    zscore_attributes,
)
from .masking import (
    AugmentPlan,
    MaskConfig,
    MaskPlan,
    RwrConfig,
    plan_attribute_augmentation,
    plan_attribute_masks,
    plan_edge_masks,
    sample_rwr_subgraphs,
)
from .model import LossWeights, ModelConfig, ModelParams
from .synthetic import community_graph
from .train import TrainConfig, TrainLog, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AnomalyScores", "AugmentPlan", "LossWeights", "MaskConfig",
    "MaskPlan", "ModelConfig", "ModelParams", "MultiplexGraph", "Parameter",
    "RelationalSubgraph", "RngStream", "RwrConfig", "ScoreCurve",
    "ThresholdResult", "TrainConfig", "TrainLog", "Var", "auc", "backward",
    "classify", "community_graph", "finite_diff_check", "inject_anomalies",
    "load_checkpoint", "load_multiplex", "macro_f1", "normalize_adjacency",
    "plan_attribute_augmentation", "plan_attribute_masks", "plan_edge_masks",
    "rank_curve", "sample_rwr_subgraphs", "save_checkpoint", "save_multiplex",
    "score_nodes", "select_threshold", "train", "zscore_attributes",
]

"""Multi-behavior graph attention recommendation.

Pipeline pieces: interaction-graph construction with temporal splits, a
numpy autodiff tape, per-behavior / cross-behavior attention propagation,
hierarchy-aware pairwise ranking with sub-graph sampling, optional knowledge
graph regularization, top-K ranking metrics, and a scikit-learn style
estimator facade on top.
"""
from .autodiff import GradCheckReport, ShapeError, Tape, Tensor, grad_check
from .estimator import MBGATRecommender, validate_interactions
from .evaluation import (
    EvalSpec,
    MetricsRow,
    MetricsTable,
    evaluate,
    ndcg_at_k,
    rank_items,
    recall_at_k,
)
from .graph import (
    ColumnSchema,
    DataError,
    Interaction,
    MultiBehaviorGraph,
    TemporalSplit,
    build_graph,
    load_graph,
    load_interactions,
    save_graph,
    temporal_split,
)
from .kg import KgData, KgParams, init_kg_params, kg_loss, kg_score, load_kg_triples
from .model import (
    LayerOutput,
    ModelConfig,
    ModelParams,
    NonFiniteError,
    TemporalEncoder,
    forward,
    init_params,
    inter_layer,
    intra_aggregate,
    intra_layer,
    load_checkpoint,
    pair_scores,
    save_checkpoint,
    score,
    score_all_items,
    temporal_encoding,
)
from .sampling import (
    HbprTriple,
    PriorityRank,
    SubGraph,
    TripleBatch,
    behavior_distribution_report,
    compatible_negatives,
    sample_hbpr_triples,
    sample_subgraph,
)
from .synth import SynthConfig, funnel_kg_triples, generate_funnel
from .training import (
    DivergenceError,
    SubgraphMode,
    TrainConfig,
    TrainResult,
    ablate,
    hbpr_loss,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "GradCheckReport", "ShapeError", "Tape", "Tensor", "grad_check",
    "MBGATRecommender", "validate_interactions",
    "EvalSpec", "MetricsRow", "MetricsTable", "evaluate",
    "ndcg_at_k", "rank_items", "recall_at_k",
    "ColumnSchema", "DataError", "Interaction", "MultiBehaviorGraph",
    "TemporalSplit", "build_graph", "load_graph", "load_interactions",
    "save_graph", "temporal_split",
    "KgData", "KgParams", "init_kg_params", "kg_loss", "kg_score", "load_kg_triples",
    "LayerOutput", "ModelConfig", "ModelParams", "NonFiniteError",
    "TemporalEncoder", "forward", "init_params", "inter_layer",
    "intra_aggregate", "intra_layer", "load_checkpoint", "pair_scores",
    "save_checkpoint", "score", "score_all_items", "temporal_encoding",
    "HbprTriple", "PriorityRank", "SubGraph", "TripleBatch",
    "behavior_distribution_report", "compatible_negatives",
    "sample_hbpr_triples", "sample_subgraph",
    "SynthConfig", "funnel_kg_triples", "generate_funnel",
    "DivergenceError", "SubgraphMode", "TrainConfig", "TrainResult",
    "ablate", "hbpr_loss", "train",
    "__version__",
]

"""Dual-encoder embeddings for hierarchical retrieval: constructions, training and evaluation."""

from .construct import (
    EmbeddingTable,
    SeparationReport,
    check_separation,
    construct_gaussian,
    construct_onehot,
    min_feasible_dimension,
)
from .evaluation import (
    EvalReport,
    dimension_sweep,
    expected_recall,
    frozen_eval_pairs,
    handcrafted_dimension,
    recall_at_k,
    recall_at_relevant,
    top_k,
)
from .hierarchy import (
    CycleError,
    Hierarchy,
    HierarchyError,
    TreeSpec,
    build_perfect_tree,
    hierarchy_distance,
    load_edge_list,
    sample_subdag,
)
from .sampler import (
    PairBatch,
    SamplingKind,
    SamplingStrategy,
    sample_heavy_tail_proportional,
    sample_heavy_tail_toy,
    sample_rebalanced,
    sample_regular,
)
from .trainer import (
    Checkpoint,
    DualEncoderParams,
    PhaseConfig,
    loss,
    loss_gradients,
    pretrain_finetune_phases,
    train,
)

from .wordnet import load_wordnet_nouns

__version__ = "0.1.0"

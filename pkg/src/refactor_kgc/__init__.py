"""Knowledge graph completion with factorization models and ReFactor GNNs."""

from .evaluation import RankingReport, brute_force_rank_oracle, evaluate, filtered_rank
from .graph import (
    Dataset,
    FilterIndex,
    KnowledgeGraph,
    add_reciprocals,
    load_dataset,
    parse_triples,
)
from .kernels import BACKEND
from .refactor import (
    NodeStateCache,
    RefactorConfig,
    RefactorTrainer,
    inductive_infer,
    refactor_layer,
)
from .scoring import FAMILIES, FactorizationModel, ModelSpec
from .training import FMTrainer, TrainConfig, batch_objective

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FAMILIES",
    "Dataset",
    "FMTrainer",
    "FactorizationModel",
    "FilterIndex",
    "KnowledgeGraph",
    "ModelSpec",
    "NodeStateCache",
    "RankingReport",
    "RefactorConfig",
    "RefactorTrainer",
    "TrainConfig",
    "add_reciprocals",
    "batch_objective",
    "brute_force_rank_oracle",
    "evaluate",
    "filtered_rank",
    "inductive_infer",
    "load_dataset",
    "parse_triples",
    "refactor_layer",
]

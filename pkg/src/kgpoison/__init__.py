"""Shallow knowledge graph embeddings and data-poisoning attacks against them."""
from .graph import KnowledgeGraph, Neighbourhood, Triple, apply_edits, load_dataset, neighbourhood
from .models import ComplEx, DistMult, EmbeddingModel, TransE, init_model
from .training import ModelConfig, TrainConfig, train
from .evaluation import EvalReport, delta_mrr, evaluate, rank, select_targets

__version__ = "0.1.0"

__all__ = [
    "KnowledgeGraph", "Neighbourhood", "Triple", "apply_edits", "load_dataset", "neighbourhood",
    "ComplEx", "DistMult", "EmbeddingModel", "TransE", "init_model",
    "ModelConfig", "TrainConfig", "train",
    "EvalReport", "delta_mrr", "evaluate", "rank", "select_targets",
]

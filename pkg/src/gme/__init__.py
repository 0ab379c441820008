"""Graph-based initial ID embeddings for cold-start ads.

A base click model is trained on ads with plenty of history. Its ID
embeddings are then treated as targets for small generator networks that
see only an ad's attributes and a handful of attribute-sharing old ads.
"""
from .ctr import BaseModel, BaseTrainConfig, forward, forward_with_id_embedding, train_base
from .data import ConfigError, Dataset, Schema, Vocabulary, gen_synthetic, load_movielens, split_old_new
from .evaluate import PhaseResult, auc, eval_cold, run_warmup
from .experiment import ExperimentConfig, compare_variants, make_splits
from .generators import VARIANTS, Generator, init_generator
from .graph import build_reverse_index, retrieve_neighbors
from .meta import MetaConfig, meta_grad, meta_loss, train_meta
from .pipeline import Pipeline, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BaseModel", "BaseTrainConfig", "ConfigError", "Dataset", "ExperimentConfig", "Generator", "MetaConfig",
    "PhaseResult", "Pipeline", "Schema", "VARIANTS", "Vocabulary", "auc", "build_reverse_index",
    "compare_variants", "eval_cold", "forward", "forward_with_id_embedding", "gen_synthetic", "init_generator",
    "load_movielens", "make_splits", "meta_grad", "meta_loss", "retrieve_neighbors", "run_pipeline",
    "run_warmup", "split_old_new", "train_base", "train_meta",
]

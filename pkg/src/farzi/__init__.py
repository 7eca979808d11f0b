"""Farzi: desk-scale data distillation for autoregressive sequence models.

Synthesizes a tiny latent-factorized soft dataset whose inner-loop
training trajectory reproduces models trained on the full corpus, by
backpropagating a meta-objective through the inner optimizer in constant
memory.
"""

from .autodiff import NumericError, ParamVector
from .backend import backend_name
from .corpus import TokenCorpus, batch_iter, gen_markov_corpus, load_corpus
from .distill import (DistillConfig, DistillResult, SyntheticDataset, distill,
                      load_synthetic, save_synthetic)
from .models import HardBatch, ModelConfig, SoftBatch, init_params
from .optim import (AdamHyper, BatchSchedule, CheckpointPolicy, SgdHyper,
                    adam_reverse, adam_unroll, sgd_reverse, sgd_unroll)
from .trajectories import TrajectoryStore, load_store, pretrain_trajectories, save_store

__version__ = "0.1.0"

__all__ = [
    "AdamHyper", "BatchSchedule", "CheckpointPolicy", "DistillConfig",
    "DistillResult", "HardBatch", "ModelConfig", "NumericError",
    "ParamVector", "SgdHyper", "SoftBatch", "SyntheticDataset",
    "TokenCorpus", "TrajectoryStore", "adam_reverse", "adam_unroll",
    "backend_name", "batch_iter", "distill", "gen_markov_corpus",
    "init_params", "load_corpus", "load_store", "load_synthetic",
    "pretrain_trajectories", "save_store", "save_synthetic", "sgd_reverse",
    "sgd_unroll",
]

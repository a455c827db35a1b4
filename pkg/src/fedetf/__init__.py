"""Federated learning with a frozen simplex-ETF classifier and global memory vectors."""

from .config import FedConfig, parse_config
from .data import (
    ClientShard,
    LabeledDataset,
    SceneSpec,
    load_idx_pair,
    make_gaussian_mixture,
    partition_label_shift,
    shard_class_means,
    write_idx_pair,
)
from .etf import EtfClassifier, make_etf, validate_etf
from .experiment import Experiment, load_checkpoint, load_datasets, run_experiment, save_checkpoint
from .federation import (
    LearnableClassifier,
    MemoryBank,
    RoundReport,
    ServerState,
    aggregate_memory,
    aggregate_models,
    gmv_augment,
    local_train,
    run_round,
    sample_clients,
)
from .metrics import AccuracyTrace, evaluate, gaussian_smooth, nc_diagnostics, trailing_mean
from .nn import GradientSet, MlpModel, backward, ce_loss_and_grad, forward, init_mlp, sgd_momentum_step

__version__ = "0.1.0"

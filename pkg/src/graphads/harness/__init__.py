"""Experiment harness: run configuration, data splitting, the training
loop, evaluation, ablation orchestration and the command line."""

from .config import (ARM_ENCODER_ONLY, ARM_FULL, ARM_GAT_ONLY, ARMS,
                     RunConfig, load_run_config, parse_config,
                     serialize_config, validate_config)
from .data import (Split, TrainPair, build_pairs, filter_train_logs,
                   split_hash, split_pairs)
from .train import TraceRow, load_trace, overfit_single_batch, train
from .evaluate import evaluate
from .ablation import run_ablation

__all__ = [
    "ARM_ENCODER_ONLY", "ARM_FULL", "ARM_GAT_ONLY", "ARMS", "RunConfig",
    "Split", "TraceRow", "TrainPair", "build_pairs", "evaluate",
    "filter_train_logs", "load_run_config", "load_trace",
    "overfit_single_batch", "parse_config", "run_ablation",
    "serialize_config", "split_hash", "split_pairs", "train",
    "validate_config",
]

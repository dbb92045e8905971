"""Lottery-ticket experiments on a miniature two-stream cross-modal transformer."""

from .checkpoint import Checkpoint, CorruptionError, FormatError, load_checkpoint, save_checkpoint
from .data import DataConfig, SynthDataset, generate_dataset, oracle_answer, split_by_scene
from .experiment import ExperimentConfig, Lab, compare_subnetworks, sweep
from .model import ModelConfig, ParamSet, forward, forward_batch, init_model
from .pruning import (DivergenceError, ImpSchedule, PruneMask, PruneMode, apply_mask,
                      complement_mask, prune_step, random_mask, rewind, run_imp)
from .report import ExperimentReport, Variant, emit_report
from .trainer import EvalResult, TrainConfig, evaluate, train

__version__ = "0.1.0"

"""Targeted transfer attacks: MI-FGSM family, clean feature mixup and feature tuning mixup."""

from .attack import AdvResult, TargetedTransferAttack, run_attack
from .config import AttackConfig, ConfigError, RunConfig, TransformParams, pipeline_config, preset
from .harness import EvalDataset, TransferReport, load_dataset, run_ablation, run_transfer_matrix
from .models import ModelHandle, load_models

__version__ = "0.1.0"

__all__ = [
    "AdvResult", "AttackConfig", "ConfigError", "EvalDataset", "ModelHandle", "RunConfig",
    "TargetedTransferAttack", "TransferReport", "TransformParams", "load_dataset", "load_models",
    "pipeline_config", "preset", "run_ablation", "run_attack", "run_transfer_matrix",
]

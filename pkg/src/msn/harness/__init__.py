"""Synthetic-CTR training and evaluation harness."""
from .data import DataConfig, SyntheticDataset, export_dataset, generate_dataset, import_dataset
from .flops import BlockFlops, FlopsReport, count_flops
from .metrics import UndefinedMetricError, auc, bce_loss, qauc
from .model import BLOCK_TYPES, BlockStack, ModelConfig, matched_dense_config, param_counts
from .optim import SGD, Adam, WarmupSchedule
from .train import (
    ActivationHistogram,
    MetricsLogger,
    TrainConfig,
    TrainingDivergedError,
    TrainResult,
    activation_histogram,
    evaluate,
    train,
)

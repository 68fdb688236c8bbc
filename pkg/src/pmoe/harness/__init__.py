"""Synthetic data, training, config files and the command line."""
from .config import ConfigError, Experiment, load_experiment, parse_experiment
from .data import (
    Dataset,
    DataFormatError,
    GenerationError,
    SyntheticTaskSpec,
    TaskData,
    expert_from_seed,
    generate_synthetic,
    load_idx_images,
    load_task,
    save_task,
    write_idx,
)
from .train import AdamWState, MetricsReport, TrainConfig, TrainingError, accuracy, adamw_step, evaluate, train

__all__ = [
    "AdamWState", "ConfigError", "DataFormatError", "Dataset", "Experiment", "GenerationError",
    "MetricsReport", "SyntheticTaskSpec", "TaskData", "TrainConfig", "TrainingError", "accuracy",
    "adamw_step", "evaluate", "expert_from_seed", "generate_synthetic", "load_experiment",
    "load_idx_images", "load_task", "parse_experiment", "save_task", "train", "write_idx",
]

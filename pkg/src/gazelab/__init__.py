"""Backdoor attack, detection, and mitigation laboratory for gaze-style regression models."""

import torch as _torch

# every tensor in this package is small; intra-op threading costs more in sync
# overhead than it buys, and a single thread keeps results reproducible
_torch.set_num_threads(1)

from . import attacks, data, diagnostics, identify, mitigation, models, reverse
from .attacks import PoisonConfig, PoisonedDataset, TriggerSpec, poison_dataset
from .data import (DatasetSplit, GazeLabel, GazeSample, SyntheticSceneConfig, angular_error,
                   generate_synthetic_dataset, load_dataset, split_dataset)
from .diagnostics import DiagnosticsReport, compute_diagnostics, rav, rnv
from .identify import (CalibrationSet, IdentificationMetrics, Verdict, calibrate_threshold,
                       identify, roc_auc, tally_metrics)
from .mitigation import (MitigationReport, ReversePoisonedDataset,
                         build_reverse_poisoned_dataset, evaluate_mitigation, mitigate)
from .models import GazeModel, TrainConfig, build_model, evaluate, forward_features, train_model
from .reverse import REConfig, REResult, mix_reverse_poisoned, reverse_engineer, sensitivity_map

__version__ = "0.1.0"

__all__ = [
    "attacks", "data", "diagnostics", "identify", "mitigation", "models", "reverse",
    "PoisonConfig", "PoisonedDataset", "TriggerSpec", "poison_dataset",
    "DatasetSplit", "GazeLabel", "GazeSample", "SyntheticSceneConfig", "angular_error",
    "generate_synthetic_dataset", "load_dataset", "split_dataset",
    "DiagnosticsReport", "compute_diagnostics", "rav", "rnv",
    "CalibrationSet", "IdentificationMetrics", "Verdict", "calibrate_threshold",
    "identify", "roc_auc", "tally_metrics",
    "MitigationReport", "ReversePoisonedDataset", "build_reverse_poisoned_dataset",
    "evaluate_mitigation", "mitigate",
    "GazeModel", "TrainConfig", "build_model", "evaluate", "forward_features", "train_model",
    "REConfig", "REResult", "mix_reverse_poisoned", "reverse_engineer", "sensitivity_map",
]

"""Threshold calibration and backdoor verdicts from average perturbations.

Backdoored models need markedly smaller perturbations to collapse their outputs,
so a model is flagged when its average perturbation falls below a threshold
calibrated from benign models (mean minus two standard deviations) or supplied
as a fraction of the largest benign-image L1 norm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GazeSample
from .errors import ConfigurationError, InputError

BACKDOORED = "backdoored"
BENIGN = "benign"


@dataclass
class CalibrationSet:
    perturbations: list[float]
    mean: float
    std: float
    threshold: float


def calibrate_threshold(benign_perturbations) -> CalibrationSet:
    """Threshold = mean - 2 * population standard deviation of benign perturbations."""
    values = [float(v) for v in benign_perturbations]
    if len(values) < 2:
        raise ConfigurationError(f"calibration needs at least 2 benign perturbations, got {len(values)}")
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())  # population
    return CalibrationSet(perturbations=values, mean=mean, std=std, threshold=mean - 2.0 * std)


def max_benign_l1(benign_samples: list[GazeSample]) -> float:
    """L1 norm of the benign image with the largest L1 norm."""
    if not benign_samples:
        raise ConfigurationError("benign set is empty")
    return float(max(np.abs(s.image).sum() for s in benign_samples))


@dataclass
class Verdict:
    model_id: str
    average_perturbation: float
    threshold: float
    decision: str

    def __post_init__(self):
        expected = BACKDOORED if self.average_perturbation < self.threshold else BENIGN
        if self.decision != expected:
            raise InputError(f"verdict decision '{self.decision}' inconsistent with "
                             f"perturbation {self.average_perturbation} vs threshold {self.threshold}")

    @property
    def is_backdoored(self) -> bool:
        return self.decision == BACKDOORED

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "average_perturbation": self.average_perturbation,
                "threshold": self.threshold, "decision": self.decision}


def identify_with_threshold(average_perturbation: float, threshold: float,
                            model_id: str = "") -> Verdict:
    """Backdoored iff the average perturbation is strictly below the threshold."""
    decision = BACKDOORED if average_perturbation < threshold else BENIGN
    return Verdict(model_id=model_id, average_perturbation=float(average_perturbation),
                   threshold=float(threshold), decision=decision)


def identify(average_perturbation: float, epsilon: float,
             benign_samples: list[GazeSample], model_id: str = "") -> Verdict:
    """Compare the average perturbation against epsilon times the largest benign L1 norm."""
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    return identify_with_threshold(average_perturbation,
                                   epsilon * max_benign_l1(benign_samples), model_id)


def epsilon_from_threshold(threshold: float, benign_samples: list[GazeSample]) -> float:
    """The epsilon that reproduces a calibrated absolute threshold on this benign set."""
    return threshold / max_benign_l1(benign_samples)


def _midpoint_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks with ties assigned the group midpoint."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(benign_perturbations, backdoored_perturbations) -> float:
    """Area under the ROC curve with lower perturbation scoring as more backdoored.

    Computed by the rank-sum convention, so tied perturbations contribute one half.
    """
    benign = np.asarray(list(benign_perturbations), dtype=np.float64)
    backdoored = np.asarray(list(backdoored_perturbations), dtype=np.float64)
    if benign.size == 0 or backdoored.size == 0:
        raise ConfigurationError("both perturbation lists must be nonempty")
    combined = np.concatenate([backdoored, benign])
    ranks = _midpoint_ranks(combined)
    benign_rank_sum = float(ranks[len(backdoored):].sum())
    n_b = len(backdoored)
    n_n = len(benign)
    return (benign_rank_sum - n_n * (n_n + 1) / 2.0) / (n_b * n_n)


@dataclass
class IdentificationMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    roc_auc: float | None = None

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy, "roc_auc": self.roc_auc}


def tally_metrics(verdicts: list[Verdict], ground_truth_backdoored: list[bool],
                  auc: float | None = None) -> IdentificationMetrics:
    """Count TP/FP/FN/TN over verdicts against ground truth (positive = backdoored)."""
    if len(verdicts) != len(ground_truth_backdoored):
        raise InputError(f"{len(verdicts)} verdicts vs {len(ground_truth_backdoored)} ground-truth entries")
    tp = fp = fn = tn = 0
    for verdict, truth in zip(verdicts, ground_truth_backdoored):
        if verdict.is_backdoored and truth:
            tp += 1
        elif verdict.is_backdoored and not truth:
            fp += 1
        elif not verdict.is_backdoored and truth:
            fn += 1
        else:
            tn += 1
    total = tp + fp + fn + tn
    return IdentificationMetrics(tp=tp, fp=fp, fn=fn, tn=tn,
                                 accuracy=(tp + tn) / total, roc_auc=auc)


def save_calibration(calibration: CalibrationSet, path: str | Path,
                     epsilon: float | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"perturbations": calibration.perturbations, "mean": calibration.mean,
              "std": calibration.std, "threshold": calibration.threshold, "epsilon": epsilon}
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2)
    return path


def load_calibration(path: str | Path) -> tuple[CalibrationSet, float | None]:
    with open(path) as fh:
        record = json.load(fh)
    calibration = calibrate_threshold(record["perturbations"])
    return calibration, record.get("epsilon")

"""Backdoor removal by fine-tuning on benign plus reverse-engineered poisoned data.

The reverse-engineered poisoned dataset pairs each transformed benign image with
the CORRECT label of its source image, so fine-tuning teaches the model to ignore
the (approximated) trigger. Attack error (distance of outputs on triggered inputs
to the attack target) and defended attack error (distance to the correct labels)
quantify mitigation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .attacks import TriggerSpec, trigger_transform
from .data import GazeSample, angular_error_batch, images_array, labels_array
from .errors import TrainingError
from .models import GazeModel, evaluate, images_to_tensor, predict, samples_to_tensors, tensor_to_images
from .reverse import REResult, mix_reverse_poisoned, sensitivity_map

DEFAULT_MITIGATION_LR = 3e-4  # 0.1 x the default training rate


@dataclass
class ReversePoisonedDataset:
    samples: list[GazeSample]
    provenance: str = ""


def generate_reverse_poisoned_images(model: GazeModel, re_result: REResult,
                                     images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Apply the trained generator with sensitivity mixing, matching the stored result."""
    tensor = images_to_tensor(images)
    maps = re_result.sensitivity_maps
    if re_result.config.sensitivity_aware and (maps is None or len(maps) != len(tensor)):
        maps = sensitivity_map(model, tensor)
    out = []
    re_result.generator.eval()
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            x = tensor[start:start + batch_size]
            g = re_result.generator(x)
            mixed = mix_reverse_poisoned(x, g, maps[start:start + batch_size]) \
                if re_result.config.sensitivity_aware else g
            out.append(tensor_to_images(mixed))
    return np.concatenate(out, axis=0)


def build_reverse_poisoned_dataset(benign_samples: list[GazeSample], re_result: REResult,
                                   model: GazeModel, provenance: str = "") -> ReversePoisonedDataset:
    """One reverse-poisoned sample per benign image, annotated with the correct label."""
    transformed = generate_reverse_poisoned_images(model, re_result, images_array(benign_samples))
    samples = [GazeSample(image=transformed[i], label=s.label, id=f"rp-{s.id}", poisoned=True)
               for i, s in enumerate(benign_samples)]
    return ReversePoisonedDataset(samples=samples, provenance=provenance)


@dataclass
class MitigationResult:
    model: GazeModel
    curve: list[tuple[int, float]]


def _finetune(model: GazeModel, pools: list[tuple[torch.Tensor, torch.Tensor, int]],
              iterations: int, learning_rate: float, seed: int) -> MitigationResult:
    tuned = copy.deepcopy(model)
    if iterations == 0:
        return MitigationResult(model=tuned, curve=[])
    torch.manual_seed(seed)
    optimizer = torch.optim.Adam(tuned.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    curve = []
    tuned.train()
    for step in range(iterations):
        xs, ys = [], []
        for images, labels, batch in pools:
            idx = torch.from_numpy(rng.choice(len(images), size=batch, replace=True))
            xs.append(images[idx])
            ys.append(labels[idx])
        x = torch.cat(xs)
        y = torch.cat(ys)
        loss = (tuned(x) - y).abs().sum(dim=1).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"fine-tuning diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append((step, float(loss.detach())))
    tuned.eval()
    return MitigationResult(model=tuned, curve=curve)


def mitigate(model: GazeModel, benign_samples: list[GazeSample],
             reverse_poisoned: ReversePoisonedDataset, iterations: int = 300,
             benign_batch: int = 50, poisoned_batch: int = 50,
             learning_rate: float = DEFAULT_MITIGATION_LR, seed: int = 0) -> MitigationResult:
    """Fine-tune a copy of the model on mixed benign / reverse-poisoned batches.

    The input model is left untouched; every batch combines `benign_batch` benign
    and `poisoned_batch` reverse-poisoned samples, all with correct labels.
    """
    be_images, be_labels = samples_to_tensors(benign_samples)
    rp_images, rp_labels = samples_to_tensors(reverse_poisoned.samples)
    pools = [(be_images, be_labels, benign_batch), (rp_images, rp_labels, poisoned_batch)]
    return _finetune(model, pools, iterations, learning_rate, seed)


def fine_tune_baseline(model: GazeModel, benign_samples: list[GazeSample],
                       iterations: int = 300, batch_size: int = 100,
                       learning_rate: float = DEFAULT_MITIGATION_LR, seed: int = 0) -> MitigationResult:
    """Plain benign-only fine-tuning, with the same settings as full mitigation."""
    be_images, be_labels = samples_to_tensors(benign_samples)
    return _finetune(model, [(be_images, be_labels, batch_size)], iterations, learning_rate, seed)


@dataclass
class MitigationReport:
    ae_before: float
    ae_after: float
    dae_before: float
    dae_after: float
    benign_error_before: float
    benign_error_after: float

    def to_dict(self) -> dict:
        return {"ae_before": self.ae_before, "ae_after": self.ae_after,
                "dae_before": self.dae_before, "dae_after": self.dae_after,
                "benign_error_before": self.benign_error_before,
                "benign_error_after": self.benign_error_after}


def attack_errors(model: GazeModel, test_samples: list[GazeSample], spec: TriggerSpec) -> tuple[float, float]:
    """(attack error, defended attack error) on the fully triggered test set."""
    transform = trigger_transform(spec)
    poisoned = np.stack([transform(s.image) for s in test_samples])
    preds = predict(model, poisoned)
    target = np.tile(np.asarray(spec.target_label, dtype=np.float64), (len(test_samples), 1))
    ae = float(np.mean(angular_error_batch(preds, target)))
    dae = float(np.mean(angular_error_batch(preds, labels_array(test_samples))))
    return ae, dae


def evaluate_mitigation(model_before: GazeModel, model_after: GazeModel,
                        test_samples: list[GazeSample], spec: TriggerSpec) -> MitigationReport:
    """Score both models on the triggered and clean test sets (oracle trigger access)."""
    ae_before, dae_before = attack_errors(model_before, test_samples, spec)
    ae_after, dae_after = attack_errors(model_after, test_samples, spec)
    return MitigationReport(
        ae_before=ae_before, ae_after=ae_after,
        dae_before=dae_before, dae_after=dae_after,
        benign_error_before=evaluate(model_before, test_samples),
        benign_error_after=evaluate(model_after, test_samples),
    )

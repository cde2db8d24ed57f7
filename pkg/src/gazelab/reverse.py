"""Trigger-function reverse engineering against a frozen regressor.

A generative image-to-image network is optimized so that its (sensitivity-mixed)
outputs collapse the frozen model's output variance and reproduce the small
angle-variance ratio of backdoored models, while staying close to the benign
inputs. The mean L1 perturbation over the benign set is the detection statistic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import GazeSample, images_array
from .errors import ConfigurationError, InputError, NumericalGuardError, TrainingError
from .models import GazeModel, images_to_tensor

SENSITIVITY_RESCALE = 1.01  # divisor factor above the per-image max, keeps maps in [0, 1)


@dataclass
class REConfig:
    output_var_weight: float = 20.0
    feature_ratio_weight: float = 800.0
    steps: int = 2000
    batch_size: int = 50
    learning_rate: float = 0.0015
    pretrain_steps: int = 5000
    pretrain_learning_rate: float = 0.001
    sensitivity_aware: bool = True
    generator_width: int = 4
    seed: int = 0

    def __post_init__(self):
        if (self.output_var_weight < 0 or self.feature_ratio_weight < 0 or self.steps < 0
                or self.batch_size <= 0 or self.learning_rate < 0 or self.pretrain_steps < 0
                or self.pretrain_learning_rate < 0 or self.generator_width <= 0):
            raise ConfigurationError(f"invalid reverse-engineering config: {self}")


class TriggerGenerator(nn.Module):
    """Three-level convolutional encoder-decoder with skip connections.

    Two coordinate channels are appended to the input so the otherwise
    translation-equivariant network can produce position-anchored patterns
    (fixed-location triggers are inexpressible without them). The sigmoid output
    keeps generated images in [0, 1]; skip connections let the network
    reconstruct its input almost exactly after pretraining. The decoder
    upsamples with nearest-neighbor + conv, which is cheap on CPU.
    """

    def __init__(self, channels: int = 3, width: int = 4):
        super().__init__()
        w = width
        self.channels = channels
        self.width = width
        self.enc0 = nn.Sequential(nn.Conv2d(channels + 2, w, 3, padding=1), nn.ReLU(inplace=True))
        self.enc1 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.enc2 = nn.Sequential(nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        # conv at the coarse resolution, then upsample: much cheaper on CPU than
        # convolving the upsampled map
        self.up1 = nn.Sequential(nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.ReLU(inplace=True),
                                 nn.Upsample(scale_factor=2, mode="nearest"))
        self.up0 = nn.Sequential(nn.Conv2d(4 * w, w, 3, padding=1), nn.ReLU(inplace=True),
                                 nn.Upsample(scale_factor=2, mode="nearest"))
        self.out = nn.Conv2d(2 * w, channels, 3, padding=1)

    def _with_coords(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        rows = torch.linspace(-1.0, 1.0, h, dtype=x.dtype).view(1, 1, h, 1).expand(n, 1, h, w)
        cols = torch.linspace(-1.0, 1.0, w, dtype=x.dtype).view(1, 1, 1, w).expand(n, 1, h, w)
        return torch.cat([x, rows, cols], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e0 = self.enc0(self._with_coords(x))
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.up1(e2)
        d0 = self.up0(torch.cat([d1, e1], dim=1))
        return torch.sigmoid(self.out(torch.cat([d0, e0], dim=1)))


def build_generator(channels: int = 3, width: int = 4, seed: int = 0) -> TriggerGenerator:
    torch.manual_seed(seed)
    return TriggerGenerator(channels=channels, width=width)


def reconstruction_error(generator: nn.Module, images: np.ndarray | torch.Tensor,
                         batch_size: int = 128) -> float:
    """Mean absolute per-pixel difference between generator output and input."""
    tensor = images if torch.is_tensor(images) else images_to_tensor(images)
    total, count = 0.0, 0
    generator.eval()
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            x = tensor[start:start + batch_size]
            total += float((generator(x) - x).abs().sum())
            count += x.numel()
    return total / count


def pretrain_generator(generator: nn.Module, images: np.ndarray | torch.Tensor, steps: int,
                       learning_rate: float = 0.001, batch_size: int = 50,
                       seed: int = 0) -> list[tuple[int, float]]:
    """Train the generator to reconstruct benign images (mean absolute error)."""
    tensor = images if torch.is_tensor(images) else images_to_tensor(images)
    if len(tensor) == 0:
        raise TrainingError("cannot pretrain on an empty image set")
    # channels-last convolutions are about twice as fast on CPU for these shapes
    generator.to(memory_format=torch.channels_last)
    tensor = tensor.contiguous(memory_format=torch.channels_last)
    optimizer = torch.optim.Adam(generator.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    curve = []
    generator.train()
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(len(tensor), size=min(batch_size, len(tensor)), replace=True))
        x = tensor[idx]
        loss = (generator(x) - x).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"pretraining diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append((step, float(loss.detach())))
    generator.eval()
    return curve


def sensitivity_map(model: GazeModel, images: np.ndarray | torch.Tensor,
                    batch_size: int = 64) -> torch.Tensor:
    """Per-pixel sensitivity of the model output, shape (N, H, W), values in [0, 1/1.01].

    For each pixel the absolute input gradients are summed over channels and over
    all output dimensions, then rescaled per image by 1.01 times the map maximum.
    An all-zero gradient map is returned as zeros.
    """
    tensor = images if torch.is_tensor(images) else images_to_tensor(images)
    model.eval()
    maps = []
    for start in range(0, len(tensor), batch_size):
        x = tensor[start:start + batch_size].clone().requires_grad_(True)
        out = model(x)
        acc = torch.zeros(x.shape[0], x.shape[2], x.shape[3], dtype=x.dtype)
        for j in range(out.shape[1]):
            grad = torch.autograd.grad(out[:, j].sum(), x, retain_graph=(j < out.shape[1] - 1))[0]
            acc = acc + grad.abs().sum(dim=1)
        maps.append(acc.detach())
    full = torch.cat(maps, dim=0)
    peak = full.amax(dim=(1, 2), keepdim=True)
    scale = torch.where(peak > 0, SENSITIVITY_RESCALE * peak, torch.ones_like(peak))
    return full / scale


def mix_reverse_poisoned(x: torch.Tensor, generated: torch.Tensor,
                         t: torch.Tensor) -> torch.Tensor:
    """Per-pixel convex blend: generated * (1 - t) + x * t, t broadcast over channels."""
    if generated.shape != x.shape:
        raise InputError(f"shape mismatch: image {tuple(x.shape)} vs generated {tuple(generated.shape)}")
    if t.dim() == x.dim() - 1:
        t = t.unsqueeze(-3)
    if t.shape[-2:] != x.shape[-2:]:
        raise InputError(f"sensitivity map shape {tuple(t.shape)} does not match image {tuple(x.shape)}")
    return generated * (1.0 - t) + x * t


def benign_angle_variances(model: GazeModel, images: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Per-output-dimension population variances of benign feature angles (radians)."""
    tensor = images if torch.is_tensor(images) else images_to_tensor(images)
    model.eval()
    with torch.no_grad():
        feats = model.features(tensor)
        angles = _feature_angles_torch(feats, model.head.weight.to(feats.dtype))
        var = angles.var(dim=0, unbiased=False)
    if torch.any(var <= 0):
        raise NumericalGuardError("benign angle variance is zero in at least one output dimension")
    return var


def _feature_angles_torch(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    f_norm = features.norm(dim=1, keepdim=True).clamp_min(1e-12)
    w_norm = weights.norm(dim=1, keepdim=True).clamp_min(1e-12)
    cos = (features @ weights.T) / (f_norm * w_norm.T)
    return torch.arccos(torch.clamp(cos, -1.0 + 1e-7, 1.0 - 1e-7))


def feature_space_objective(features: torch.Tensor, benign_variances: torch.Tensor,
                            head_weights: torch.Tensor) -> torch.Tensor:
    """Mean ratio of reverse-engineered to benign angle variances; differentiable in features."""
    if torch.any(benign_variances <= 0):
        raise NumericalGuardError("benign angle variances must be positive")
    angles = _feature_angles_torch(features, head_weights.to(features.dtype))
    return (angles.var(dim=0, unbiased=False) / benign_variances.detach()).mean()


def objective_terms(model: GazeModel, generator: nn.Module, images: torch.Tensor,
                    t_maps: torch.Tensor | None, benign_variances: torch.Tensor,
                    config: REConfig) -> dict[str, torch.Tensor]:
    """All loss terms of the reverse-engineering objective on one batch.

    With sensitivity_aware off, the generated image itself is fed to the model
    (the plain formulation); otherwise the sensitivity-mixed image is used.
    """
    generated = generator(images)
    if config.sensitivity_aware:
        if t_maps is None:
            raise InputError("sensitivity_aware requires cached sensitivity maps")
        mixed = mix_reverse_poisoned(images, generated, t_maps)
    else:
        mixed = generated
    feats = model.features(mixed)
    out = model.head(feats)
    if model.activation is not None:
        out = model.activation(out)
    output_variance = out.var(dim=0, unbiased=False).mean()
    ratio = feature_space_objective(feats, benign_variances, model.head.weight)
    perturbation = (mixed - images).abs().flatten(1).sum(dim=1).mean()
    total = (config.output_var_weight * output_variance
             + config.feature_ratio_weight * ratio + perturbation)
    return {"output_variance": output_variance, "feature_ratio": ratio,
            "perturbation": perturbation, "total": total}


@dataclass
class REResult:
    generator: nn.Module
    average_perturbation: float
    per_image_perturbations: np.ndarray
    loss_trace: list[dict]
    config: REConfig
    sensitivity_maps: torch.Tensor | None = None

    def summary(self) -> dict:
        return {
            "average_perturbation": self.average_perturbation,
            "per_image_count": int(len(self.per_image_perturbations)),
            "config": asdict(self.config),
        }


def _per_image_perturbations(model: GazeModel, generator: nn.Module, images: torch.Tensor,
                             t_maps: torch.Tensor | None, config: REConfig,
                             batch_size: int = 128) -> np.ndarray:
    values = []
    generator.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = images[start:start + batch_size]
            g = generator(x)
            mixed = mix_reverse_poisoned(x, g, t_maps[start:start + batch_size]) \
                if config.sensitivity_aware else g
            values.append((mixed - x).abs().flatten(1).sum(dim=1).cpu().numpy())
    return np.concatenate(values).astype(np.float64)


def reverse_engineer(model: GazeModel, benign_samples: list[GazeSample], config: REConfig,
                     generator: nn.Module | None = None) -> REResult:
    """Optimize a trigger generator against the frozen model over the benign set.

    The model's parameters are never updated; sensitivity maps are computed once
    per benign image and reused at every step. Returns the trained generator with
    the per-image and average L1 perturbations over the whole benign set.
    """
    if not benign_samples:
        raise TrainingError("benign set is empty")
    images = images_to_tensor(images_array(benign_samples)).contiguous(memory_format=torch.channels_last)
    frozen_state = [p.detach().clone() for p in model.parameters()]
    grad_states = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model.to(memory_format=torch.channels_last)
    try:
        if generator is None:
            generator = build_generator(channels=images.shape[1], width=config.generator_width,
                                        seed=config.seed)
            pretrain_generator(generator, images, config.pretrain_steps,
                               config.pretrain_learning_rate, config.batch_size, config.seed)
        generator.to(memory_format=torch.channels_last)
        t_maps = sensitivity_map(model, images) if config.sensitivity_aware else None
        benign_var = benign_angle_variances(model, images)

        optimizer = torch.optim.Adam(generator.parameters(), lr=config.learning_rate)
        rng = np.random.default_rng(config.seed)
        trace: list[dict] = []
        generator.train()
        for step in range(config.steps):
            idx = torch.from_numpy(rng.choice(len(images), size=config.batch_size, replace=True))
            terms = objective_terms(model, generator, images[idx],
                                    t_maps[idx] if t_maps is not None else None,
                                    benign_var, config)
            if not torch.isfinite(terms["total"]):
                raise TrainingError(f"objective became non-finite at step {step}; "
                                    f"trace tail: {trace[-3:]}")
            optimizer.zero_grad()
            terms["total"].backward()
            optimizer.step()
            trace.append({"step": step, **{k: float(v.detach()) for k, v in terms.items()}})
        generator.eval()
        per_image = _per_image_perturbations(model, generator, images, t_maps, config)
    finally:
        for p, state in zip(model.parameters(), grad_states):
            p.requires_grad_(state)
    for p, snapshot in zip(model.parameters(), frozen_state):
        if not torch.equal(p.detach(), snapshot):
            raise TrainingError("frozen-model contract violated: model parameters changed")
    return REResult(generator=generator, average_perturbation=float(per_image.mean()),
                    per_image_perturbations=per_image, loss_trace=trace, config=config,
                    sensitivity_maps=t_maps)


_GENERATOR_FILE = "generator.pt"
_PERTURBATIONS_FILE = "perturbations.csv"
_TRACE_FILE = "loss_trace.csv"
_SUMMARY_FILE = "summary.json"


def save_re_result(result: REResult, directory: str | Path,
                   sample_ids: list[str] | None = None) -> Path:
    """Persist generator checkpoint, per-image perturbations, loss trace, and summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gen = result.generator
    torch.save({"state_dict": gen.state_dict(),
                "channels": getattr(gen, "channels", 3),
                "width": getattr(gen, "width", result.config.generator_width)},
               directory / _GENERATOR_FILE)
    with open(directory / _PERTURBATIONS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "perturbation"])
        for i, value in enumerate(result.per_image_perturbations):
            sid = sample_ids[i] if sample_ids else str(i)
            writer.writerow([sid, repr(float(value))])
    with open(directory / _TRACE_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "output_variance", "feature_ratio", "perturbation", "total"])
        for row in result.loss_trace:
            writer.writerow([row["step"], row["output_variance"], row["feature_ratio"],
                             row["perturbation"], row["total"]])
    with open(directory / _SUMMARY_FILE, "w") as fh:
        json.dump(result.summary(), fh, indent=2)
    return directory


def load_re_summary(directory: str | Path) -> dict:
    with open(Path(directory) / _SUMMARY_FILE) as fh:
        return json.load(fh)


def load_generator(directory: str | Path) -> TriggerGenerator:
    blob = torch.load(Path(directory) / _GENERATOR_FILE, map_location="cpu", weights_only=True)
    generator = TriggerGenerator(channels=blob["channels"], width=blob["width"])
    generator.load_state_dict(blob["state_dict"])
    generator.eval()
    return generator

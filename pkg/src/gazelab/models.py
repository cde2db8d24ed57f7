"""Decomposed gaze regressor (backbone + linear head), training, and checkpoints.

The regressor is always the composition head(backbone(x)); the backbone output is
the feature vector used by the feature-space diagnostics and the defense.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import GazeSample, angular_error_batch, images_array, labels_array
from .errors import ConfigurationError, DataError, TrainingError

CHECKPOINT_FORMAT_VERSION = 1
_WEIGHTS_FILE = "weights.pt"
_META_FILE = "metadata.json"


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 3e-3
    # std of Gaussian input noise added per batch; desk-scale models trained
    # without it are so locally fragile that every model collapses under tiny
    # perturbations, washing out the detection statistic
    augment_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0 or self.augment_noise < 0:
            raise ConfigurationError(f"invalid training config: {self}")


class GazeModel(nn.Module):
    """Regressor decomposed into a feature backbone and a linear head.

    `activation` is a hook applied after the head; the default (None) is the
    identity, matching a dense output layer with no nonlinearity.
    """

    def __init__(self, backbone: nn.Module, feature_dim: int, output_dim: int,
                 preset: str, activation=None, image_size: int = 64):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(feature_dim, output_dim)
        self.activation = activation
        self.feature_dim = feature_dim
        self.output_dim = output_dim
        self.preset = preset
        self.image_size = image_size

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.head(self.features(x))
        return self.activation(z) if self.activation is not None else z

    @property
    def head_weights(self) -> np.ndarray:
        """Head weight matrix of shape (output_dim, feature_dim), copied."""
        return self.head.weight.detach().cpu().numpy().copy()

    @property
    def head_bias(self) -> np.ndarray:
        return self.head.bias.detach().cpu().numpy().copy()


# stride-2 conv widths plus fully connected widths per preset; a final linear
# layer projects to the feature vector
_PRESETS = {
    "small-cnn": {"conv": (16, 32, 32), "fc": (128,)},
    # tiny variant for fast unit tests on small images
    "micro-cnn": {"conv": (8, 8), "fc": (32,)},
}


def build_model(feature_dim: int = 64, output_dim: int = 2, preset: str = "small-cnn",
                seed: int = 0, image_size: int = 64, image_channels: int = 3) -> GazeModel:
    """Build a randomly initialized model; equal seeds give identical parameters."""
    if feature_dim <= 0 or output_dim <= 0:
        raise ConfigurationError("feature_dim and output_dim must be positive")
    if preset not in _PRESETS:
        raise ConfigurationError(f"unknown preset '{preset}'; choose from {sorted(_PRESETS)}")
    arch = _PRESETS[preset]
    reduced = image_size // (2 ** len(arch["conv"]))
    if reduced < 1:
        raise ConfigurationError(f"image_size {image_size} too small for preset '{preset}'")
    torch.manual_seed(seed)
    layers: list[nn.Module] = []
    c_in = image_channels
    for w in arch["conv"]:
        layers += [nn.Conv2d(c_in, w, kernel_size=3, stride=2, padding=1),
                   nn.GroupNorm(4, w), nn.ReLU(inplace=True)]
        c_in = w
    layers.append(nn.Flatten())
    d_in = c_in * reduced * reduced
    for width in arch["fc"]:
        layers += [nn.Linear(d_in, width), nn.ReLU(inplace=True)]
        d_in = width
    layers += [nn.Linear(d_in, feature_dim), nn.ReLU(inplace=True)]
    backbone = nn.Sequential(*layers)
    return GazeModel(backbone, feature_dim, output_dim, preset, image_size=image_size)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float array -> (N, 3, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(batch: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) tensor -> (N, H, W, 3) float32 array."""
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def samples_to_tensors(samples: list[GazeSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = images_to_tensor(images_array(samples))
    labels = torch.from_numpy(labels_array(samples).astype(np.float32))
    return images, labels


@dataclass
class TrainResult:
    model: GazeModel
    curve: list[tuple[int, float]]  # (step, batch loss)


def train_model(model: GazeModel, samples: list[GazeSample], config: TrainConfig,
                batch_loss_hook=None) -> TrainResult:
    """Minimize the mean L1 distance between predictions and labels with Adam.

    `batch_loss_hook(model, images, labels, poisoned_mask) -> scalar tensor`, when
    given, is added to each batch loss (used by the adaptive attack harness).
    """
    if not samples:
        raise TrainingError("cannot train on an empty sample collection")
    torch.manual_seed(config.seed)
    images, labels = samples_to_tensors(samples)
    flags = torch.tensor([s.poisoned for s in samples], dtype=torch.bool)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    curve: list[tuple[int, float]] = []
    step = 0
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            idx = torch.from_numpy(order[start:start + config.batch_size].copy())
            x = images[idx]
            if config.augment_noise > 0:
                x = x + config.augment_noise * torch.randn_like(x)
            out = model(x)
            loss = (out - labels[idx]).abs().sum(dim=1).mean()
            if batch_loss_hook is not None:
                loss = loss + batch_loss_hook(model, x, labels[idx], flags[idx])
            if not torch.isfinite(loss):
                last = curve[-1][0] if curve else None
                raise TrainingError(f"loss became non-finite at step {step}; last finite step: {last}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            curve.append((step, float(loss.detach())))
            step += 1
    model.eval()
    return TrainResult(model=model, curve=curve)


def predict(model: GazeModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Model outputs as an (N, 2) float array of (pitch, yaw) degrees."""
    tensor = images_to_tensor(images)
    outputs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            outputs.append(model(tensor[start:start + batch_size]).cpu().numpy())
    return np.concatenate(outputs, axis=0).astype(np.float64)


def forward_features(model: GazeModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Backbone feature vectors as an (N, feature_dim) float array."""
    tensor = images_to_tensor(images)
    if tensor.shape[1] != next(model.backbone.parameters()).shape[1]:
        raise DataError(f"expected {next(model.backbone.parameters()).shape[1]}-channel images, "
                        f"got shape {tuple(tensor.shape)}")
    feats = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(tensor), batch_size):
            feats.append(model.features(tensor[start:start + batch_size]).cpu().numpy())
    return np.concatenate(feats, axis=0).astype(np.float64)


def evaluate(model: GazeModel, samples: list[GazeSample]) -> float:
    """Mean angular error (degrees) of the model over the samples."""
    if not samples:
        raise DataError("cannot evaluate on an empty sample collection")
    preds = predict(model, images_array(samples))
    return float(np.mean(angular_error_batch(preds, labels_array(samples))))


def save_checkpoint(model: GazeModel, directory: str | Path, train_config: TrainConfig | None = None,
                    seed: int | None = None, extra: dict | None = None) -> Path:
    """Persist weights plus a metadata record; loading restores bit-identical behavior."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / _WEIGHTS_FILE)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "preset": model.preset,
        "feature_dim": model.feature_dim,
        "output_dim": model.output_dim,
        "image_size": model.image_size,
        "seed": seed,
        "train_config": asdict(train_config) if train_config else None,
        "extra": extra or {},
    }
    with open(directory / _META_FILE, "w") as fh:
        json.dump(meta, fh, indent=2)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[GazeModel, dict]:
    directory = Path(directory)
    meta_path = directory / _META_FILE
    if not meta_path.is_file():
        raise DataError(f"no checkpoint metadata at {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {meta.get('format_version')}")
    model = build_model(meta["feature_dim"], meta["output_dim"], meta["preset"],
                        image_size=meta.get("image_size", 64))
    state = torch.load(directory / _WEIGHTS_FILE, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, meta

"""Backdoor trigger functions, dataset poisoning, and the adaptive attack loss.

All trigger applications are pure: the input image is never modified and outputs
stay in [0, 1]. With fixed seeds every trigger is a deterministic function of its
inputs.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from math import ceil

import numpy as np
import torch
from torch import nn

from .data import GazeLabel, GazeSample
from .errors import ConfigurationError, NumericalGuardError, TrainingError
from .models import GazeModel, images_to_tensor, samples_to_tensors, tensor_to_images

VARIANTS = ("patch", "clean_label", "warp", "stego", "iada")

_CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")

_DEFAULT_PARAMS = {
    "patch": {"size": 20, "color": (1.0, 0.0, 0.0), "corner": "bottom-right"},
    "clean_label": {"size": 20, "color": (1.0, 0.0, 0.0), "corner": "bottom-right", "delta": 5.0},
    "warp": {"grid_size": 4, "strength": 0.5},
    "stego": {"bitstring": "1011001110001111", "amplitude": 0.02},
    "iada": {"amplitude": 0.5},
}


@dataclass
class TriggerSpec:
    variant: str
    target_label: tuple[float, float] = (0.0, 0.0)
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown trigger variant '{self.variant}'; choose from {VARIANTS}")
        merged = dict(_DEFAULT_PARAMS[self.variant])
        merged.update(self.params)
        self.params = merged
        GazeLabel(*self.target_label)  # range check
        if self.variant in ("patch", "clean_label"):
            if self.params["size"] < 0:
                raise ConfigurationError("patch size must be >= 0")
            if self.params["corner"] not in _CORNERS:
                raise ConfigurationError(f"corner must be one of {_CORNERS}")
        if self.variant == "clean_label" and self.params["delta"] < 0:
            raise ConfigurationError("clean-label delta must be >= 0")
        if self.variant == "warp":
            if self.params["grid_size"] < 2:
                raise ConfigurationError("warp grid_size must be >= 2")
            if self.params["strength"] < 0:
                raise ConfigurationError("warp strength must be >= 0")
        if self.variant == "stego":
            amp = self.params["amplitude"]
            if not (0.0 < amp <= 0.05):
                raise ConfigurationError("stego amplitude must be in (0, 0.05]")

    def to_dict(self) -> dict:
        params = {k: v for k, v in self.params.items() if k != "generator"}
        return {"variant": self.variant, "target_label": list(self.target_label),
                "params": params, "seed": self.seed}

    @classmethod
    def from_dict(cls, blob: dict) -> "TriggerSpec":
        return cls(variant=blob["variant"], target_label=tuple(blob["target_label"]),
                   params=dict(blob.get("params", {})), seed=int(blob.get("seed", 0)))


@dataclass
class PoisonConfig:
    ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ConfigurationError(f"poison ratio must be in (0, 1], got {self.ratio}")


@dataclass
class PoisonedDataset:
    samples: list[GazeSample]
    spec: TriggerSpec
    config: PoisonConfig

    @property
    def poisoned_ids(self) -> list[str]:
        return [s.id for s in self.samples if s.poisoned]


def apply_patch_trigger(image: np.ndarray, size: int = 20,
                        color: tuple[float, float, float] = (1.0, 0.0, 0.0),
                        corner: str = "bottom-right") -> np.ndarray:
    """Paste a solid size x size patch into the given corner."""
    h, w = image.shape[:2]
    if size > min(h, w):
        raise ConfigurationError(f"patch size {size} exceeds image bounds {h}x{w}")
    if corner not in _CORNERS:
        raise ConfigurationError(f"corner must be one of {_CORNERS}")
    out = image.copy()
    if size == 0:
        return out
    r0 = 0 if corner.startswith("top") else h - size
    c0 = 0 if corner.endswith("left") else w - size
    out[r0:r0 + size, c0:c0 + size, :] = np.asarray(color, dtype=out.dtype)
    return out


def build_warp_field(shape: tuple[int, int], grid_size: int, strength: float,
                     seed: int) -> np.ndarray:
    """Smooth displacement field (H, W, 2) in pixels, as (drow, dcol) per pixel.

    A grid_size x grid_size offset grid drawn uniformly from [-1, 1] is rescaled to
    unit mean magnitude, bilinearly upsampled to the image size, and scaled by
    `strength`, so strength is roughly the mean absolute displacement in pixels.
    """
    if grid_size < 2:
        raise ConfigurationError("warp grid_size must be >= 2")
    if strength < 0:
        raise ConfigurationError("warp strength must be >= 0")
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-1.0, 1.0, size=(grid_size, grid_size, 2))
    offsets = offsets / np.mean(np.abs(offsets))
    h, w = shape
    # grid coordinates of each pixel, endpoints aligned to the grid corners
    gr = np.linspace(0.0, grid_size - 1.0, h)
    gc = np.linspace(0.0, grid_size - 1.0, w)
    r0 = np.clip(np.floor(gr).astype(int), 0, grid_size - 2)
    c0 = np.clip(np.floor(gc).astype(int), 0, grid_size - 2)
    fr = (gr - r0)[:, None, None]
    fc = (gc - c0)[None, :, None]
    g00 = offsets[r0][:, c0]
    g01 = offsets[r0][:, c0 + 1]
    g10 = offsets[r0 + 1][:, c0]
    g11 = offsets[r0 + 1][:, c0 + 1]
    up = (g00 * (1 - fr) * (1 - fc) + g01 * (1 - fr) * fc
          + g10 * fr * (1 - fc) + g11 * fr * fc)
    return strength * up


def _bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample image at fractional (rows, cols) with border clamping."""
    h, w = image.shape[:2]
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 2) if h > 1 else np.zeros_like(rows, dtype=int)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 2) if w > 1 else np.zeros_like(cols, dtype=int)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    return (image[r0, c0] * (1 - fr) * (1 - fc) + image[r0, c1] * (1 - fr) * fc
            + image[r1, c0] * fr * (1 - fc) + image[r1, c1] * fr * fc)


def apply_warp_trigger(image: np.ndarray, grid_size: int = 4, strength: float = 0.5,
                       seed: int = 0) -> np.ndarray:
    """Resample the image through the seeded elastic warp field."""
    field_ = build_warp_field(image.shape[:2], grid_size, strength, seed)
    return warp_with_field(image, field_)


def warp_with_field(image: np.ndarray, field_: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    out = _bilinear_sample(image.astype(np.float64), rows + field_[..., 0], cols + field_[..., 1])
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def select_clean_label_targets(samples: list[GazeSample], target_label: tuple[float, float],
                               delta: float) -> list[str]:
    """Ids whose labels lie within delta of the target, componentwise."""
    if delta < 0:
        raise ConfigurationError("delta must be >= 0")
    ty, tp = float(target_label[1]), float(target_label[0])
    ids = [s.id for s in samples
           if abs(s.label.pitch - tp) <= delta and abs(s.label.yaw - ty) <= delta]
    if not ids:
        warnings.warn(f"no samples within {delta} degrees of target {target_label}", stacklevel=2)
    return ids


def apply_stego_trigger(image: np.ndarray, bitstring: str, amplitude: float = 0.02) -> np.ndarray:
    """Add a low-amplitude pseudo-random residual keyed by (bitstring, image content)."""
    if not (0.0 < amplitude <= 0.05):
        raise ConfigurationError("amplitude must be in (0, 0.05]")
    quantized = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    digest = hashlib.sha256(bitstring.encode() + quantized.tobytes()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    residual = amplitude * rng.uniform(-1.0, 1.0, size=image.shape)
    return np.clip(image + residual, 0.0, 1.0).astype(image.dtype)


class IadaGenerator(nn.Module):
    """Encoder-decoder producing bounded, input-dependent additive trigger patterns."""

    def __init__(self, channels: int = 3, width: int = 8, amplitude: float = 0.5):
        super().__init__()
        self.amplitude = amplitude
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(width * 2, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, channels, 4, stride=2, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.amplitude * torch.tanh(self.decoder(self.encoder(x)))

    def poison(self, x: torch.Tensor) -> torch.Tensor:
        return torch.clamp(x + self(x), 0.0, 1.0)


@dataclass
class IadaTrainConfig:
    steps: int = 400
    batch_size: int = 32
    learning_rate: float = 1e-3
    amplitude: float = 0.5
    diversity_weight: float = 1.0
    poison_fraction: float = 0.5
    seed: int = 0


@dataclass
class IadaResult:
    generator: IadaGenerator
    model: GazeModel
    curve: list[tuple[int, float, float]]  # (step, victim loss, generator loss)


def _pattern_diversity_loss(patterns: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
    """Push pattern distance up for distinct inputs (ratio of input to pattern distance)."""
    rolled_p = torch.roll(patterns, 1, dims=0)
    rolled_x = torch.roll(inputs, 1, dims=0)
    num = (inputs - rolled_x).abs().flatten(1).mean(dim=1)
    den = (patterns - rolled_p).abs().flatten(1).mean(dim=1) + 1e-6
    return (num / den).mean()


def train_iada_generator(samples: list[GazeSample], model: GazeModel,
                         config: IadaTrainConfig, target_label: tuple[float, float] = (0.0, 0.0)) -> IadaResult:
    """Jointly train the victim model and an input-aware trigger generator.

    Each step poisons part of the batch with the generator's additive pattern and
    the target label, then alternates a victim update with a generator update that
    drives triggered inputs to the target while keeping patterns input-dependent.
    """
    if not samples:
        raise TrainingError("cannot train on an empty sample collection")
    torch.manual_seed(config.seed)
    generator = IadaGenerator(amplitude=config.amplitude)
    images, labels = samples_to_tensors(samples)
    target = torch.tensor(target_label, dtype=torch.float32)
    opt_model = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    opt_gen = torch.optim.Adam(generator.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n_poison = max(2, int(round(config.poison_fraction * config.batch_size)))
    curve = []
    model.train()
    for step in range(config.steps):
        idx = torch.from_numpy(rng.choice(len(samples), size=config.batch_size, replace=True))
        x = images[idx]
        y = labels[idx]
        x_poison = generator.poison(x[:n_poison])

        out_clean = model(x[n_poison:])
        out_poison = model(x_poison.detach())
        victim_loss = ((out_clean - y[n_poison:]).abs().sum(1).sum()
                       + (out_poison - target).abs().sum(1).sum()) / config.batch_size
        opt_model.zero_grad()
        victim_loss.backward()
        opt_model.step()

        patterns = generator(x[:n_poison])
        x_poison = torch.clamp(x[:n_poison] + patterns, 0.0, 1.0)
        gen_loss = ((model(x_poison) - target).abs().sum(1).mean()
                    + config.diversity_weight * _pattern_diversity_loss(patterns, x[:n_poison]))
        if not (torch.isfinite(victim_loss) and torch.isfinite(gen_loss)):
            raise TrainingError(f"joint training diverged at step {step}")
        opt_gen.zero_grad()
        gen_loss.backward()
        opt_gen.step()
        curve.append((step, float(victim_loss.detach()), float(gen_loss.detach())))
    model.eval()
    generator.eval()
    return IadaResult(generator=generator, model=model, curve=curve)


def trigger_transform(spec: TriggerSpec):
    """Return the pure image transform for a trigger spec."""
    p = spec.params
    if spec.variant in ("patch", "clean_label"):
        return lambda img: apply_patch_trigger(img, p["size"], tuple(p["color"]), p["corner"])
    if spec.variant == "warp":
        field_cache: dict[tuple[int, int], np.ndarray] = {}

        def warp(img):
            key = img.shape[:2]
            if key not in field_cache:
                field_cache[key] = build_warp_field(key, p["grid_size"], p["strength"], spec.seed)
            return warp_with_field(img, field_cache[key])

        return warp
    if spec.variant == "stego":
        return lambda img: apply_stego_trigger(img, p["bitstring"], p["amplitude"])
    if spec.variant == "iada":
        generator = p.get("generator")
        if generator is None:
            raise ConfigurationError("iada trigger requires a trained generator in params['generator'] "
                                     "(produced by train_iada_generator)")

        def iada(img):
            with torch.no_grad():
                out = generator.poison(images_to_tensor(img[None]))
            return tensor_to_images(out)[0]

        return iada
    raise ConfigurationError(f"unknown trigger variant '{spec.variant}'")


def poison_dataset(samples: list[GazeSample], spec: TriggerSpec,
                   config: PoisonConfig) -> PoisonedDataset:
    """Poison a seeded subset of about ratio * N samples with the trigger.

    Labels of poisoned samples are rewritten to the target, except for the
    clean-label variant, which keeps original labels and only poisons samples
    whose labels already lie within delta of the target.
    """
    rng = np.random.default_rng(config.seed)
    n_poison = min(len(samples), ceil(config.ratio * len(samples)))
    if spec.variant == "clean_label":
        candidates = select_clean_label_targets(samples, spec.target_label, spec.params["delta"])
        if not candidates:
            raise ConfigurationError(
                f"clean-label selection is empty: no labels within {spec.params['delta']} "
                f"degrees of {spec.target_label}")
        candidate_idx = [i for i, s in enumerate(samples) if s.id in set(candidates)]
        chosen = rng.choice(candidate_idx, size=min(n_poison, len(candidate_idx)), replace=False)
    else:
        chosen = rng.choice(len(samples), size=n_poison, replace=False)
    chosen = set(int(i) for i in chosen)
    transform = trigger_transform(spec)
    target = GazeLabel(*spec.target_label)
    out = []
    for i, s in enumerate(samples):
        if i in chosen:
            label = s.label if spec.variant == "clean_label" else target
            out.append(GazeSample(image=transform(s.image), label=label, id=s.id, poisoned=True))
        else:
            out.append(GazeSample(image=s.image.copy(), label=s.label, id=s.id, poisoned=False))
    return PoisonedDataset(samples=out, spec=spec, config=config)


def _angles_to_weights(features: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(N, d) angles in radians between feature rows and each head weight row."""
    f_norm = features.norm(dim=1, keepdim=True)
    w_norm = weights.norm(dim=1, keepdim=True)
    cos = (features @ weights.T) / (f_norm * w_norm.T)
    return torch.arccos(torch.clamp(cos, -1.0 + 1e-7, 1.0 - 1e-7))


def adaptive_loss(poisoned_features: torch.Tensor, benign_features: torch.Tensor,
                  head_weights: torch.Tensor) -> torch.Tensor:
    """|1 - mean_j var(poisoned angles to w_j) / var(benign angles to w_j)|.

    Differentiable with respect to both feature batches; used by an attacker aware
    of the angle-variance defense to push the ratio back toward one.
    """
    if poisoned_features.shape[0] < 2 or benign_features.shape[0] < 2:
        raise NumericalGuardError("need at least 2 features on each side for a variance")
    if not torch.is_tensor(head_weights):
        head_weights = torch.as_tensor(np.asarray(head_weights), dtype=poisoned_features.dtype)
    ang_p = _angles_to_weights(poisoned_features, head_weights)
    ang_b = _angles_to_weights(benign_features, head_weights)
    var_b = ang_b.var(dim=0, unbiased=False)
    if torch.any(var_b <= 0):
        raise NumericalGuardError("benign angle variance is zero in at least one output dimension")
    ratio = (ang_p.var(dim=0, unbiased=False) / var_b).mean()
    return torch.abs(1.0 - ratio)


def adaptive_loss_hook(beta: float):
    """Batch-loss hook for train_model adding beta * adaptive loss per minibatch."""

    def hook(model: GazeModel, images: torch.Tensor, labels: torch.Tensor,
             poisoned_mask: torch.Tensor) -> torch.Tensor:
        if int(poisoned_mask.sum()) < 2 or int((~poisoned_mask).sum()) < 2:
            return torch.zeros((), dtype=images.dtype)
        feats = model.features(images)
        return beta * adaptive_loss(feats[poisoned_mask], feats[~poisoned_mask], model.head.weight)

    return hook

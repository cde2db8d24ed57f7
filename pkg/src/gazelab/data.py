"""Synthetic gaze-style regression data, dataset I/O, splits, and the angular-error metric.

Images are numpy float arrays of shape (H, W, 3) with values in [0, 1].
Labels are (pitch, yaw) pairs in degrees.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, SplitError

ANNOTATIONS_FILE = "annotations.csv"
IMAGES_DIR = "images"


@dataclass(frozen=True)
class GazeLabel:
    """Gaze direction as (pitch, yaw) in degrees."""

    pitch: float
    yaw: float

    def __post_init__(self):
        if not (-90.0 <= self.pitch <= 90.0):
            raise ConfigurationError(f"pitch {self.pitch} outside [-90, 90]")
        if not (-180.0 <= self.yaw <= 180.0):
            raise ConfigurationError(f"yaw {self.yaw} outside [-180, 180]")

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw], dtype=np.float64)


@dataclass
class GazeSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: GazeLabel
    id: str
    poisoned: bool = False


@dataclass
class DatasetSplit:
    train: list[GazeSample]
    benign: list[GazeSample]
    test: list[GazeSample]


@dataclass
class SyntheticSceneConfig:
    image_size: int = 64
    sample_count: int = 1000
    label_range: tuple[float, float] = (-25.0, 25.0)
    noise_level: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigurationError(f"image_size {self.image_size} too small (min 16)")
        if self.sample_count <= 0:
            raise ConfigurationError("sample_count must be positive")
        lo, hi = self.label_range
        if not (lo < hi):
            raise ConfigurationError(f"label_range {self.label_range} must be (lo, hi) with lo < hi")
        if not (-90.0 <= lo and hi <= 90.0):
            raise ConfigurationError("label_range must stay within [-90, 90] degrees")
        if not (0.0 <= self.noise_level <= 0.5):
            raise ConfigurationError("noise_level must be in [0, 0.5] so labels remain recoverable")


# Scene geometry, in units of image_size. The pupil center inside each eye is an
# affine function of the label; everything downstream (trainability, the zero-label
# centering contract) rests on this map.
_FACE_CENTER = (0.50, 0.54)
_FACE_AXES = (0.34, 0.40)
_EYE_OFFSET_X = 0.16
_EYE_ROW = 0.44
_EYE_AXES = (0.12, 0.085)
_PUPIL_RADIUS = 0.055
_PUPIL_MAX_DISP = 0.075
_MOUTH_ROW = 0.74
_MOUTH_HALF_W = 0.10


def pupil_centers(label: GazeLabel, image_size: int,
                  label_range: tuple[float, float] = (-25.0, 25.0)) -> list[tuple[float, float]]:
    """Analytic pupil centers for a label, as (row, col) pairs for left/right eye.

    Displacement is affine in (pitch, yaw): yaw moves the pupil horizontally,
    pitch moves it vertically (positive pitch = up = smaller row).
    """
    half_span = (label_range[1] - label_range[0]) / 2.0
    mid = (label_range[0] + label_range[1]) / 2.0
    dx = (label.yaw - mid) / half_span * _PUPIL_MAX_DISP * image_size
    dy = -(label.pitch - mid) / half_span * _PUPIL_MAX_DISP * image_size
    centers = []
    for sign in (-1.0, 1.0):
        col = (0.5 + sign * _EYE_OFFSET_X) * image_size + dx
        row = _EYE_ROW * image_size + dy
        centers.append((row, col))
    return centers


def _render_scene(label: GazeLabel, config: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    s = config.image_size
    rows, cols = np.meshgrid(np.arange(s, dtype=np.float64),
                             np.arange(s, dtype=np.float64), indexing="ij")

    # background with per-image tint
    bg = np.empty((s, s, 3))
    bg_color = 0.25 + 0.1 * rng.random(3)
    bg[:] = bg_color

    # face ellipse
    fy, fx = _FACE_CENTER[1] * s, _FACE_CENTER[0] * s
    fa, fb = _FACE_AXES[0] * s, _FACE_AXES[1] * s
    face_mask = ((cols - fx) / fa) ** 2 + ((rows - fy) / fb) ** 2 <= 1.0
    skin = np.array([0.78, 0.62, 0.50]) + 0.05 * (rng.random(3) - 0.5)
    img = bg.copy()
    img[face_mask] = skin

    # eye whites
    for sign in (-1.0, 1.0):
        ex = (0.5 + sign * _EYE_OFFSET_X) * s
        ey = _EYE_ROW * s
        ea, eb = _EYE_AXES[0] * s, _EYE_AXES[1] * s
        eye_mask = ((cols - ex) / ea) ** 2 + ((rows - ey) / eb) ** 2 <= 1.0
        img[eye_mask] = np.array([0.93, 0.93, 0.92])

    # pupils: smooth dark blobs at the affine-mapped centers
    radius = _PUPIL_RADIUS * s
    for row_c, col_c in pupil_centers(label, s, config.label_range):
        d2 = (rows - row_c) ** 2 + (cols - col_c) ** 2
        blob = np.exp(-d2 / (radius ** 2))
        img *= (1.0 - 0.92 * blob)[..., None]

    # mouth line
    my = _MOUTH_ROW * s
    mouth = (np.abs(rows - my) <= 0.012 * s) & (np.abs(cols - 0.5 * s) <= _MOUTH_HALF_W * s) & face_mask
    img[mouth] = np.array([0.45, 0.25, 0.25])

    # clutter: smooth low-frequency blobs plus fine grain, scaled by noise_level
    if config.noise_level > 0.0:
        coarse = rng.random((8, 8, 3))
        reps = int(math.ceil(s / 8))
        coarse_up = np.kron(coarse, np.ones((reps, reps, 1)))[:s, :s, :]
        grain = rng.random((s, s, 3))
        img += config.noise_level * (0.6 * (coarse_up - 0.5) + 0.4 * (grain - 0.5))
    else:
        # keep the RNG stream aligned so label sequences match across noise levels
        rng.random((8, 8, 3))
        rng.random((s, s, 3))

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_scene(label: GazeLabel, config: SyntheticSceneConfig, seed: int = 0) -> np.ndarray:
    """Render a single scene for a chosen label (fresh RNG stream for the clutter)."""
    return _render_scene(label, config, np.random.default_rng(seed))


def generate_synthetic_dataset(config: SyntheticSceneConfig) -> list[GazeSample]:
    """Render a deterministic synthetic dataset with labels uniform over label_range."""
    rng = np.random.default_rng(config.seed)
    lo, hi = config.label_range
    samples = []
    for i in range(config.sample_count):
        pitch, yaw = rng.uniform(lo, hi, size=2)
        label = GazeLabel(float(pitch), float(yaw))
        image = _render_scene(label, config, rng)
        samples.append(GazeSample(image=image, label=label, id=f"s{i:05d}"))
    return samples


def export_dataset(samples: list[GazeSample], directory: str | Path) -> Path:
    """Write samples to the on-disk layout: annotations.csv plus images/<id>.png.

    A `poisoned` column is included whenever any sample carries the flag.
    """
    directory = Path(directory)
    (directory / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    with_flag = any(s.poisoned for s in samples)
    header = ["id", "pitch", "yaw", "file"] + (["poisoned"] if with_flag else [])
    with open(directory / ANNOTATIONS_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in samples:
            fname = f"{s.id}.png"
            row = [s.id, repr(s.label.pitch), repr(s.label.yaw), fname]
            if with_flag:
                row.append("1" if s.poisoned else "0")
            writer.writerow(row)
            arr = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(directory / IMAGES_DIR / fname)
    return directory


def load_dataset(directory: str | Path) -> list[GazeSample]:
    """Load a dataset from the annotations.csv + images/ layout, rescaling to [0, 1]."""
    directory = Path(directory)
    ann_path = directory / ANNOTATIONS_FILE
    if not ann_path.is_file():
        raise DataError(f"no {ANNOTATIONS_FILE} in {directory}")
    samples = []
    with open(ann_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{ann_path} is empty") from None
        required = ["id", "pitch", "yaw", "file"]
        if header[: len(required)] != required:
            raise DataError(f"{ann_path} header must start with {required}, got {header}")
        has_flag = "poisoned" in header
        flag_idx = header.index("poisoned") if has_flag else -1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise DataError(f"{ann_path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            sample_id = row[0]
            try:
                label = GazeLabel(float(row[1]), float(row[2]))
            except ValueError as exc:
                raise DataError(f"{ann_path}:{lineno}: bad label value ({exc})") from None
            img_path = directory / IMAGES_DIR / row[3]
            if not img_path.is_file():
                raise DataError(f"missing image for sample id '{sample_id}': {img_path}")
            arr = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
            poisoned = has_flag and row[flag_idx] == "1"
            samples.append(GazeSample(image=arr, label=label, id=sample_id, poisoned=poisoned))
    return samples


def split_dataset(samples: list[GazeSample], ratios: tuple[float, float, float],
                  seed: int) -> DatasetSplit:
    """Shuffle and partition into (train, benign, test) with the given fractions."""
    if len(samples) < 3:
        raise SplitError(f"need at least 3 samples to split, got {len(samples)}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n = len(samples)
    b1 = int(round(ratios[0] * n))
    b2 = int(round((ratios[0] + ratios[1]) * n))
    b1 = max(1, min(b1, n - 2))
    b2 = max(b1 + 1, min(b2, n - 1))
    shuffled = [samples[i] for i in order]
    return DatasetSplit(train=shuffled[:b1], benign=shuffled[b1:b2], test=shuffled[b2:])


def labels_array(samples: list[GazeSample]) -> np.ndarray:
    """Stack labels into an (N, 2) float64 array of (pitch, yaw)."""
    return np.array([[s.label.pitch, s.label.yaw] for s in samples], dtype=np.float64)


def images_array(samples: list[GazeSample]) -> np.ndarray:
    """Stack images into an (N, H, W, 3) float32 array."""
    return np.stack([s.image for s in samples]).astype(np.float32)


def _to_unit_vectors(pitch_yaw: np.ndarray) -> np.ndarray:
    rad = np.deg2rad(np.asarray(pitch_yaw, dtype=np.float64))
    pitch, yaw = rad[..., 0], rad[..., 1]
    return np.stack([np.cos(pitch) * np.sin(yaw),
                     np.sin(pitch),
                     np.cos(pitch) * np.cos(yaw)], axis=-1)


def angular_error_batch(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-row angular disparity in degrees between two (N, 2) pitch/yaw arrays."""
    v1 = _to_unit_vectors(pred)
    v2 = _to_unit_vectors(truth)
    dots = np.clip(np.sum(v1 * v2, axis=-1), -1.0, 1.0)
    return np.rad2deg(np.arccos(dots))


def angular_error(g1: GazeLabel | tuple[float, float], g2: GazeLabel | tuple[float, float]) -> float:
    """Angular disparity in degrees between two gaze directions."""
    a = g1.as_array() if isinstance(g1, GazeLabel) else np.asarray(g1, dtype=np.float64)
    b = g2.as_array() if isinstance(g2, GazeLabel) else np.asarray(g2, dtype=np.float64)
    return float(angular_error_batch(a[None, :], b[None, :])[0])

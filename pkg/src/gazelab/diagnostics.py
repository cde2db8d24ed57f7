"""Feature-space metrics separating backdoored from benign behavior.

Two ratios are computed from backbone features of poisoned vs. benign inputs:
the ratio of norm variances (RNV) and the mean per-output-dimension ratio of
feature-to-head-weight angle variances (RAV). Angles are reported in degrees;
population variance (divide by N) is used throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalGuardError


def feature_norms(features: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(features, dtype=np.float64), axis=1)


def feature_angles(features: np.ndarray, head_weights: np.ndarray) -> np.ndarray:
    """Angles in degrees between each feature row and each head weight row, shape (N, d)."""
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    f_norm = np.linalg.norm(f, axis=1)
    w_norm = np.linalg.norm(w, axis=1)
    zero_f = np.nonzero(f_norm == 0)[0]
    if zero_f.size:
        raise NumericalGuardError(f"feature row {int(zero_f[0])} has zero norm")
    zero_w = np.nonzero(w_norm == 0)[0]
    if zero_w.size:
        raise NumericalGuardError(f"head weight row {int(zero_w[0])} has zero norm")
    cos = (f @ w.T) / np.outer(f_norm, w_norm)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def rnv(poisoned_norms: np.ndarray, benign_norms: np.ndarray) -> float:
    """Variance of poisoned feature norms over variance of benign feature norms."""
    p = np.asarray(poisoned_norms, dtype=np.float64)
    b = np.asarray(benign_norms, dtype=np.float64)
    if p.size < 2 or b.size < 2:
        raise NumericalGuardError("need at least 2 norms on each side")
    var_b = np.var(b)
    if var_b <= 0:
        raise NumericalGuardError("benign norm variance is zero")
    return float(np.var(p) / var_b)


def rav(poisoned_angles: np.ndarray, benign_angles: np.ndarray) -> float:
    """Mean over output dimensions of poisoned-to-benign angle variance ratios."""
    return float(np.mean(angle_variance_ratios(poisoned_angles, benign_angles)))


def angle_variance_ratios(poisoned_angles: np.ndarray, benign_angles: np.ndarray) -> np.ndarray:
    p = np.asarray(poisoned_angles, dtype=np.float64)
    b = np.asarray(benign_angles, dtype=np.float64)
    if p.ndim != 2 or b.ndim != 2 or p.shape[1] != b.shape[1]:
        raise DataError(f"angle matrices must share the output dimension, got {p.shape} vs {b.shape}")
    if p.shape[0] < 2 or b.shape[0] < 2:
        raise NumericalGuardError("need at least 2 rows on each side for a variance")
    var_b = np.var(b, axis=0)
    if np.any(var_b <= 0):
        j = int(np.nonzero(var_b <= 0)[0][0])
        raise NumericalGuardError(f"benign angle variance is zero in output dimension {j}")
    return np.var(p, axis=0) / var_b


@dataclass
class DiagnosticsReport:
    rnv: float
    rav: float
    poisoned_norm_variance: float
    benign_norm_variance: float
    angle_variance_ratios: list[float]

    def to_dict(self) -> dict:
        return {
            "rnv": self.rnv,
            "rav": self.rav,
            "poisoned_norm_variance": self.poisoned_norm_variance,
            "benign_norm_variance": self.benign_norm_variance,
            "angle_variance_ratios": list(self.angle_variance_ratios),
        }


def compute_diagnostics(model, benign_images: np.ndarray, poisoned_images: np.ndarray) -> DiagnosticsReport:
    """Run both feature-space metrics for a model on benign vs. poisoned inputs."""
    from .models import forward_features

    feats_b = forward_features(model, benign_images)
    feats_p = forward_features(model, poisoned_images)
    w = model.head_weights
    angles_b = feature_angles(feats_b, w)
    angles_p = feature_angles(feats_p, w)
    ratios = angle_variance_ratios(angles_p, angles_b)
    return DiagnosticsReport(
        rnv=rnv(feature_norms(feats_p), feature_norms(feats_b)),
        rav=float(np.mean(ratios)),
        poisoned_norm_variance=float(np.var(feature_norms(feats_p))),
        benign_norm_variance=float(np.var(feature_norms(feats_b))),
        angle_variance_ratios=[float(r) for r in ratios],
    )


def export_angle_scatter(poisoned_angles: np.ndarray, benign_angles: np.ndarray,
                         path: str | Path, plot_path: str | Path | None = None) -> Path:
    """Write per-sample angle pairs for both series to a CSV (and optional scatter plot)."""
    p = np.asarray(poisoned_angles, dtype=np.float64)
    b = np.asarray(benign_angles, dtype=np.float64)
    if p.shape[1] != 2 or b.shape[1] != 2:
        raise DataError("angle scatter export expects 2 output dimensions")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series", "alpha_1", "alpha_2"])
        for row in p:
            writer.writerow(["poisoned", repr(float(row[0])), repr(float(row[1]))])
        for row in b:
            writer.writerow(["benign", repr(float(row[0])), repr(float(row[1]))])
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(b[:, 0], b[:, 1], s=12, alpha=0.6, label="benign")
        ax.scatter(p[:, 0], p[:, 1], s=12, alpha=0.6, label="poisoned")
        ax.set_xlabel("angle to head weight 1 (deg)")
        ax.set_ylabel("angle to head weight 2 (deg)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return path

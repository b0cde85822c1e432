"""Early fusion (one network over concatenated features) and late fusion
(weighted average of per-modality class probabilities)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import MlpModel, forward

_TOL = 1e-9


@dataclass(frozen=True)
class FusionWeights:
    w1: float = 0.5  # rPPG
    w2: float = 0.5  # visual

    def __post_init__(self):
        if not (np.isfinite(self.w1) and np.isfinite(self.w2)):
            raise ValueError("fusion weights must be finite")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError(f"fusion weights must be non-negative, got ({self.w1}, {self.w2})")
        if abs(self.w1 + self.w2 - 1.0) > _TOL:
            raise ValueError(f"fusion weights must sum to 1, got {self.w1 + self.w2}")

    @classmethod
    def parse(cls, text: str) -> "FusionWeights":
        parts = text.split(",")
        if len(parts) != 2:
            raise ValueError(f"expected 'w1,w2', got {text!r}")
        return cls(float(parts[0]), float(parts[1]))


def predict_early(fusion_model: MlpModel, fused) -> np.ndarray:
    """Class probabilities of the early-fusion network.

    ``fused`` is a concatenated feature vector (or batch), or a FusedVector.
    """
    values = getattr(fused, "values", fused)
    return forward(fusion_model, values)


def combine_late(probs_rppg, probs_visual, weights: FusionWeights) -> np.ndarray:
    p1 = np.asarray(probs_rppg, dtype=np.float64)
    p2 = np.asarray(probs_visual, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"probability shapes differ: {p1.shape} vs {p2.shape}")
    return weights.w1 * p1 + weights.w2 * p2


def predict_late(model_rppg: MlpModel, model_visual: MlpModel, weights: FusionWeights, x_rppg, x_visual):
    if model_rppg.n_out != model_visual.n_out:
        raise ValueError("models disagree on the number of classes")
    return combine_late(forward(model_rppg, x_rppg), forward(model_visual, x_visual), weights)


def weight_grid(step: float) -> list:
    """Candidate rPPG weights 0, step, 2*step, ... up to and including 1."""
    if not 0 < step <= 0.5:
        raise ValueError("step must lie in (0, 0.5]")
    n = int(np.floor(1.0 / step + 1e-9))
    grid = [round(k * step, 12) for k in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)
    return grid


def tune_weights(val_probs_rppg, val_probs_visual, val_labels, step: float = 0.05) -> FusionWeights:
    """Grid-search the rPPG weight for the best validation accuracy.

    Ties prefer the weight closest to 0.5, then the smaller weight.
    """
    p1 = np.asarray(val_probs_rppg, dtype=np.float64)
    p2 = np.asarray(val_probs_visual, dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty validation set")
    if p1.shape != p2.shape or p1.ndim != 2 or p1.shape[0] != y.size:
        raise ValueError("validation probabilities and labels are misaligned")
    best_key, best = None, None
    for w1 in weight_grid(step):
        acc = float(np.mean(np.argmax(w1 * p1 + (1.0 - w1) * p2, axis=1) == y))
        key = (-acc, abs(w1 - 0.5), w1)
        if best_key is None or key < best_key:
            best_key, best = key, w1
    return FusionWeights(best, 1.0 - best)

"""Permutation feature importance over modality column blocks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .classifier import MlpModel, predict

log = logging.getLogger(__name__)


def permute_group(features, group_span, permutation) -> np.ndarray:
    """Return a copy whose ``group_span`` columns are taken from rows ``permutation``.

    The block moves as a unit: row ``i`` of the result carries the group
    columns of row ``permutation[i]``.
    """
    x = np.asarray(features)
    start, stop = group_span
    if not 0 <= start <= stop <= x.shape[1]:
        raise ValueError(f"span {group_span} outside feature width {x.shape[1]}")
    perm = np.asarray(permutation)
    n = x.shape[0]
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("permutation must be a bijection over the sample indices")
    out = x.copy()
    out[:, start:stop] = x[perm, start:stop]
    return out


def accuracy_scorer(model: MlpModel) -> Callable:
    def scorer(x, y):
        return float(np.mean(predict(model, x) == np.asarray(y)))

    return scorer


@dataclass(frozen=True)
class GroupImportance:
    mean_drop: float
    per_repeat: tuple


def pfi(model_scorer, features, labels, group_span, repeats: int = 5, seed: int = 0) -> GroupImportance:
    """Score drop after shuffling one column block, averaged over ``repeats`` shuffles."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty dataset")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"{x.shape[0]} samples but {y.shape[0]} labels")
    baseline = _checked(model_scorer(x, y))
    rng = np.random.default_rng(seed)
    drops = []
    for _ in range(repeats):
        perm = rng.permutation(x.shape[0])
        drops.append(baseline - _checked(model_scorer(permute_group(x, group_span, perm), y)))
    return GroupImportance(mean_drop=float(np.mean(drops)), per_repeat=tuple(drops))


def _checked(score) -> float:
    score = float(score)
    if not math.isfinite(score):
        raise ValueError(f"scorer returned non-finite score {score}")
    return score


@dataclass(frozen=True)
class Contributions:
    rppg: float
    visual: float
    clamped: bool = False
    degenerate: bool = False


def modality_contributions(pfi_rppg_drop: float, pfi_visual_drop: float) -> Contributions:
    """Turn two mean drops into percentages summing to 100.

    Negative drops count as zero; if both are zero the split is 50/50 and
    ``degenerate`` is set.
    """
    a, b = float(pfi_rppg_drop), float(pfi_visual_drop)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("drops must be finite")
    clamped = a < 0 or b < 0
    a, b = max(a, 0.0), max(b, 0.0)
    total = a + b
    if total == 0:
        log.warning("both modality drops are zero; reporting an even split")
        return Contributions(50.0, 50.0, clamped=clamped, degenerate=True)
    pa = 100.0 * (a / total)
    return Contributions(pa, 100.0 - pa, clamped=clamped)


@dataclass
class PfiReport:
    baseline_score: float
    per_group: dict = field(default_factory=dict)  # name -> GroupImportance
    contributions: Contributions = None


def explain(
    model_scorer,
    features,
    labels,
    groups: Mapping[str, tuple],
    repeats: int = 5,
    seed: int = 0,
) -> PfiReport:
    """PFI for each named block; contributions need groups ``rppg`` and ``visual``.

    Group ``k`` (in mapping order) draws its shuffles from seed ``(seed, k)``.
    """
    x = np.asarray(features, dtype=np.float64)
    report = PfiReport(baseline_score=_checked(model_scorer(x, labels)))
    for k, (name, span) in enumerate(groups.items()):
        report.per_group[name] = pfi(model_scorer, x, labels, span, repeats, seed=[seed, k])
    if "rppg" in report.per_group and "visual" in report.per_group:
        report.contributions = modality_contributions(
            report.per_group["rppg"].mean_drop, report.per_group["visual"].mean_drop
        )
    return report

"""ROI mean-intensity signals and fixed-length feature vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .facedetect import RoiBox

log = logging.getLogger(__name__)


def _as_box(roi) -> RoiBox:
    return roi if isinstance(roi, RoiBox) else RoiBox(*(int(v) for v in roi))


def mean_roi_intensity(frame, roi):
    """Per-channel mean of the pixels inside ``roi`` as ``(R, G, B)`` floats."""
    frame = np.asarray(frame)
    box = _as_box(roi)
    box.check_within(frame.shape[0], frame.shape[1])
    patch = frame[box.y : box.y + box.h, box.x : box.x + box.w, :3]
    sums = patch.reshape(-1, patch.shape[-1]).sum(axis=0, dtype=np.float64)
    means = sums / box.area
    return float(means[0]), float(means[1]), float(means[2])


def extract_rppg(frames, rois) -> np.ndarray:
    """Stack per-frame ROI means into a ``T x 3`` signal."""
    if len(frames) != len(rois):
        raise ValueError(f"{len(frames)} frames but {len(rois)} ROIs")
    out = np.empty((len(frames), 3), dtype=np.float64)
    for t, (frame, roi) in enumerate(zip(frames, rois)):
        try:
            out[t] = mean_roi_intensity(frame, roi)
        except ValueError as exc:
            raise ValueError(f"frame {t}: {exc}") from exc
    return out


def flatten_rppg(samples) -> np.ndarray:
    # time-major: R1, G1, B1, R2, ...
    return np.asarray(samples, dtype=np.float64).reshape(-1)


def flatten_landmarks(track) -> np.ndarray:
    # per frame x0, y0, ..., x67, y67, then time-major
    return np.asarray(track, dtype=np.float64).reshape(-1)


def normalize_landmarks(track, rois) -> np.ndarray:
    """Express each frame's landmarks relative to that frame's ROI."""
    track = np.asarray(track, dtype=np.float64)
    if len(rois) != track.shape[0]:
        raise ValueError(f"{track.shape[0]} landmark frames but {len(rois)} ROIs")
    out = np.empty_like(track)
    for t, roi in enumerate(rois):
        box = _as_box(roi)
        out[t, :, 0] = (track[t, :, 0] - box.x) / box.w
        out[t, :, 1] = (track[t, :, 1] - box.y) / box.h
    return out


@dataclass(frozen=True)
class PaddedFeatures:
    values: np.ndarray
    original_length: int

    @property
    def truncated(self) -> bool:
        return self.original_length > len(self.values)


def zero_pad(flat_features, target_len: int) -> PaddedFeatures:
    """Right-pad with zeros to ``target_len``, or truncate and flag it."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    flat = np.asarray(flat_features, dtype=np.float64).reshape(-1)
    out = np.zeros(target_len, dtype=np.float64)
    n = min(len(flat), target_len)
    out[:n] = flat[:n]
    if len(flat) > target_len:
        log.info("truncated feature vector from %d to %d values", len(flat), target_len)
    return PaddedFeatures(values=out, original_length=len(flat))


@dataclass(frozen=True)
class FusedVector:
    values: np.ndarray
    rppg_span: tuple
    visual_span: tuple

    def rppg(self) -> np.ndarray:
        return self.values[slice(*self.rppg_span)]

    def visual(self) -> np.ndarray:
        return self.values[slice(*self.visual_span)]


def concat_features(rppg_flat, visual_flat) -> FusedVector:
    a = np.asarray(rppg_flat, dtype=np.float64).reshape(-1)
    b = np.asarray(visual_flat, dtype=np.float64).reshape(-1)
    return FusedVector(
        values=np.concatenate([a, b]),
        rppg_span=(0, len(a)),
        visual_span=(len(a), len(a) + len(b)),
    )

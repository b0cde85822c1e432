"""Viola-Jones style face localisation over integral images.

Features are evaluated on the luma plane, variance-normalised per window,
and scaled with the window rather than by resampling the image. A cascade
is stored as JSON::

    {"base_window": [24, 24],
     "stages": [{"threshold": 0.5,
                 "weak": [{"rects": [[x, y, w, h, weight], ...],
                           "threshold": 20.0, "left_val": -1.0, "right_val": 1.0}]}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHANNELS = {"R": 0, "G": 1, "B": 2}


class NoFaceFound(RuntimeError):
    pass


def _round(v: float) -> int:
    # half away from zero for the non-negative values used here
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class RoiBox:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def check_within(self, height: int, width: int) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"ROI {self} has zero area")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise ValueError(f"ROI {self} exceeds {width}x{height} frame")

    def iou(self, other: "RoiBox") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        return inter / (self.area + other.area - inter)

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)


# ---------------------------------------------------------------------------
# integral images
# ---------------------------------------------------------------------------


def _cumsum2d(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    table = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(plane, axis=0, dtype=np.int64), axis=1, out=table[1:, 1:])
    return table


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area tables of a plane and of its squares.

    ``table[y, x]`` is the sum of ``plane[:y, :x]``.
    """

    table: np.ndarray
    squares: np.ndarray

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    def rect_sum(self, x: int, y: int, w: int, h: int) -> int:
        t = self.table
        return int(t[y + h, x + w] - t[y, x + w] - t[y + h, x] + t[y, x])

    def rect_sq_sum(self, x: int, y: int, w: int, h: int) -> int:
        t = self.squares
        return int(t[y + h, x + w] - t[y, x + w] - t[y + h, x] + t[y, x])


def luma(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    return np.floor(0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2] + 0.5).astype(np.int64)


def integral_image(frame, channel="luma") -> IntegralImage:
    """Build the integral image of one channel (``"R"``, ``"G"``, ``"B"`` or ``"luma"``).

    A 2-D ``frame`` is taken as the plane itself.
    """
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    if frame.ndim == 2:
        plane = frame.astype(np.int64)
    elif channel == "luma":
        plane = luma(frame)
    elif channel in CHANNELS:
        plane = frame[..., CHANNELS[channel]].astype(np.int64)
    else:
        raise ValueError(f"unknown channel {channel!r}")
    return IntegralImage(table=_cumsum2d(plane), squares=_cumsum2d(plane * plane))


# ---------------------------------------------------------------------------
# cascade model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HaarRect:
    x: int
    y: int
    w: int
    h: int
    weight: float


@dataclass(frozen=True)
class WeakClassifier:
    rects: tuple
    threshold: float
    left_val: float
    right_val: float


@dataclass(frozen=True)
class Stage:
    threshold: float
    weak: tuple


@dataclass(frozen=True)
class HaarCascade:
    stages: tuple
    base_window: tuple = (24, 24)

    def __post_init__(self):
        w0, h0 = self.base_window
        if w0 < 1 or h0 < 1:
            raise ValueError("base window must be positive")
        for si, stage in enumerate(self.stages):
            if not stage.weak:
                raise ValueError(f"stage {si} has no weak classifiers")
            for weak in stage.weak:
                if not weak.rects:
                    raise ValueError(f"stage {si}: weak classifier without rectangles")
                for r in weak.rects:
                    if r.w < 1 or r.h < 1 or r.x < 0 or r.y < 0 or r.x + r.w > w0 or r.y + r.h > h0:
                        raise ValueError(f"stage {si}: rectangle {r} outside {w0}x{h0} window")

    def with_stage(self, stage: Stage) -> "HaarCascade":
        return HaarCascade(stages=self.stages + (stage,), base_window=self.base_window)

    def to_dict(self) -> dict:
        return {
            "base_window": list(self.base_window),
            "stages": [
                {
                    "threshold": s.threshold,
                    "weak": [
                        {
                            "rects": [[r.x, r.y, r.w, r.h, r.weight] for r in wk.rects],
                            "threshold": wk.threshold,
                            "left_val": wk.left_val,
                            "right_val": wk.right_val,
                        }
                        for wk in s.weak
                    ],
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HaarCascade":
        try:
            stages = tuple(
                Stage(
                    threshold=float(s["threshold"]),
                    weak=tuple(
                        WeakClassifier(
                            rects=tuple(
                                HaarRect(int(x), int(y), int(w), int(h), float(wt))
                                for x, y, w, h, wt in wk["rects"]
                            ),
                            threshold=float(wk["threshold"]),
                            left_val=float(wk["left_val"]),
                            right_val=float(wk["right_val"]),
                        )
                        for wk in s["weak"]
                    ),
                )
                for s in data["stages"]
            )
            base = tuple(int(v) for v in data.get("base_window", (24, 24)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed cascade: {exc}") from exc
        if len(base) != 2:
            raise ValueError("base_window needs two values")
        return cls(stages=stages, base_window=base)


def load_cascade(path) -> HaarCascade:
    with open(path, encoding="utf-8") as fh:
        return HaarCascade.from_dict(json.load(fh))


def save_cascade(cascade: HaarCascade, path) -> None:
    Path(path).write_text(json.dumps(cascade.to_dict(), indent=1) + "\n", encoding="utf-8")


def demo_cascade() -> HaarCascade:
    """Small hand-written frontal cascade shipped with the package."""
    text = resources.files("emofuse").joinpath("data/demo_cascade.json").read_text(encoding="utf-8")
    return HaarCascade.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# window evaluation
# ---------------------------------------------------------------------------


def window_size(cascade: HaarCascade, scale: float):
    w0, h0 = cascade.base_window
    return _round(w0 * scale), _round(h0 * scale)


def _scaled_rect(r: HaarRect, scale: float, win_w: int, win_h: int):
    x = min(_round(r.x * scale), win_w - 1)
    y = min(_round(r.y * scale), win_h - 1)
    w = max(1, min(_round(r.w * scale), win_w - x))
    h = max(1, min(_round(r.h * scale), win_h - y))
    return x, y, w, h


def evaluate_window(cascade: HaarCascade, ii: IntegralImage, window, scale: float) -> bool:
    """Run the cascade on one window.

    ``window`` is the ``(x, y)`` top-left corner; the window extent is the
    base window times ``scale``.
    """
    if scale < 1:
        raise ValueError("scale must be >= 1")
    x0, y0 = int(window[0]), int(window[1])
    win_w, win_h = window_size(cascade, scale)
    if x0 < 0 or y0 < 0 or x0 + win_w > ii.width or y0 + win_h > ii.height:
        raise ValueError(f"window ({x0}, {y0}, {win_w}, {win_h}) outside {ii.width}x{ii.height} image")
    area = win_w * win_h
    total = ii.rect_sum(x0, y0, win_w, win_h)
    sq = ii.rect_sq_sum(x0, y0, win_w, win_h)
    mean = total / area
    std = max(1.0, math.sqrt(max(sq / area - mean * mean, 0.0)))
    ratio = area / (cascade.base_window[0] * cascade.base_window[1])
    for stage in cascade.stages:
        acc = 0.0
        for weak in stage.weak:
            feat = 0.0
            for r in weak.rects:
                rx, ry, rw, rh = _scaled_rect(r, scale, win_w, win_h)
                feat += r.weight * ii.rect_sum(x0 + rx, y0 + ry, rw, rh)
            value = feat / std
            acc += weak.left_val if value < weak.threshold * ratio else weak.right_val
        if acc < stage.threshold:
            return False
    return True


def _accept_grid(cascade: HaarCascade, ii: IntegralImage, scale: float, stride: int) -> np.ndarray:
    """Vectorised ``evaluate_window`` over every stride-aligned window at one scale.

    Returns an ``(ny, nx)`` boolean grid indexed by ``(y // stride, x // stride)``.
    """
    win_w, win_h = window_size(cascade, scale)
    ys = np.arange(0, ii.height - win_h + 1, stride)
    xs = np.arange(0, ii.width - win_w + 1, stride)
    Y, X = np.meshgrid(ys, xs, indexing="ij")

    def box(t, dx, dy, w, h):
        return (
            t[Y + dy + h, X + dx + w] - t[Y + dy, X + dx + w] - t[Y + dy + h, X + dx] + t[Y + dy, X + dx]
        )

    area = win_w * win_h
    total = box(ii.table, 0, 0, win_w, win_h).astype(np.float64)
    sq = box(ii.squares, 0, 0, win_w, win_h).astype(np.float64)
    mean = total / area
    std = np.maximum(1.0, np.sqrt(np.maximum(sq / area - mean * mean, 0.0)))
    ratio = area / (cascade.base_window[0] * cascade.base_window[1])
    alive = np.ones(Y.shape, dtype=bool)
    for stage in cascade.stages:
        acc = np.zeros(Y.shape)
        for weak in stage.weak:
            feat = np.zeros(Y.shape)
            for r in weak.rects:
                rx, ry, rw, rh = _scaled_rect(r, scale, win_w, win_h)
                feat += r.weight * box(ii.table, rx, ry, rw, rh)
            value = feat / std
            acc += np.where(value < weak.threshold * ratio, weak.left_val, weak.right_val)
        alive &= acc >= stage.threshold
        if not alive.any():
            break
    return alive


@dataclass(frozen=True)
class DetectParams:
    scale_factor: float = 1.25
    stride_fraction: float = 0.1

    def __post_init__(self):
        if not self.scale_factor > 1:
            raise ValueError("scale_factor must be > 1")
        if not self.stride_fraction > 0:
            raise ValueError("stride_fraction must be > 0")

    def stride(self, win_w: int) -> int:
        return max(1, _round(self.stride_fraction * win_w))


def candidate_scales(cascade: HaarCascade, height: int, width: int, params: DetectParams) -> list:
    """Scales ``k**i`` whose windows fit the frame, smallest first."""
    scales = []
    i = 0
    while True:
        s = params.scale_factor**i
        w, h = window_size(cascade, s)
        if w > width or h > height:
            return scales
        scales.append(s)
        i += 1


def detect_face(frame, cascade: HaarCascade, params: Optional[DetectParams] = None, ii=None) -> RoiBox:
    """Largest accepted window; ties go to the smallest y, then smallest x."""
    params = params or DetectParams()
    frame = np.asarray(frame)
    height, width = frame.shape[:2]
    w0, h0 = cascade.base_window
    if height < h0 or width < w0:
        raise ValueError(f"frame {width}x{height} smaller than base window {w0}x{h0}")
    if ii is None:
        ii = integral_image(frame, "luma")
    scales = candidate_scales(cascade, height, width, params)
    best = None  # (-area, y, x, w, h)
    best_area = None
    for s in reversed(scales):
        win_w, win_h = window_size(cascade, s)
        area = win_w * win_h
        if best_area is not None and area < best_area:
            break
        stride = params.stride(win_w)
        grid = _accept_grid(cascade, ii, s, stride)
        hits = np.argwhere(grid)
        if len(hits):
            gy, gx = hits[0]  # argwhere is row-major: smallest y, then x
            cand = (-area, int(gy) * stride, int(gx) * stride, win_w, win_h)
            if best is None or cand < best:
                best = cand
                best_area = area
    if best is None:
        raise NoFaceFound("no window accepted by the cascade")
    _, y, x, w, h = best
    return RoiBox(x, y, w, h)


def track_faces(frames, cascade: HaarCascade, params: Optional[DetectParams] = None) -> list:
    """Detect a box per frame, reusing the last good box when a frame fails.

    Frames before the first detection take the first detected box. Raises
    NoFaceFound if no frame of the clip has a face.
    """
    boxes = []
    last = None
    for frame in frames:
        try:
            last = detect_face(frame, cascade, params)
        except NoFaceFound:
            pass
        boxes.append(last)
    first = next((b for b in boxes if b is not None), None)
    if first is None:
        raise NoFaceFound(f"no face found in any of {len(boxes)} frames")
    return [first if b is None else b for b in boxes]

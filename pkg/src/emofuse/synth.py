"""Synthetic stand-in dataset with complementary modalities.

Each class ``c`` is split into two coarse codes that overlap like tiles:
the rPPG signal carries ``c // 2`` and the landmarks carry
``((c + 1) % 10) // 2``. Either code alone narrows the class to a pair,
so a single modality tops out near 50% accuracy, while the two codes
together pin down the class.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import dataio
from .dataio import ClipEntry, NUM_CLASSES
from .facedetect import RoiBox

FRAME_SIZE = 40
FACE_SIZE = 30

SKIN = np.array([180.0, 130.0, 110.0])
FEATURE_DARK = np.array([50.0, 35.0, 35.0])
BACKGROUND = np.array([45.0, 50.0, 60.0])

# eye and mouth patches in face-box units (x0, y0, x1, y1)
EYE_PATCHES = ((0.17, 0.33, 0.43, 0.45), (0.57, 0.33, 0.83, 0.45))
MOUTH_PATCH = (0.30, 0.68, 0.70, 0.80)


def rppg_code(label: int) -> int:
    return label // 2


def visual_code(label: int) -> int:
    return ((label + 1) % NUM_CLASSES) // 2


def landmark_template() -> np.ndarray:
    """A neutral 68-point face in unit box coordinates (iBUG ordering)."""
    pts = []
    # jaw 0-16
    for a in np.linspace(np.pi, 0, 17):
        pts.append((0.5 + 0.46 * np.cos(a), 0.45 + 0.50 * np.sin(a)))
    # brows 17-21, 22-26
    for x0 in (0.15, 0.55):
        for i in range(5):
            x = x0 + 0.075 * i
            pts.append((x, 0.27 - 0.03 * np.sin(np.pi * i / 4)))
    # nose bridge 27-30, base 31-35
    for i in range(4):
        pts.append((0.5, 0.38 + 0.065 * i))
    for i in range(5):
        pts.append((0.42 + 0.04 * i, 0.62 + 0.015 * (1 - abs(i - 2) / 2)))
    # eyes 36-41, 42-47
    for cx in (0.30, 0.70):
        for a in np.linspace(np.pi, -np.pi, 6, endpoint=False):
            pts.append((cx + 0.10 * np.cos(a), 0.39 - 0.035 * np.sin(a)))
    # outer lip 48-59, inner lip 60-67
    for a in np.linspace(np.pi, -np.pi, 12, endpoint=False):
        pts.append((0.5 + 0.18 * np.cos(a), 0.74 - 0.06 * np.sin(a)))
    for a in np.linspace(np.pi, -np.pi, 8, endpoint=False):
        pts.append((0.5 + 0.11 * np.cos(a), 0.74 - 0.03 * np.sin(a)))
    arr = np.asarray(pts, dtype=np.float64)
    assert arr.shape == (68, 2)
    return arr


_TEMPLATE = landmark_template()
_MOUTH = np.r_[48:68]
_BROWS = np.r_[17:27]
_EYES = np.r_[36:48]


def expression_landmarks(code: int, box: RoiBox, rng, n_frames: int, jitter: float = 0.1) -> np.ndarray:
    """Landmark track whose mouth/brow/eye geometry encodes ``code`` (0..4)."""
    base = _TEMPLATE.copy()
    mouth_c = base[_MOUTH, 1].mean()
    base[_MOUTH, 1] = mouth_c + (base[_MOUTH, 1] - mouth_c) * (1.0 + 0.6 * code)
    base[_BROWS, 1] -= 0.025 * code
    eye_c = base[_EYES, 1].mean()
    base[_EYES, 1] = eye_c + (base[_EYES, 1] - eye_c) * (1.0 + 0.15 * code)
    scale = np.array([box.w, box.h], dtype=np.float64)
    origin = np.array([box.x, box.y], dtype=np.float64)
    track = origin + base * scale
    track = np.broadcast_to(track, (n_frames, 68, 2)).copy()
    track += rng.normal(0.0, jitter, size=track.shape)
    return np.round(track, 3)


def skin_series(code: int, n_frames: int, rng, fps: float = 10.0) -> np.ndarray:
    """Per-frame skin colour whose level and pulse rate encode ``code`` (0..4)."""
    t = np.arange(n_frames) / fps
    rate = 1.0 + 0.25 * code  # Hz
    phase = rng.uniform(0, 2 * np.pi)
    pulse = np.sin(2 * np.pi * rate * t + phase)
    offset = np.array([4.0, 8.0, 2.0]) * code
    illum = rng.normal(0.0, 1.5)
    series = SKIN + offset + illum
    series = series + np.outer(pulse, [0.5, 1.5, 0.25])
    return series + rng.normal(0.0, 0.5, size=(n_frames, 3))


def render_face(size: int, box: RoiBox, skin, rng, noise: float = 2.0) -> np.ndarray:
    """Draw a box face (skin square, dark eyes and mouth) on a plain background."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    img[box.y : box.y + box.h, box.x : box.x + box.w] = skin
    for x0, y0, x1, y1 in EYE_PATCHES + (MOUTH_PATCH,):
        xa = box.x + int(round(x0 * box.w))
        xb = box.x + int(round(x1 * box.w))
        ya = box.y + int(round(y0 * box.h))
        yb = box.y + int(round(y1 * box.h))
        img[ya:yb, xa:xb] = FEATURE_DARK
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def make_clip(label: int, rng, n_frames: int, frame_size: int = FRAME_SIZE, face_size: int = FACE_SIZE):
    """Render one clip; returns ``(frames, landmarks, rois)``."""
    slack = frame_size - face_size
    x = int(rng.integers(0, slack + 1))
    y = int(rng.integers(0, slack + 1))
    box = RoiBox(x, y, face_size, face_size)
    skins = skin_series(rppg_code(label), n_frames, rng)
    frames = np.stack([render_face(frame_size, box, skins[t], rng) for t in range(n_frames)])
    track = expression_landmarks(visual_code(label), box, rng, n_frames)
    return frames, track, [box] * n_frames


def generate_dataset(
    out_dir,
    n_clips: int = 400,
    seed: int = 0,
    min_frames: int = 8,
    max_frames: int = 12,
):
    """Write a synthetic corpus under ``out_dir`` and return the manifest path.

    Layout: ``frames/<id>.fseq``, ``landmarks/<id>.csv``, ``roi/<id>.csv``
    and ``manifest.tsv``. Labels cycle through all classes so every class
    is equally represented.
    """
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if not 1 <= min_frames <= max_frames:
        raise ValueError("need 1 <= min_frames <= max_frames")
    out = Path(out_dir)
    for sub in ("frames", "landmarks", "roi"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_clips):
        label = i % NUM_CLASSES
        clip_id = f"clip{i:04d}"
        n_frames = int(rng.integers(min_frames, max_frames + 1))
        frames, track, rois = make_clip(label, rng, n_frames)
        fpath = out / "frames" / f"{clip_id}.fseq"
        lpath = out / "landmarks" / f"{clip_id}.csv"
        rpath = out / "roi" / f"{clip_id}.csv"
        dataio.write_fseq(fpath, frames)
        dataio.write_landmark_track(lpath, track)
        dataio.write_roi_sidecar(rpath, [b.as_tuple() for b in rois])
        entries.append(ClipEntry(clip_id, fpath, label, landmarks_path=lpath, roi_path=rpath))
    manifest = out / "manifest.tsv"
    dataio.write_manifest(manifest, entries)
    return manifest

"""Readers and writers for manifests, frames, sidecars, caches and models.

File formats
------------
Manifest
    UTF-8 text, one clip per line, tab separated::

        id<TAB>frames_source<TAB>label[<TAB>landmarks=path][<TAB>roi=path]

    ``#`` starts a comment line, blank lines are ignored. Relative paths are
    resolved against the manifest's directory.
FSEQ
    ``b"FSEQ"`` then ``T, H, W`` as little-endian uint32, then ``T*H*W*3``
    bytes of interleaved RGB, row-major.
Model (``FEM1``)
    magic, uint16 version, uint32 layer count, then per layer
    ``uint32 rows, uint32 cols, rows*cols float64 weights, rows float64
    biases``, then one activation tag byte per layer, then the CRC-32 of
    every preceding byte as uint32. All little-endian.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EMOTIONS = (
    "neutral",
    "happy",
    "sad",
    "angry",
    "excited",
    "frustrated",
    "fearful",
    "surprised",
    "distressed",
    "other",
)
NUM_CLASSES = len(EMOTIONS)
NUM_LANDMARKS = 68

FSEQ_MAGIC = b"FSEQ"
MODEL_MAGIC = b"FEM1"
MODEL_VERSION = 1

# activation tags stored in model files
TAG_RELU = 0
TAG_RELU_SKIP = 1
TAG_SOFTMAX = 2


class FormatError(ValueError):
    """A file does not follow its expected format."""


class ManifestError(ValueError):
    """A manifest could not be parsed."""


@dataclass(frozen=True)
class ClipEntry:
    id: str
    frames_source: Path
    label: int
    landmarks_path: Optional[Path] = None
    roi_path: Optional[Path] = None

    @property
    def label_name(self) -> str:
        return EMOTIONS[self.label]


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    label_set: tuple = EMOTIONS

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self) -> dict:
        return {e.id: e for e in self.entries}


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def load_manifest(path) -> DatasetManifest:
    """Parse a tab-separated clip manifest.

    Errors carry the 1-based line number of the offending record.
    """
    path = Path(path)
    base = path.parent
    label_index = {name: i for i, name in enumerate(EMOTIONS)}
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected at least 3 tab-separated fields, got {len(fields)}"
                )
            clip_id, frames, label = fields[0].strip(), fields[1].strip(), fields[2].strip()
            if not clip_id or not frames:
                raise ManifestError(f"{path}:{lineno}: empty id or frames_source")
            if label not in label_index:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            if clip_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {clip_id!r}")
            seen.add(clip_id)
            extras = {}
            for opt in fields[3:]:
                key, sep, value = opt.partition("=")
                key = key.strip()
                if not sep or key not in ("landmarks", "roi") or key in extras:
                    raise ManifestError(f"{path}:{lineno}: bad optional field {opt!r}")
                extras[key] = base / value.strip()
            entries.append(
                ClipEntry(
                    id=clip_id,
                    frames_source=base / frames,
                    label=label_index[label],
                    landmarks_path=extras.get("landmarks"),
                    roi_path=extras.get("roi"),
                )
            )
    if not entries:
        raise ManifestError(f"{path}: manifest contains no records")
    return DatasetManifest(entries=tuple(entries))


def write_manifest(path, entries: Sequence[ClipEntry]) -> None:
    """Write entries with paths relative to the manifest directory where possible."""
    path = Path(path)
    base = path.parent

    def rel(p):
        try:
            return os.path.relpath(p, base)
        except ValueError:
            return str(p)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# id\tframes_source\tlabel\t[landmarks=]\t[roi=]\n")
        for e in entries:
            fields = [e.id, rel(e.frames_source), EMOTIONS[e.label]]
            if e.landmarks_path is not None:
                fields.append("landmarks=" + rel(e.landmarks_path))
            if e.roi_path is not None:
                fields.append("roi=" + rel(e.roi_path))
            fh.write("\t".join(fields) + "\n")


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def read_fseq(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FSEQ_MAGIC:
        raise FormatError(f"{path}: not an FSEQ file")
    t, h, w = struct.unpack_from("<III", data, 4)
    if t == 0:
        raise FormatError(f"{path}: zero frames")
    if h == 0 or w == 0:
        raise FormatError(f"{path}: empty frame size {h}x{w}")
    expected = t * h * w * 3
    payload = data[16:]
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, 3).copy()


def write_fseq(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3 or frames.shape[0] < 1:
        raise ValueError(f"expected T x H x W x 3 frames, got shape {frames.shape}")
    if frames.dtype != np.uint8:
        raise ValueError("frames must be uint8")
    t, h, w, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(FSEQ_MAGIC + struct.pack("<III", t, h, w))
        fh.write(np.ascontiguousarray(frames).tobytes())


def _ppm_tokens(data: bytes, count: int):
    """Return the first ``count`` header tokens of a PNM file and the payload offset."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not data[i : i + 1].isspace():
        raise FormatError("truncated PPM header")
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image with maxval 255 as an H x W x 3 uint8 array."""
    data = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(tok) for tok in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: empty image")
    size = w * h * 3
    raster = data[offset : offset + size]
    if len(raster) < size:
        raise FormatError(f"{path}: truncated raster ({len(raster)} of {size} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def load_frames(frames_source) -> np.ndarray:
    """Load a clip as a ``T x H x W x 3`` uint8 array.

    ``frames_source`` is an FSEQ file or a directory of P6 images read in
    lexicographic filename order.
    """
    src = Path(frames_source)
    if src.is_dir():
        names = sorted(p.name for p in src.iterdir() if p.is_file() and p.suffix.lower() == ".ppm")
        if not names:
            raise FormatError(f"{src}: directory holds no .ppm frames")
        frames = []
        for name in names:
            img = read_ppm(src / name)
            if frames and img.shape != frames[0].shape:
                raise FormatError(
                    f"{src / name}: frame size {img.shape[1]}x{img.shape[0]} differs from "
                    f"{frames[0].shape[1]}x{frames[0].shape[0]}"
                )
            frames.append(img)
        return np.stack(frames)
    if not src.exists():
        raise FileNotFoundError(f"frames source not found: {src}")
    return read_fseq(src)


# ---------------------------------------------------------------------------
# sidecars
# ---------------------------------------------------------------------------


def _read_rows(path, arity, kind, parse=float):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for idx, raw in enumerate(fh):
            line = raw.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != arity:
                raise FormatError(
                    f"{path}: row {len(rows)} has {len(fields)} fields, expected {arity} ({kind})"
                )
            try:
                rows.append([parse(f) for f in fields])
            except ValueError as exc:
                raise FormatError(f"{path}: row {len(rows)}: non-numeric field ({kind})") from exc
    return rows


def load_landmark_track(path, expected_frames: int) -> np.ndarray:
    """Read a landmark sidecar into a ``T x 68 x 2`` float64 array."""
    if expected_frames < 1:
        raise ValueError("expected_frames must be >= 1")
    rows = _read_rows(path, 2 * NUM_LANDMARKS, "landmarks")
    if len(rows) != expected_frames:
        raise FormatError(f"{path}: {len(rows)} rows but clip has {expected_frames} frames")
    track = np.asarray(rows, dtype=np.float64).reshape(expected_frames, NUM_LANDMARKS, 2)
    if not np.all(np.isfinite(track)):
        raise FormatError(f"{path}: non-finite coordinate")
    return track


def write_landmark_track(path, track) -> None:
    track = np.asarray(track, dtype=np.float64)
    flat = track.reshape(track.shape[0], -1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_roi_sidecar(path, expected_frames: Optional[int] = None) -> list:
    """Read ``x,y,w,h`` integer rows; returns a list of 4-tuples."""
    rows = _read_rows(path, 4, "roi", parse=int)
    if expected_frames is not None and len(rows) != expected_frames:
        raise FormatError(f"{path}: {len(rows)} rows but clip has {expected_frames} frames")
    return [tuple(r) for r in rows]


def write_roi_sidecar(path, rois) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, w, h in rois:
            fh.write(f"{int(x)},{int(y)},{int(w)},{int(h)}\n")


# signal cache: <clip_id>.rppg holds T lines "R,G,B"; <clip_id>.lmk mirrors the sidecar


def write_rppg_cache(path, samples) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r, g, b in samples:
            fh.write(f"{float(r)!r},{float(g)!r},{float(b)!r}\n")


def read_rppg_cache(path) -> np.ndarray:
    rows = _read_rows(path, 3, "rppg")
    if not rows:
        raise FormatError(f"{path}: empty signal cache")
    return np.asarray(rows, dtype=np.float64)


def read_landmark_cache(path) -> np.ndarray:
    rows = _read_rows(path, 2 * NUM_LANDMARKS, "landmarks")
    if not rows:
        raise FormatError(f"{path}: empty landmark cache")
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), NUM_LANDMARKS, 2)


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------


def _model_tags(model) -> list:
    n = len(model.weights)
    tags = [TAG_RELU_SKIP if model.residual_skips[i] else TAG_RELU for i in range(n - 1)]
    return tags + [TAG_SOFTMAX]


def serialize_model(model) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(model.weights))]
    for w, b in zip(model.weights, model.biases):
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(bytes(_model_tags(model)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_model(data: bytes):
    from .classifier import MlpModel

    if len(data) < 14 or data[:4] != MODEL_MAGIC:
        raise FormatError("bad model magic")
    version, n_layers = struct.unpack_from("<HI", data, 4)
    if version > MODEL_VERSION or version == 0:
        raise FormatError(f"unsupported model format version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("model checksum mismatch")
    if n_layers < 1:
        raise FormatError("model has no layers")
    off = 10
    weights, biases = [], []
    try:
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            w = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=off)
            off += 8 * rows * cols
            b = np.frombuffer(body, dtype="<f8", count=rows, offset=off)
            off += 8 * rows
            weights.append(w.reshape(rows, cols).astype(np.float64))
            biases.append(b.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise FormatError("truncated model payload") from exc
    tags = body[off : off + n_layers]
    if len(tags) != n_layers or off + n_layers != len(body):
        raise FormatError("malformed activation tags")
    if tags[-1] != TAG_SOFTMAX or any(t not in (TAG_RELU, TAG_RELU_SKIP) for t in tags[:-1]):
        raise FormatError(f"unknown activation tags {list(tags)}")
    skips = tuple(t == TAG_RELU_SKIP for t in tags[:-1]) + (False,)
    return MlpModel(weights=weights, biases=biases, residual_skips=skips)


def persist_model(model, path) -> None:
    Path(path).write_bytes(serialize_model(model))


def restore_model(path):
    return deserialize_model(Path(path).read_bytes())

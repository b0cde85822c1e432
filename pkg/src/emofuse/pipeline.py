"""Run orchestration shared by the command-line stages.

A run directory holds::

    cache/<clip_id>.rppg, cache/<clip_id>.lmk   extracted signals
    models/<name>.fem                           trained networks
    models/preprocess.npz                       padding lengths and scalers
    logs/<name>.log                             epoch,loss,accuracy lines
    state.json                                  split, config and results
    report.txt                                  rendered from state.json
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio, facedetect, signals
from .classifier import DEFAULT_HIDDEN, TrainConfig, forward, init_network, predict, train
from .evaluate import score
from .fusion import FusionWeights, combine_late, tune_weights
from .interpret import accuracy_scorer, explain

log = logging.getLogger(__name__)

FUSION_MODES = ("rppg", "visual", "early", "late")
MODEL_NAMES = ("rppg", "visual", "early")


class PipelineError(RuntimeError):
    """A stage could not complete; the message is user-facing."""


@dataclass
class RunConfig:
    manifest: str
    out: str
    seed: int = 0
    split: tuple = (0.7, 0.15, 0.15)
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    optimizer: str = "adam"
    fusion: tuple = FUSION_MODES
    weights: Optional[tuple] = None
    tune_step: Optional[float] = None
    pfi_repeats: int = 5
    cascade: Optional[str] = None
    roi_sidecars: bool = False
    scale_factor: float = 1.25
    normalize_landmarks: bool = False
    standardize: bool = True
    jobs: int = 1

    def validate(self) -> None:
        if len(self.split) != 3 or any(r <= 0 for r in self.split):
            raise ValueError("split ratios must be three positive numbers")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.split)}")
        bad = [m for m in self.fusion if m not in FUSION_MODES]
        if bad or not self.fusion:
            raise ValueError(f"fusion modes must be drawn from {FUSION_MODES}")
        if self.weights is not None and self.tune_step is not None:
            raise ValueError("give either fixed weights or a tune step, not both")
        if self.weights is not None:
            FusionWeights(*self.weights)
        if self.tune_step is not None and not 0 < self.tune_step <= 0.5:
            raise ValueError("tune step must lie in (0, 0.5]")
        if self.pfi_repeats < 1:
            raise ValueError("pfi repeats must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        TrainConfig(self.epochs, self.batch_size, self.lr, optimizer=self.optimizer)
        if not Path(self.manifest).is_file():
            raise ValueError(f"manifest not found: {self.manifest}")
        if self.cascade is not None and not Path(self.cascade).is_file():
            raise ValueError(f"cascade file not found: {self.cascade}")

    def models_needed(self) -> list:
        need = set()
        for mode in self.fusion:
            need.update(("rppg", "visual") if mode == "late" else (mode,))
        return [m for m in MODEL_NAMES if m in need]


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def extract_clip(entry: dataio.ClipEntry, cache_dir: Path, cascade, params, use_sidecar, normalize):
    """Extract one clip into the cache; returns the clip id."""
    frames = dataio.load_frames(entry.frames_source)
    if use_sidecar:
        if entry.roi_path is None:
            raise PipelineError("no roi= sidecar in the manifest")
        rois = [facedetect.RoiBox(*r) for r in dataio.load_roi_sidecar(entry.roi_path, len(frames))]
    else:
        rois = facedetect.track_faces(frames, cascade, params)
    samples = signals.extract_rppg(frames, rois)
    dataio.write_rppg_cache(cache_dir / f"{entry.id}.rppg", samples)
    if entry.landmarks_path is not None:
        track = dataio.load_landmark_track(entry.landmarks_path, len(frames))
        if normalize:
            track = signals.normalize_landmarks(track, rois)
        dataio.write_landmark_track(cache_dir / f"{entry.id}.lmk", track)
    return entry.id


def _extract_job(args):
    entry = args[0]
    try:
        extract_clip(*args)
        return entry.id, None
    except Exception as exc:  # reported per clip by the caller
        return entry.id, f"{type(exc).__name__}: {exc}"


def run_extract(cfg: RunConfig) -> list:
    """Extract every clip; returns ``[(clip_id, error)]`` for failed clips."""
    manifest = dataio.load_manifest(cfg.manifest)
    cache_dir = Path(cfg.out) / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    cascade = None
    if not cfg.roi_sidecars:
        cascade = facedetect.load_cascade(cfg.cascade) if cfg.cascade else facedetect.demo_cascade()
    params = facedetect.DetectParams(scale_factor=cfg.scale_factor)
    jobs = [(e, cache_dir, cascade, params, cfg.roi_sidecars, cfg.normalize_landmarks) for e in manifest]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_extract_job, jobs, chunksize=8))
    else:
        results = [_extract_job(j) for j in jobs]
    failures = [(cid, err) for cid, err in results if err is not None]
    for cid, err in failures:
        log.error("clip %s: %s", cid, err)
    log.info("extracted %d of %d clips", len(results) - len(failures), len(results))
    return failures


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def split_ids(ids, ratios, seed: int):
    """Seeded shuffle then ratio slicing into (train, val, test) id lists."""
    ids = list(ids)
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    if n_train < 1 or n_train + n_val >= n:
        raise PipelineError(f"{n} clips are too few for split {tuple(ratios)}")
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


def load_cached(out: Path, manifest: dataio.DatasetManifest):
    """Read the cached flat features of every clip: ``{id: (rppg_flat, lmk_flat)}``."""
    cache = out / "cache"
    data = {}
    missing = []
    for e in manifest:
        rp = cache / f"{e.id}.rppg"
        lp = cache / f"{e.id}.lmk"
        if not rp.is_file() or not lp.is_file():
            missing.append(e.id)
            continue
        data[e.id] = (
            signals.flatten_rppg(dataio.read_rppg_cache(rp)),
            signals.flatten_landmarks(dataio.read_landmark_cache(lp)),
        )
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise PipelineError(f"missing signal caches for {len(missing)} clip(s): {shown}; run extract first")
    return data


@dataclass
class Preprocess:
    """Padding targets and optional per-column standardisation, fit on training clips."""

    rppg_len: int
    visual_len: int
    rppg_mean: np.ndarray = None
    rppg_std: np.ndarray = None
    visual_mean: np.ndarray = None
    visual_std: np.ndarray = None

    @classmethod
    def fit(cls, flats_rppg, flats_visual, standardize: bool) -> "Preprocess":
        pre = cls(max(len(v) for v in flats_rppg), max(len(v) for v in flats_visual))
        if standardize:
            xr = pre._pad(flats_rppg, pre.rppg_len)
            xv = pre._pad(flats_visual, pre.visual_len)
            pre.rppg_mean, pre.rppg_std = _moments(xr)
            pre.visual_mean, pre.visual_std = _moments(xv)
        return pre

    @staticmethod
    def _pad(flats, length):
        return np.stack([signals.zero_pad(v, length).values for v in flats])

    def transform(self, flats_rppg, flats_visual):
        """Return ``(x_rppg, x_visual, n_truncated)``."""
        trunc = sum(len(v) > self.rppg_len for v in flats_rppg)
        trunc += sum(len(v) > self.visual_len for v in flats_visual)
        xr = self._pad(flats_rppg, self.rppg_len)
        xv = self._pad(flats_visual, self.visual_len)
        if self.rppg_mean is not None:
            xr = (xr - self.rppg_mean) / self.rppg_std
            xv = (xv - self.visual_mean) / self.visual_std
        return xr, xv, int(trunc)

    def save(self, path) -> None:
        arrays = {"lengths": np.array([self.rppg_len, self.visual_len], dtype=np.int64)}
        if self.rppg_mean is not None:
            arrays.update(
                rppg_mean=self.rppg_mean,
                rppg_std=self.rppg_std,
                visual_mean=self.visual_mean,
                visual_std=self.visual_std,
            )
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "Preprocess":
        with np.load(path) as z:
            pre = cls(int(z["lengths"][0]), int(z["lengths"][1]))
            if "rppg_mean" in z:
                pre.rppg_mean, pre.rppg_std = z["rppg_mean"], z["rppg_std"]
                pre.visual_mean, pre.visual_std = z["visual_mean"], z["visual_std"]
        return pre


def _moments(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


@dataclass
class SplitData:
    ids: list
    labels: np.ndarray
    x_rppg: np.ndarray
    x_visual: np.ndarray
    truncated: int = 0

    @property
    def x_early(self) -> np.ndarray:
        return np.hstack([self.x_rppg, self.x_visual])

    def inputs(self, name: str) -> np.ndarray:
        return {"rppg": self.x_rppg, "visual": self.x_visual, "early": self.x_early}[name]


def build_split(ids, cached, labels_by_id, pre: Preprocess) -> SplitData:
    xr, xv, trunc = pre.transform([cached[i][0] for i in ids], [cached[i][1] for i in ids])
    if trunc:
        log.warning("%d feature vector(s) truncated to the training maximum length", trunc)
    return SplitData(list(ids), np.array([labels_by_id[i] for i in ids], dtype=np.int64), xr, xv, trunc)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def state_path(out) -> Path:
    return Path(out) / "state.json"


def load_state(out) -> dict:
    p = state_path(out)
    if not p.is_file():
        raise PipelineError(f"no trained run in {out}; run train first")
    return json.loads(p.read_text(encoding="utf-8"))


def save_state(out, state: dict) -> None:
    state_path(out).write_text(json.dumps(state, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _datasets(state: dict, out: Path):
    manifest = dataio.load_manifest(state["manifest_path"])
    cached = load_cached(out, manifest)
    labels = {e.id: e.label for e in manifest}
    pre = Preprocess.load(out / "models" / "preprocess.npz")
    return {
        name: build_split(state["split"][name], cached, labels, pre) for name in ("train", "val", "test")
    }


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    manifest = dataio.load_manifest(cfg.manifest)
    cached = load_cached(out, manifest)
    labels = {e.id: e.label for e in manifest}
    train_ids, val_ids, test_ids = split_ids([e.id for e in manifest], cfg.split, cfg.seed)

    pre = Preprocess.fit(
        [cached[i][0] for i in train_ids], [cached[i][1] for i in train_ids], cfg.standardize
    )
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    pre.save(out / "models" / "preprocess.npz")
    tr = build_split(train_ids, cached, labels, pre)
    va = build_split(val_ids, cached, labels, pre)

    trained = {}
    for k, name in enumerate(MODEL_NAMES):
        if name not in cfg.models_needed():
            continue
        x = tr.inputs(name)
        sizes = [x.shape[1], *DEFAULT_HIDDEN, dataio.NUM_CLASSES]
        model = init_network(sizes, seed=derive_seed(cfg.seed, k, 0))
        tcfg = TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, derive_seed(cfg.seed, k, 1), cfg.optimizer)
        with open(out / "logs" / f"{name}.log", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,loss,accuracy\n")

            def on_epoch(epoch, loss, acc, fh=fh):
                fh.write(f"{epoch + 1},{loss:.6f},{acc:.4f}\n")

            log.info("training %s model %s on %d clips", name, sizes, len(train_ids))
            model, _ = train(model, x, tr.labels, tcfg, on_epoch=on_epoch)
        dataio.persist_model(model, out / "models" / f"{name}.fem")
        trained[name] = model

    weights = None
    weights_source = None
    if "late" in cfg.fusion:
        if cfg.tune_step is not None:
            fw = tune_weights(
                forward(trained["rppg"], va.x_rppg),
                forward(trained["visual"], va.x_visual),
                va.labels,
                cfg.tune_step,
            )
            weights_source = "tuned"
        elif cfg.weights is not None:
            fw = FusionWeights(*cfg.weights)
            weights_source = "fixed"
        else:
            fw = FusionWeights()
            weights_source = "default"
        weights = [fw.w1, fw.w2]

    state = {
        "config": _config_echo(cfg),
        "manifest_path": str(Path(cfg.manifest).resolve()),
        "split": {"train": train_ids, "val": val_ids, "test": test_ids},
        "data": {
            "rppg_length": pre.rppg_len,
            "visual_length": pre.visual_len,
        },
        "models": list(trained),
        "fusion": list(cfg.fusion),
        "weights": weights,
        "weights_source": weights_source,
    }
    save_state(out, state)
    write_report(out, state)
    return state


def _config_echo(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("out")
    d.pop("jobs")
    d["manifest"] = Path(cfg.manifest).name
    d["manifest_sha256"] = manifest_digest(cfg.manifest)
    d["cascade"] = None if cfg.cascade is None else Path(cfg.cascade).name
    d["split"] = list(cfg.split)
    d["fusion"] = list(cfg.fusion)
    d["weights"] = None if cfg.weights is None else list(cfg.weights)
    return d


def _load_models(out: Path, names) -> dict:
    return {n: dataio.restore_model(out / "models" / f"{n}.fem") for n in names}


def predictions_for(mode: str, models: dict, data: SplitData, weights) -> np.ndarray:
    if mode == "late":
        fw = FusionWeights(*weights)
        probs = combine_late(forward(models["rppg"], data.x_rppg), forward(models["visual"], data.x_visual), fw)
        return np.argmax(probs, axis=1)
    return predict(models[mode], data.inputs(mode))


def run_evaluate(out) -> dict:
    out = Path(out)
    state = load_state(out)
    data = _datasets(state, out)
    models = _load_models(out, state["models"])
    test = data["test"]
    results = {}
    order = [m for m in FUSION_MODES if m in state["models"] or (m == "late" and m in state["fusion"])]
    for mode in order:
        pred = predictions_for(mode, models, test, state["weights"])
        m = score(pred, test.labels, dataio.NUM_CLASSES)
        results[mode] = list(m.as_row())
        log.info("%s: accuracy %.4f", mode, m.accuracy)
    state["metrics"] = results
    state["data"]["test_truncated"] = test.truncated
    save_state(out, state)
    write_report(out, state)
    return state


def run_explain(out, repeats: Optional[int] = None) -> dict:
    out = Path(out)
    state = load_state(out)
    if "early" not in state["models"]:
        raise PipelineError("explain needs an early-fusion model; train with --fusion including early")
    repeats = repeats if repeats is not None else state["config"]["pfi_repeats"]
    state["config"]["pfi_repeats"] = repeats
    data = _datasets(state, out)
    model = _load_models(out, ["early"])["early"]
    test = data["test"]
    n_r = test.x_rppg.shape[1]
    spans = {"rppg": (0, n_r), "visual": (n_r, n_r + test.x_visual.shape[1])}
    report = explain(
        accuracy_scorer(model),
        test.x_early,
        test.labels,
        spans,
        repeats=repeats,
        seed=derive_seed(state["config"]["seed"], 99),
    )
    state["pfi"] = {
        "repeats": repeats,
        "baseline": report.baseline_score,
        "groups": {k: list(v.per_repeat) for k, v in report.per_group.items()},
        "contributions": [report.contributions.rppg, report.contributions.visual],
        "clamped": report.contributions.clamped,
        "degenerate": report.contributions.degenerate,
    }
    save_state(out, state)
    write_report(out, state)
    return state


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ";".join(_fmt(x) for x in v)
    return str(v)


def render_report(state: dict) -> str:
    lines = []
    for key in sorted(state["config"]):
        lines.append(f"config,{key},{_fmt(state['config'][key])}")
    split = state["split"]
    for name in ("train", "val", "test"):
        lines.append(f"data,{name}_clips,{len(split[name])}")
    lines.append(f"data,rppg_length,{state['data']['rppg_length']}")
    lines.append(f"data,visual_length,{state['data']['visual_length']}")
    if "test_truncated" in state["data"]:
        lines.append(f"data,test_truncated,{state['data']['test_truncated']}")
    lines.append("models," + ";".join(state["models"]))
    if state.get("weights") is not None:
        w1, w2 = state["weights"]
        lines.append(f"fusion_weights,{w1:.2f},{w2:.2f},{state['weights_source']}")
    metrics = state.get("metrics", {})
    for mode in (m for m in FUSION_MODES if m in metrics):
        row = metrics[mode]
        lines.append("metrics," + mode + "," + ",".join(f"{v:.4f}" for v in row))
    pfi = state.get("pfi")
    if pfi:
        lines.append(f"pfi_baseline,early,{pfi['baseline']:.6f}")
        for group, drops in pfi["groups"].items():
            mean = float(np.mean(drops))
            lines.append(f"pfi,{group},{mean:.6f}," + ",".join(f"{d:.6f}" for d in drops))
        r, v = pfi["contributions"]
        lines.append(f"contribution,rppg,{r:.2f}")
        lines.append(f"contribution,visual,{v:.2f}")
        if pfi["clamped"] or pfi["degenerate"]:
            lines.append(f"contribution_flags,clamped={_fmt(pfi['clamped'])},degenerate={_fmt(pfi['degenerate'])}")
    return "\n".join(lines) + "\n"


def write_report(out, state: dict) -> Path:
    path = Path(out) / "report.txt"
    path.write_text(render_report(state), encoding="utf-8", newline="\n")
    return path

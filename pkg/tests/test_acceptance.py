"""Acceptance criteria, each checked at its stated tolerance and time budget.

Every test records one pass/fail line that is printed in the terminal summary.
The full-pipeline criteria (4, 5, 9) share one seeded run on the default
1000-clip synthetic dataset and are marked ``slow``.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from emofuse import cli, dataio, facedetect, pipeline, signals
from emofuse.classifier import forward, init_network, loss_and_gradients
from emofuse.evaluate import ConfusionMatrix, compute_metrics
from emofuse.fusion import FusionWeights, combine_late, predict_late
from emofuse.interpret import accuracy_scorer, pfi

SEED = 0


def record(number, ok, detail, seconds):
    line = (number, bool(ok), detail, seconds)
    ACCEPTANCE_RESULTS.append(line)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail} ({seconds:.2f}s)")
    assert ok, detail


def brute_means(frame, roi):
    x, y, w, h = roi
    acc = [0.0, 0.0, 0.0]
    for yy in range(y, y + h):
        for xx in range(x, x + w):
            for c in range(3):
                acc[c] += float(frame[yy, xx, c])
    return [a / (w * h) for a in acc]


def test_criterion_1_roi_mean_oracle():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        frame = rng.integers(0, 256, (32, 32, 3)).astype(np.uint8)
        x, y = (int(v) for v in rng.integers(0, 32, 2))
        roi = (x, y, int(rng.integers(1, 33 - x)), int(rng.integers(1, 33 - y)))
        got = signals.mean_roi_intensity(frame, roi)
        worst = max(worst, float(np.max(np.abs(np.subtract(got, brute_means(frame, roi))))))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-9 and dt < 1.0, f"max |mean - oracle| = {worst:.3g} over 50 frames", dt)


def test_criterion_2_integral_image_exact():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 40, 2))
        img = rng.integers(0, 256, (h, w)).astype(np.uint8)
        ii = facedetect.integral_image(img)
        x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
        rw, rh = int(rng.integers(1, w - x + 1)), int(rng.integers(1, h - y + 1))
        brute = sum(int(img[yy, xx]) for yy in range(y, y + rh) for xx in range(x, x + rw))
        mismatches += ii.rect_sum(x, y, rw, rh) != brute
    dt = time.perf_counter() - t0
    record(2, mismatches == 0 and dt < 1.0, f"{mismatches} of 100 rectangle sums differ from brute force", dt)


def _numeric_grads(model, x, y, step):
    def loss():
        p = forward(model, x)
        return -np.mean(np.log(p[np.arange(len(y)), y]))

    out = []
    for p in model.weights + model.biases:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = loss()
            p[idx] = old - step
            down = loss()
            p[idx] = old
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out


def test_criterion_3_gradient_check():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    model = init_network([8, 16, 10], seed=SEED)
    for b in model.biases:
        b[...] = rng.normal(0, 0.1, b.shape)
    x = rng.normal(size=(20, 8))
    y = rng.integers(0, 10, 20)
    _, _, gw, gb = loss_and_gradients(model, x, y)
    worst = 0.0
    for a, n in zip(gw + gb, _numeric_grads(model, x, y, 1e-4)):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-12)
        rel = np.where((a == 0) & (n == 0), 0.0, np.abs(a - n) / denom)
        worst = max(worst, float(rel.max()))
    dt = time.perf_counter() - t0
    record(3, worst < 1e-4 and dt < 10.0, f"max relative gradient error {worst:.3g} over 330 parameters", dt)


def test_criterion_6_late_fusion_identities():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    mr, mv = init_network([12, 16, 10], seed=1), init_network([20, 16, 10], seed=2)
    xr, xv = rng.normal(size=(25, 12)), rng.normal(size=(25, 20))
    pr = forward(mr, xr)
    exact = predict_late(mr, mv, FusionWeights(1.0, 0.0), xr, xv).tobytes() == pr.tobytes()
    passthrough = all(
        np.allclose(combine_late(pr, pr, FusionWeights(w, 1 - w)), pr, rtol=0, atol=1e-15)
        for w in np.linspace(0, 1, 21)
    )
    pv = forward(mv, xv)
    invariant = True
    for w in np.linspace(0, 1, 21):
        base = np.argmax(w * pr + (1 - w) * pv, axis=1)
        for c in (0.01, 0.5, 3.0, 1e3):
            invariant &= np.array_equal(np.argmax(c * w * pr + c * (1 - w) * pv, axis=1), base)
    dt = time.perf_counter() - t0
    ok = exact and passthrough and invariant and dt < 1.0
    record(6, ok, f"bit-exact (1,0)={exact}, pass-through={passthrough}, argmax scale invariance={invariant}", dt)


def test_criterion_7_pfi_brute_force_expectation():
    x = np.array([[0.0], [1.0], [2.0]])
    y = np.array([0, 1, 2])

    def scorer(feats, labels):
        return float(np.mean(feats[:, 0] == labels))

    t0 = time.perf_counter()
    base = scorer(x, y)
    exact = float(np.mean([base - scorer(x[list(p)], y) for p in itertools.permutations(range(3))]))
    sampled = pfi(scorer, x, y, (0, 1), repeats=60, seed=SEED).mean_drop
    dt = time.perf_counter() - t0
    err = abs(sampled - exact)
    record(7, err <= 0.05 and dt < 10.0, f"sampled {sampled:.4f} vs exact {exact:.4f}, |diff| {err:.4f}", dt)


def test_criterion_8_metrics_oracle():
    t0 = time.perf_counter()
    m = compute_metrics(ConfusionMatrix(np.array([[1, 1], [0, 2]])))
    # precision: class 0 is 1/1, class 1 is 2/3; recall: 1/2 and 2/2
    expected = (0.75, (1 + 2 / 3) / 2, (0.5 + 1) / 2, (2 / 3 + 0.8) / 2)
    err = max(abs(a - b) for a, b in zip(m.as_row(), expected))
    dt = time.perf_counter() - t0
    row = ", ".join(f"{v:.4f}" for v in m.as_row())
    record(8, err <= 1e-4 and dt < 1.0, f"acc/P/R/F1 = {row}, max error {err:.2g}", dt)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def full_run(root, seed=SEED):
    """synth -> extract -> train -> evaluate -> explain with default settings."""
    timings = {}
    data, out = root / "data", root / "run"
    common = ["--manifest", str(data / "manifest.tsv"), "--out", str(out), "--seed", str(seed)]
    steps = [
        ("synth", ["synth", "--out", str(data), "--seed", str(seed)]),
        ("extract", ["extract", *common, "--jobs", "4"]),
        ("train", ["train", *common, "--tune-step", "0.05"]),
        ("evaluate", ["evaluate", "--out", str(out)]),
        ("explain", ["explain", "--out", str(out)]),
    ]
    for name, argv in steps:
        t0 = time.perf_counter()
        code = cli.main(argv)
        timings[name] = time.perf_counter() - t0
        assert code == 0, f"{name} exited {code}"
    return out, timings


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("accept_a"))


@pytest.mark.slow
def test_criterion_4_fusion_benefit(pipeline_run):
    out, timings = pipeline_run
    metrics = pipeline.load_state(out)["metrics"]
    acc = {k: v[0] for k, v in metrics.items()}
    best_single = max(acc["rppg"], acc["visual"])
    margin = acc["early"] - best_single
    dt = sum(timings[k] for k in ("synth", "extract", "train", "evaluate"))
    ok = margin >= 0.20 and all(a > 0.10 for a in acc.values()) and dt < 300
    detail = ", ".join(f"{k} {v:.4f}" for k, v in acc.items()) + f"; early margin {100 * margin:.1f} pp"
    record(4, ok, detail, dt)


@pytest.mark.slow
def test_criterion_5_pfi_null_and_sign(pipeline_run):
    out, timings = pipeline_run
    state = pipeline.load_state(out)
    t0 = time.perf_counter()
    data = pipeline._datasets(state, out)["test"]
    model = dataio.restore_model(out / "models" / "early.fem")
    n_r = data.x_rppg.shape[1]
    model.weights[0][:, :n_r] = 0.0
    null = pfi(accuracy_scorer(model), data.x_early, data.labels, (0, n_r), repeats=5, seed=SEED)
    null_ok = all(d == 0.0 for d in null.per_repeat)
    drops = {g: float(np.mean(v)) for g, v in state["pfi"]["groups"].items()}
    contrib = state["pfi"]["contributions"]
    lines = (out / "report.txt").read_text().splitlines()
    reported = [float(l.split(",")[2]) for l in lines if l.startswith("contribution,")]
    dt = time.perf_counter() - t0 + timings["explain"]
    ok = (
        null_ok
        and drops["rppg"] > 0
        and drops["visual"] > 0
        and abs(sum(contrib) - 100) <= 0.01
        and abs(sum(reported) - 100) <= 0.01
        and dt < 60
    )
    detail = (
        f"null drops {list(null.per_repeat)}; drops rppg {drops['rppg']:.4f} visual {drops['visual']:.4f}; "
        f"contributions {reported[0]:.2f}/{reported[1]:.2f}"
    )
    record(5, ok, detail, dt)


@pytest.mark.slow
def test_criterion_9_end_to_end_determinism(pipeline_run, tmp_path_factory):
    out_a, timings_a = pipeline_run
    out_b, timings_b = full_run(tmp_path_factory.mktemp("accept_b"))
    a, b = (out_a / "report.txt").read_bytes(), (out_b / "report.txt").read_bytes()
    dt = sum(timings_a.values()) + sum(timings_b.values())
    record(9, a == b and dt < 600, f"reports identical: {a == b} ({len(a)} bytes)", dt)

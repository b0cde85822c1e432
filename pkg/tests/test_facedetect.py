import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from emofuse import facedetect as fd
from emofuse import synth
from emofuse.facedetect import HaarCascade, HaarRect, RoiBox, Stage, WeakClassifier


def brute_rect_sum(plane, x, y, w, h):
    total = 0
    for yy in range(y, y + h):
        for xx in range(x, x + w):
            total += int(plane[yy, xx])
    return total


def single_stage(threshold, rects=((0, 0, 24, 24, 1.0),), weak_threshold=0.0, left=-1.0, right=1.0):
    weak = WeakClassifier(tuple(HaarRect(*r) for r in rects), weak_threshold, left, right)
    return HaarCascade(stages=(Stage(threshold, (weak,)),))


ACCEPT_ALL = single_stage(-1e9)
REJECT_ALL = single_stage(1e9)


def gray(plane):
    return np.repeat(np.asarray(plane, dtype=np.uint8)[..., None], 3, axis=2)


class TestIntegralImage:
    def test_single_pixel(self):
        ii = fd.integral_image(np.array([[5]]))
        assert ii.table.shape == (2, 2)
        assert ii.table[1, 1] == 5
        assert ii.table[0].tolist() == [0, 0] and ii.table[:, 0].tolist() == [0, 0]

    def test_ones(self):
        assert fd.integral_image(np.ones((3, 3), dtype=np.uint8)).table[3, 3] == 9

    def test_random_rectangles_exact(self):
        rng = np.random.default_rng(0)
        plane = rng.integers(0, 256, (8, 8))
        ii = fd.integral_image(plane)
        for _ in range(100):
            x, y = rng.integers(0, 8, 2)
            w = rng.integers(1, 9 - x)
            h = rng.integers(1, 9 - y)
            assert ii.rect_sum(x, y, w, h) == brute_rect_sum(plane, x, y, w, h)
            sq = brute_rect_sum(plane.astype(np.int64) ** 2, x, y, w, h)
            assert ii.rect_sq_sum(x, y, w, h) == sq

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))),
        st.data(),
    )
    def test_rectangle_identity(self, plane, data):
        h, w = plane.shape
        x = data.draw(st.integers(0, w - 1))
        y = data.draw(st.integers(0, h - 1))
        rw = data.draw(st.integers(1, w - x))
        rh = data.draw(st.integers(1, h - y))
        assert fd.integral_image(plane).rect_sum(x, y, rw, rh) == brute_rect_sum(plane, x, y, rw, rh)

    def test_channels(self):
        rng = np.random.default_rng(1)
        frame = rng.integers(0, 256, (5, 6, 3)).astype(np.uint8)
        for name, c in (("R", 0), ("G", 1), ("B", 2)):
            assert fd.integral_image(frame, name).table[5, 6] == int(frame[..., c].sum())
        lum = np.floor(0.299 * frame[..., 0] + 0.587 * frame[..., 1] + 0.114 * frame[..., 2] + 0.5)
        assert fd.integral_image(frame).table[5, 6] == int(lum.sum())
        with pytest.raises(ValueError):
            fd.integral_image(frame, "alpha")


class TestEvaluateWindow:
    def test_accept_all(self):
        img = gray(np.random.default_rng(0).integers(0, 256, (30, 30)))
        ii = fd.integral_image(img)
        assert fd.evaluate_window(ACCEPT_ALL, ii, (3, 4), 1.0)
        assert fd.evaluate_window(ACCEPT_ALL, ii, (0, 0), 1.25)

    @pytest.mark.parametrize("weak_threshold,expected", [(0.5, "left"), (-0.5, "right")])
    def test_uniform_image(self, weak_threshold, expected):
        # two-rect edge feature: value is exactly 0 on a flat image
        rects = ((0, 0, 12, 24, 1.0), (12, 0, 12, 24, -1.0))
        ii = fd.integral_image(gray(np.full((24, 24), 90)))
        left_only = single_stage(0.0, rects, weak_threshold, left=1.0, right=-1.0)
        assert fd.evaluate_window(left_only, ii, (0, 0), 1.0) == (expected == "left")
        right_only = single_stage(0.0, rects, weak_threshold, left=-1.0, right=1.0)
        assert fd.evaluate_window(right_only, ii, (0, 0), 1.0) == (expected == "right")

    def test_hand_computed_edge_feature(self):
        plane = np.full((24, 24), 50)
        plane[:, :12] = 200
        ii = fd.integral_image(gray(plane))
        # left sum 12*24*200 = 57600, right sum 12*24*50 = 14400, difference 43200
        # mean 125, mean of squares (200^2 + 50^2) / 2 = 21250, variance 5625, std 75
        # normalised feature value 43200 / 75 = 576
        rects = ((0, 0, 12, 24, 1.0), (12, 0, 12, 24, -1.0))
        assert fd.evaluate_window(single_stage(0.0, rects, 575.0), ii, (0, 0), 1.0)
        assert not fd.evaluate_window(single_stage(0.0, rects, 577.0), ii, (0, 0), 1.0)

    def test_hand_computed_edge_feature_scaled(self):
        plane = np.full((48, 48), 50)
        plane[:, :24] = 200
        ii = fd.integral_image(gray(plane))
        # at scale 2 the sums grow 4x (std unchanged): value 2304 against threshold * 4
        rects = ((0, 0, 12, 24, 1.0), (12, 0, 12, 24, -1.0))
        assert fd.evaluate_window(single_stage(0.0, rects, 575.0), ii, (0, 0), 2.0)
        assert not fd.evaluate_window(single_stage(0.0, rects, 577.0), ii, (0, 0), 2.0)

    def test_out_of_bounds(self):
        ii = fd.integral_image(gray(np.zeros((24, 24))))
        with pytest.raises(ValueError):
            fd.evaluate_window(ACCEPT_ALL, ii, (1, 0), 1.0)
        with pytest.raises(ValueError):
            fd.evaluate_window(ACCEPT_ALL, ii, (0, 0), 0.5)

    def test_monotone_cascade(self):
        rng = np.random.default_rng(4)
        cascade = fd.demo_cascade()
        sentinel = cascade.with_stage(ACCEPT_ALL.stages[0])
        blocked = cascade.with_stage(REJECT_ALL.stages[0])
        for _ in range(5):
            frame, _, _ = synth.make_clip(int(rng.integers(10)), rng, 1)
            ii = fd.integral_image(frame[0])
            for y in range(0, 17, 2):
                for x in range(0, 17, 2):
                    base = fd.evaluate_window(cascade, ii, (x, y), 1.0)
                    assert fd.evaluate_window(sentinel, ii, (x, y), 1.0) == base
                    assert not fd.evaluate_window(blocked, ii, (x, y), 1.0)

    @pytest.mark.parametrize("scale", [1.0, 1.25, 1.5625])
    def test_vectorised_grid_matches_scalar(self, scale):
        rng = np.random.default_rng(int(scale * 100))
        cascade = fd.demo_cascade()
        for trial in range(4):
            if trial % 2:
                frame = synth.make_clip(trial, rng, 1)[0][0]
            else:
                frame = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
            ii = fd.integral_image(frame)
            grid = fd._accept_grid(cascade, ii, scale, 1)
            w, h = fd.window_size(cascade, scale)
            for y in range(40 - h + 1):
                for x in range(40 - w + 1):
                    assert grid[y, x] == fd.evaluate_window(cascade, ii, (x, y), scale)


def enumerate_best(frame, cascade, params):
    """Independent oracle: score every candidate window, then apply the tie rule."""
    ii = fd.integral_image(frame)
    height, width = frame.shape[:2]
    candidates = []
    i = 0
    while True:
        s = params.scale_factor**i
        w = math.floor(24 * s + 0.5)
        h = math.floor(24 * s + 0.5)
        if w > width or h > height:
            break
        stride = max(1, math.floor(params.stride_fraction * w + 0.5))
        for y in range(0, height - h + 1, stride):
            for x in range(0, width - w + 1, stride):
                if fd.evaluate_window(cascade, ii, (x, y), s):
                    candidates.append((-w * h, y, x, w, h))
        i += 1
    if not candidates:
        return None
    _, y, x, w, h = min(candidates)
    return RoiBox(x, y, w, h)


class TestDetectFace:
    def test_accept_all_returns_full_frame(self):
        frame = gray(np.random.default_rng(0).integers(0, 256, (48, 48)))
        params = fd.DetectParams(scale_factor=2.0)
        assert fd.detect_face(frame, ACCEPT_ALL, params) == RoiBox(0, 0, 48, 48)
        assert enumerate_best(frame, ACCEPT_ALL, params) == RoiBox(0, 0, 48, 48)

    def test_accept_all_tie_rule(self):
        # 50 x 45 frame: the largest fitting window is 38 px at several offsets
        frame = gray(np.zeros((45, 50)))
        params = fd.DetectParams(scale_factor=1.25)
        got = fd.detect_face(frame, ACCEPT_ALL, params)
        assert got == enumerate_best(frame, ACCEPT_ALL, params)
        assert got == RoiBox(0, 0, 38, 38)

    def test_reject_all(self):
        with pytest.raises(fd.NoFaceFound):
            fd.detect_face(gray(np.zeros((48, 48))), REJECT_ALL)

    def test_frame_too_small(self):
        with pytest.raises(ValueError):
            fd.detect_face(gray(np.zeros((20, 30))), ACCEPT_ALL)

    def test_synthetic_faces_match_oracle_and_overlap(self):
        rng = np.random.default_rng(11)
        cascade = fd.demo_cascade()
        params = fd.DetectParams()
        for k in range(12):
            frames, _, rois = synth.make_clip(k % 10, rng, 1)
            got = fd.detect_face(frames[0], cascade, params)
            assert got == enumerate_best(frames[0], cascade, params)
            assert got.iou(rois[0]) >= 0.5
            assert fd.detect_face(frames[0], cascade, params) == got

    def test_bright_square_at_known_offset(self):
        rng = np.random.default_rng(2)
        box = RoiBox(6, 3, 30, 30)
        frame = synth.render_face(40, box, synth.SKIN, rng)
        got = fd.detect_face(frame, fd.demo_cascade())
        assert got == enumerate_best(frame, fd.demo_cascade(), fd.DetectParams())
        assert got.iou(box) >= 0.5

    def test_no_false_positives_on_background(self):
        rng = np.random.default_rng(5)
        cascade = fd.demo_cascade()
        for _ in range(10):
            noise = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
            with pytest.raises(fd.NoFaceFound):
                fd.detect_face(noise, cascade)


class TestTrackFaces:
    def _clip(self):
        rng = np.random.default_rng(3)
        frames, _, rois = synth.make_clip(0, rng, 4)
        return frames, rois[0]

    def test_gap_reuses_last_box(self):
        frames, _ = self._clip()
        frames[2] = 0
        boxes = fd.track_faces(frames, fd.demo_cascade())
        assert boxes[2] == boxes[1]

    def test_leading_gap_takes_first_detection(self):
        frames, _ = self._clip()
        frames[0] = 0
        boxes = fd.track_faces(frames, fd.demo_cascade())
        assert boxes[0] == boxes[1]

    def test_no_face_anywhere(self):
        frames, _ = self._clip()
        frames[:] = 0
        with pytest.raises(fd.NoFaceFound):
            fd.track_faces(frames, fd.demo_cascade())


class TestCascadeFile:
    def test_roundtrip(self, tmp_path):
        c = fd.demo_cascade()
        p = tmp_path / "c.json"
        fd.save_cascade(c, p)
        assert fd.load_cascade(p) == c

    def test_rect_outside_window(self):
        with pytest.raises(ValueError, match="outside"):
            single_stage(0.0, rects=((20, 0, 8, 8, 1.0),))

    def test_empty_stage(self):
        with pytest.raises(ValueError):
            HaarCascade(stages=(Stage(0.0, ()),))

    def test_malformed_dict(self):
        with pytest.raises(ValueError, match="malformed"):
            HaarCascade.from_dict({"stages": [{"weak": []}]})

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgedet.build import scaled_anchors, STRIDES
from edgedet.postprocess import Box, Detection, decode_predictions, iou, nms


def make_heads(num_classes, size, fill=0.0):
    c = 3 * (5 + num_classes)
    return [np.full((1, c, size // s, size // s), fill, np.float32)
            for s in STRIDES]


class TestIoU:
    def test_identical(self):
        b = Box(1, 2, 5, 7)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_known_overlap(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1 / 7)

    @given(st.tuples(*[st.floats(0, 100) for _ in range(8)]))
    @settings(max_examples=200)
    def test_symmetric_and_bounded(self, vals):
        ax1, ay1, aw, ah, bx1, by1, bw, bh = vals
        a = Box(ax1, ay1, ax1 + aw, ay1 + ah)
        b = Box(bx1, by1, bx1 + bw, by1 + bh)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0 + 1e-12


class TestDecode:
    def test_zero_logits_geometry(self):
        size, nc = 192, 2
        heads = make_heads(nc, size)
        anchors = scaled_anchors(size)
        dets = decode_predictions(heads, anchors, STRIDES, 0.2, nc, size)
        # sigma(0)=0.5 everywhere: conf = 0.25, center (j+0.5)*s, wh = anchor
        assert dets, "expected detections at threshold 0.2"
        for d in dets:
            assert d.confidence == pytest.approx(0.25)
        d0 = next(d for d in dets if d.box.x1 > 20 and d.box.y1 > 20)
        w = d0.box.x2 - d0.box.x1
        h = d0.box.y2 - d0.box.y1
        aw = {round(a[0], 4) for lv in anchors for a in lv}
        assert any(abs(w - a) < 1e-3 for a in aw)
        cx = (d0.box.x1 + d0.box.x2) / 2
        s = STRIDES[0]
        assert (cx / s - 0.5) == pytest.approx(round(cx / s - 0.5), abs=1e-4)

    def test_conf_thresh_one_empty(self):
        heads = make_heads(2, 192, fill=3.0)
        dets = decode_predictions(heads, scaled_anchors(192), STRIDES, 1.0, 2, 192)
        assert dets == []

    def test_wh_upper_bound(self):
        size, nc = 192, 1
        heads = make_heads(nc, size, fill=20.0)  # t -> +inf limit
        anchors = scaled_anchors(size)
        dets = decode_predictions(heads, anchors, STRIDES, 0.0, nc, size)
        max_aw = max(a[0] for lv in anchors for a in lv)
        for d in dets:
            assert d.box.x2 - d.box.x1 <= 4 * max_aw + 1e-6

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(0)
        heads = [a + rng.normal(0, 2, a.shape).astype(np.float32)
                 for a in make_heads(2, 192)]
        anchors = scaled_anchors(192)
        counts = [len(decode_predictions(heads, anchors, STRIDES, t, 2, 192))
                  for t in (0.1, 0.3, 0.5, 0.9)]
        assert counts == sorted(counts, reverse=True)

    def test_channel_mismatch(self):
        heads = make_heads(3, 192)
        with pytest.raises(ValueError, match="channels"):
            decode_predictions(heads, scaled_anchors(192), STRIDES, 0.5, 2, 192)


def brute_force_nms(dets, thresh):
    """Independent reference: scan confidence-descending, keep iff compatible
    with every kept same-class detection, using explicit loops."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].confidence, dets[i].class_id,
                                  dets[i].box.x1, dets[i].box.y1))
    kept_idx = []
    for i in order:
        ok = True
        for j in kept_idx:
            if dets[j].class_id == dets[i].class_id \
                    and iou(dets[i].box, dets[j].box) >= thresh:
                ok = False
                break
        if ok:
            kept_idx.append(i)
    return [dets[i] for i in kept_idx]


def random_dets(rng, n):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 80, 2)
        w, h = rng.uniform(1, 40, 2)
        out.append(Detection(Box(x1, y1, x1 + w, y1 + h),
                             int(rng.integers(0, 3)),
                             float(rng.uniform(0.01, 0.99))))
    return out


class TestNMS:
    def test_single_detection(self):
        d = Detection(Box(0, 0, 10, 10), 0, 0.9)
        assert nms([d], 0.45) == [d]

    def test_identical_boxes_same_class(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 10), 0, 0.8)
        assert nms([a, b], 0.45) == [a]

    def test_low_overlap_both_kept(self):
        a = Detection(Box(0, 0, 2, 2), 0, 0.9)
        b = Detection(Box(1, 1, 3, 3), 0, 0.8)
        assert nms([a, b], 0.45) == [a, b]

    def test_different_classes_not_suppressed(self):
        a = Detection(Box(0, 0, 10, 10), 0, 0.9)
        b = Detection(Box(0, 0, 10, 10), 1, 0.8)
        assert nms([a, b], 0.45) == [a, b]

    def test_subset_and_pairwise_iou(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            dets = random_dets(rng, 8)
            kept = nms(dets, 0.45)
            assert all(k in dets for k in kept)
            for a, b in itertools.combinations(kept, 2):
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < 0.45

    def test_equals_brute_force_500_trials(self):
        rng = np.random.default_rng(2)
        for trial in range(500):
            n = int(rng.integers(0, 9))
            thresh = float(rng.uniform(0.2, 0.8))
            dets = random_dets(rng, n)
            assert nms(dets, thresh) == brute_force_nms(dets, thresh)

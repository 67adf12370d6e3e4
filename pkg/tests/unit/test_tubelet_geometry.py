"""Tests for anchors, overlap, regression encoding, NMS and label assignment"""

import numpy as np
import pytest

from errors import DimensionError, GeometryError
from tubelet_geometry import (
    IGNORE, MAX_LOG_SCALE, NEGATIVE, POSITIVE, AnchorGrid, Box, Tubelet, anchor_boxes,
    assign_labels, box_iou, clip_boxes, decode_boxes, decode_deltas, encode_targets,
    generate_anchors, nms_indices, nms_tubelets, pairwise_tubelet_iou, stack_boxes, tubelet_iou,
)


def cuboid(box, T=2, **kwargs):
    return Tubelet(np.repeat(np.asarray(box, dtype=float)[None], T, axis=0), **kwargs)


def brute_nms(tubelets, threshold, keep_top):
    order = sorted(range(len(tubelets)), key=lambda i: (-tubelets[i].actionness, i))
    keep = []
    for i in order:
        if len(keep) >= keep_top:
            break
        if all(tubelet_iou(tubelets[i], tubelets[k]) <= threshold for k in keep):
            keep.append(i)
    return keep


class TestBoxes:
    def test_box_iou_known_value(self):
        assert box_iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(50 / 150)

    def test_disjoint_boxes(self):
        assert box_iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_invalid_box(self):
        with pytest.raises(GeometryError):
            Box(5, 0, 5, 10)

    def test_tubelet_iou_averages_frames(self):
        a = Tubelet(np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float))
        b = Tubelet(np.array([[0, 0, 10, 10], [20, 20, 30, 30]], dtype=float))
        assert tubelet_iou(a, b) == pytest.approx(0.5)

    def test_tubelet_iou_symmetric_and_bounded(self, rng):
        corners = rng.uniform(0, 20, size=(6, 3, 2, 2))
        boxes = np.concatenate([corners.min(axis=2), corners.max(axis=2) + 1.0], axis=-1)
        iou = pairwise_tubelet_iou(boxes, boxes)
        np.testing.assert_allclose(iou, iou.T)
        np.testing.assert_allclose(np.diag(iou), np.ones(6))
        assert np.all((iou >= 0) & (iou <= 1))

    def test_tubelet_length_mismatch(self):
        with pytest.raises(DimensionError):
            tubelet_iou(cuboid([0, 0, 4, 4], T=2), cuboid([0, 0, 4, 4], T=3))

    def test_zero_area_union(self):
        zero = Tubelet(np.zeros((2, 4)))
        assert tubelet_iou(zero, zero) == 0.0

    def test_actionness_range(self):
        with pytest.raises(GeometryError):
            cuboid([0, 0, 4, 4], actionness=1.5)

    def test_stack_empty(self):
        assert stack_boxes([]).shape == (0, 1, 4)


class TestAnchors:
    def test_count_and_centres(self):
        grid = AnchorGrid(2, 3, 16, scales=(8.0, 16.0), aspect_ratios=(0.5, 1.0, 2.0), T=4)
        anchors = generate_anchors(grid)
        assert len(anchors) == grid.count == 2 * 3 * 6
        first = anchors[0].boxes
        assert first.shape == (4, 4)
        np.testing.assert_allclose(first[0], first[3])
        cx = (first[0, 0] + first[0, 2]) / 2
        cy = (first[0, 1] + first[0, 3]) / 2
        assert (cx, cy) == pytest.approx((8.0, 8.0))

    def test_aspect_ratio_shapes(self):
        grid = AnchorGrid(1, 1, 16, scales=(16.0,), aspect_ratios=(2.0,), T=1)
        x1, y1, x2, y2 = anchor_boxes(grid)[0]
        assert (x2 - x1) / (y2 - y1) == pytest.approx(2.0)
        assert (x2 - x1) * (y2 - y1) == pytest.approx(256.0)

    def test_bad_grid(self):
        with pytest.raises(GeometryError):
            AnchorGrid(0, 3, 16)


class TestRegression:
    def test_encode_decode_identity(self, rng):
        anchor = cuboid([10, 10, 26, 26], T=3)
        gt = Tubelet(np.array([[12, 8, 30, 20], [11, 9, 29, 22], [14, 10, 28, 30]], dtype=float))
        deltas = encode_targets(anchor, gt)
        assert deltas.shape == (12,)
        np.testing.assert_allclose(decode_boxes(anchor, deltas).boxes, gt.boxes)

    def test_zero_deltas_reproduce_anchor(self):
        anchor = cuboid([4, 4, 20, 12], T=2)
        np.testing.assert_allclose(decode_boxes(anchor, np.zeros(8)).boxes, anchor.boxes)

    def test_degenerate_anchor(self):
        anchor = Tubelet(np.array([[0, 0, 0, 5]], dtype=float))
        with pytest.raises(GeometryError):
            encode_targets(anchor, cuboid([0, 0, 4, 4], T=1))

    def test_width_delta_is_clamped(self):
        boxes = decode_deltas(np.array([[0.0, 0.0, 16.0, 16.0]]), np.array([0.0, 0.0, 100.0, 0.0]))
        assert boxes[0, 2] - boxes[0, 0] == pytest.approx(16.0 * np.exp(MAX_LOG_SCALE))

    def test_wrong_delta_count(self):
        with pytest.raises(DimensionError):
            decode_deltas(np.zeros((2, 4)), np.zeros(7))

    def test_clip_boxes_keeps_one_pixel(self):
        out = clip_boxes(np.array([[-5.0, -5.0, -1.0, 3.0], [30.0, 2.0, 40.0, 9.0]]), (32, 32))
        assert np.all(out >= 0) and np.all(out <= 32)
        np.testing.assert_allclose(out[:, 2] - out[:, 0], [1.0, 2.0])


class TestNms:
    def test_matches_brute_force(self, rng):
        tubelets = []
        for _ in range(25):
            x, y = rng.uniform(0, 20, size=2)
            w, h = rng.uniform(4, 12, size=2)
            tubelets.append(cuboid([x, y, x + w, y + h], T=2, actionness=float(rng.random())))
        for threshold in (0.3, 0.5, 0.7):
            keep = nms_indices(stack_boxes(tubelets), [t.actionness for t in tubelets], threshold, 10)
            assert keep == brute_nms(tubelets, threshold, 10)

    def test_survivors_do_not_overlap_beyond_threshold(self, rng):
        tubelets = [cuboid([i, 0, i + 10, 10], actionness=float(rng.random())) for i in range(10)]
        kept = nms_tubelets(tubelets, 0.5, 300)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert tubelet_iou(a, b) <= 0.5

    def test_ties_keep_lower_index(self):
        tubelets = [cuboid([0, 0, 10, 10], actionness=0.5), cuboid([0, 0, 10, 10], actionness=0.5)]
        assert nms_indices(stack_boxes(tubelets), [0.5, 0.5], 0.7) == [0]

    def test_keep_top(self):
        tubelets = [cuboid([20 * i, 0, 20 * i + 10, 10], actionness=0.1 * i) for i in range(5)]
        assert nms_indices(stack_boxes(tubelets), [t.actionness for t in tubelets], 0.7, 2) == [4, 3]

    def test_empty_input(self):
        assert nms_tubelets([], 0.7, 300) == []

    def test_threshold_range(self):
        with pytest.raises(GeometryError):
            nms_indices(np.zeros((1, 1, 4)), [1.0], 0.0)


class TestAssignLabels:
    def test_rules(self):
        anchors = [cuboid([0, 0, 10, 10]), cuboid([1, 0, 11, 10]), cuboid([30, 30, 40, 40]),
                   cuboid([50, 50, 60, 60])]
        gts = [cuboid([0, 0, 10, 10], label=1), cuboid([31, 31, 45, 45], label=0)]
        result = assign_labels(anchors, gts, positive_iou=0.5)
        # anchor 2 is positive only as the best anchor of the second ground truth
        assert list(result.labels) == [POSITIVE, POSITIVE, POSITIVE, NEGATIVE]
        assert list(result.matched_gt) == [0, 0, 1, -1]
        np.testing.assert_allclose(result.regression_targets[0], np.zeros(8), atol=1e-12)

    def test_every_gt_gets_an_anchor(self, rng):
        anchors = [cuboid([x, y, x + 8, y + 8]) for x in range(0, 40, 8) for y in range(0, 40, 8)]
        gts = [cuboid([3, 3, 6, 6], label=0), cuboid([21, 21, 24, 24], label=1)]
        result = assign_labels(anchors, gts, positive_iou=0.5)
        assert set(result.matched_gt[result.labels == POSITIVE]) == {0, 1}

    def test_ignore_band(self):
        anchors = [cuboid([0, 0, 10, 10]), cuboid([5, 0, 15, 10]), cuboid([40, 40, 50, 50])]
        gts = [cuboid([0, 0, 10, 10], label=0)]
        result = assign_labels(anchors, gts, positive_iou=0.5, negative_iou_ceiling=0.3)
        assert list(result.labels) == [POSITIVE, IGNORE, NEGATIVE]

    def test_no_ground_truth(self):
        result = assign_labels([cuboid([0, 0, 4, 4])], [])
        assert list(result.labels) == [NEGATIVE]
        assert result.regression_targets == {}


def random_tubelets(rng, n, T=2, size=24.0):
    corners = rng.integers(0, int(size), size=(n, T, 2, 2)).astype(float)
    boxes = np.concatenate([corners.min(axis=2), corners.max(axis=2) + rng.integers(1, 8, size=(n, T, 2))],
                           axis=-1)
    return boxes


def rule_assignment(iou, positive_iou, ceiling):
    """Label rules applied one anchor and one ground truth at a time"""
    num_anchors, num_gts = iou.shape
    labels = [NEGATIVE] * num_anchors
    matched = [-1] * num_anchors
    for a in range(num_anchors):
        row = list(iou[a])
        best = row.index(max(row))
        if ceiling is not None and row[best] >= ceiling:
            labels[a] = IGNORE
        if row[best] > positive_iou:
            labels[a], matched[a] = POSITIVE, best
    claimed = set()
    for g in range(num_gts):
        free = [a for a in range(num_anchors) if a not in claimed]
        a = max(free, key=lambda i: (iou[i, g], -i))
        claimed.add(a)
        labels[a], matched[a] = POSITIVE, g
    return labels, matched


class TestOracles:
    def test_nms_against_brute_force(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            boxes = random_tubelets(rng, n)
            # coarse scores so ties occur
            scores = rng.integers(0, 4, size=n) / 4.0
            tubelets = [Tubelet(b, float(s)) for b, s in zip(boxes, scores)]
            threshold = float(rng.choice([0.1, 0.3, 0.5, 0.7, 1.0]))
            keep_top = int(rng.integers(1, 7))
            assert nms_indices(boxes, scores, threshold, keep_top) == brute_nms(tubelets, threshold, keep_top)

    def test_assign_labels_against_rules(self, rng):
        for _ in range(1000):
            num_anchors = int(rng.integers(3, 11))
            num_gts = int(rng.integers(0, 4))
            anchors = random_tubelets(rng, num_anchors)
            gts = random_tubelets(rng, num_gts)
            ceiling = None if rng.random() < 0.5 else 0.2
            result = assign_labels(anchors, gts, positive_iou=0.5, negative_iou_ceiling=ceiling)
            if num_gts == 0:
                assert list(result.labels) == [NEGATIVE] * num_anchors
                continue
            labels, matched = rule_assignment(pairwise_tubelet_iou(anchors, gts), 0.5, ceiling)
            assert list(result.labels) == labels
            assert list(result.matched_gt) == matched
            assert set(result.matched_gt[result.labels == POSITIVE]) == set(range(num_gts))
            for a in result.positive_indices:
                np.testing.assert_allclose(decode_deltas(anchors[a], result.regression_targets[int(a)]),
                                           gts[result.matched_gt[a]])

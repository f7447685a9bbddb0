import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fibertrack.core import BBox, Detection, iou
from fibertrack.evaluation import detection_metrics
from fibertrack.initializer import (
    Ellipse, HoughParams, InitConfig, hough_ellipses, initialize_pseudo_gt, min_bbox, size_prior_filter,
)
from fibertrack.synthgen import ellipse_coverage



def render(shape, *ellipses):
    mask = np.zeros(shape, bool)
    for e in ellipses:
        mask |= ellipse_coverage(shape, e.cx, e.cy, e.a, e.b, e.theta) >= 0.5
    return mask


def dense_extent(e, n=20000):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x = e.cx + e.a * np.cos(t) * math.cos(e.theta) - e.b * np.sin(t) * math.sin(e.theta)
    y = e.cy + e.a * np.cos(t) * math.sin(e.theta) + e.b * np.sin(t) * math.cos(e.theta)
    return x, y


def test_min_bbox_examples():
    assert min_bbox(Ellipse(0, 0, 5, 5)).as_tuple() == pytest.approx((-5, -5, 5, 5))
    assert min_bbox(Ellipse(0, 0, 4, 2)).as_tuple() == pytest.approx((-4, -2, 4, 2))
    r = math.sqrt(10)
    assert min_bbox(Ellipse(0, 0, 4, 2, math.pi / 4)).as_tuple() == pytest.approx((-r, -r, r, r))


@settings(max_examples=60)
@given(st.floats(1, 20), st.floats(0.3, 1.0), st.floats(0, math.pi), st.floats(-10, 10), st.floats(-10, 10))
def test_min_bbox_is_tight(a, ratio, theta, cx, cy):
    e = Ellipse(cx, cy, a, a * ratio, theta)
    box = min_bbox(e)
    x, y = dense_extent(e)
    tol = 1e-9 * (1 + a)
    assert x.min() >= box.x1 - tol and x.max() <= box.x2 + tol
    assert y.min() >= box.y1 - tol and y.max() <= box.y2 + tol
    # shrinking any side by 2% of its span excludes some boundary point
    w, h = box.width, box.height
    assert (x < box.x1 + 0.02 * w).any() and (x > box.x2 - 0.02 * w).any()
    assert (y < box.y1 + 0.02 * h).any() and (y > box.y2 - 0.02 * h).any()


@pytest.mark.parametrize("area,kept", [(19, False), (100, True), (201, False), (20, True), (200, True)])
def test_size_prior_cases(area, kept):
    box = BBox(0, 0, area / 10, 10)
    assert (size_prior_filter([box], 100.0) == [box]) is kept


def test_size_prior_subset_idempotent(rng):
    boxes = [BBox(0, 0, w, h) for w, h in rng.uniform(1, 20, (50, 2))]
    once = size_prior_filter(boxes, 100.0)
    assert all(b in boxes for b in once)
    assert size_prior_filter(once, 100.0) == once
    with pytest.raises(ValueError):
        size_prior_filter(boxes, 0.0)


def test_hough_blank_mask():
    assert hough_ellipses(np.zeros((40, 40), bool)) == []


def test_hough_render_and_recover():
    truth = Ellipse(30.0, 28.0, 8.0, 5.0, math.radians(30))
    found = hough_ellipses(render((60, 60), truth))
    assert len(found) == 1
    e = found[0]
    assert math.hypot(e.cx - truth.cx, e.cy - truth.cy) <= 2
    assert e.a == pytest.approx(8, rel=0.1)
    assert e.b == pytest.approx(5, rel=0.1)


def test_hough_two_ellipses():
    e1 = Ellipse(20.0, 20.0, 7.0, 5.0, 0.3)
    e2 = Ellipse(65.0, 40.0, 6.0, 6.0, 0.0)
    found = hough_ellipses(render((70, 90), e1, e2))
    assert len(found) == 2
    centers = sorted((round(e.cx), round(e.cy)) for e in found)
    assert abs(centers[0][0] - 20) <= 2 and abs(centers[1][0] - 65) <= 2


def test_hough_params_validation():
    with pytest.raises(ValueError):
        HoughParams(min_semi_axis=5, max_semi_axis=3)
    with pytest.raises(ValueError):
        InitConfig(method="magic")


def test_emmpmh_recall_on_clean_frame(clean_small):
    frames = clean_small.frames[:2]
    gp = initialize_pseudo_gt(frames, InitConfig())
    m = detection_metrics(gp, clean_small.gt_per_frame()[:2])
    assert m.recall >= 0.9


def test_stained_frame_loses_recall(clean_small):
    img = clean_small.frames[0].astype(float)
    stained = np.clip(img - 100, 0, 255).astype(np.uint8)
    gt = [clean_small.gt_per_frame()[0]]
    r_clean = detection_metrics(initialize_pseudo_gt([clean_small.frames[0]]), gt).recall
    r_stain = detection_metrics(initialize_pseudo_gt([stained]), gt).recall
    # a uniform offset alone is harmless; the stain must cover part of the frame
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    blob = np.hypot(xx - 64, yy - 64) < 50
    partial = np.where(blob, stained, clean_small.frames[0]).astype(np.uint8)
    r_partial = detection_metrics(initialize_pseudo_gt([partial]), gt).recall
    assert r_partial < r_clean
    assert r_stain <= r_clean


def test_proposals_path_applies_nms_point_one(clean_small):
    calls = []

    def source(image):
        # two near-identical proposals per fiber: IoU about 0.8
        out = []
        for _, b in clean_small.gt_boxes[0]:
            out.append((b, 0.9))
            out.append((b.shifted(1.0, 0.0), 0.8))
        calls.append(len(out))
        return out

    boxes = [b for _, b in clean_small.gt_boxes[0]]
    gp = initialize_pseudo_gt([clean_small.frames[0]], InitConfig(method="proposals"), proposal_source=source,
                              sample_boxes=boxes)
    assert InitConfig(method="proposals").proposal_nms == 0.1
    kept = gp[0]
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i], kept[j]) <= 0.1
    assert len(kept) == len(boxes)


def test_proposals_size_prior_uses_sample_area(clean_small):
    boxes = [b for _, b in clean_small.gt_boxes[0]]
    big = BBox(0, 0, 60, 60)
    gp = initialize_pseudo_gt([clean_small.frames[0]], InitConfig(method="proposals"),
                              proposal_source=lambda img: [Detection(0, big, 1.0)], sample_boxes=boxes)
    assert gp == [[]]


def test_initialization_deterministic(clean_small):
    frames = clean_small.frames[:2]
    assert initialize_pseudo_gt(frames) == initialize_pseudo_gt(frames)

import numpy as np
import pytest

from fibertrack.core import BBox, Detection, iou
from fibertrack.loop import (
    LoopConfig, LoopError, SelfTrainingLoop, detect_single_images, pseudo_gt_delta, refine_tracks, run_algorithm1,
    tracks_to_detections, update_pseudo_gt,
)
from fibertrack.tracker import TrackerConfig, TrackState, track_sequence

from scenarios import gap_fill, persistent_birth, track_of_length, transient_fp


def refined(seq, **kw):
    cfg = LoopConfig(**kw)
    return tracks_to_detections(track_sequence(seq, cfg.tracker), cfg, len(seq))


@pytest.mark.parametrize("length,kept", [(5, False), (6, True), (4, False), (7, True)])
def test_history_length_boundary(length, kept):
    # the track ends before the last frame, so its trailing predictions are stripped
    out = refined(track_of_length(length, num_frames=20))
    assert (sum(map(len, out)) == length) is kept
    if not kept:
        assert sum(map(len, out)) == 0


def test_gap_fill_added():
    seq = gap_fill(12, gap=6)
    assert seq[6] == []
    out = refined(seq)
    assert len(out[6]) == 1
    assert all(len(f) == 1 for f in out)


def test_persistent_birth_saved():
    out = refined(persistent_birth(12, start=4))
    assert [len(f) for f in out] == [1] * 4 + [2] * 8


def test_transient_fp_removed():
    seq = transient_fp(12, at=5)
    assert len(seq[5]) == 2
    out = refined(seq)
    assert all(len(f) == 1 for f in out)


def test_transient_fp_survives_without_trailing_strip():
    # with its alpha predicted entries the spurious track reaches length 1 + alpha > beta
    out = refined(transient_fp(12, at=5), drop_trailing_timeout_predictions=False)
    assert sum(map(len, out)) > 12


def make_track(tid, boxes, start=0, status="active"):
    hist = [(start + k, b, True) for k, b in enumerate(boxes)]
    return TrackState(tid, np.zeros(8), np.eye(8), history=hist, status=status)


def test_refine_nms_keeps_one_of_overlapping_pair():
    a = BBox(0, 0, 10, 10)
    b = BBox(0, 0, 10, 8)
    assert iou(a, b) == pytest.approx(0.8)
    tracks = [make_track(0, [a] * 8), make_track(1, [b] * 8)]
    out = tracks_to_detections(tracks, LoopConfig(refine_nms=0.7), 8)
    assert all(len(f) == 1 for f in out)
    assert tracks_to_detections(tracks, LoopConfig(refine_nms=0.9), 8)[0] == [a, b]


def test_refine_nms_defaults_by_init():
    assert LoopConfig().resolved_refine_nms == 0.7
    assert LoopConfig(init={"method": "proposals"}).resolved_refine_nms == 0.1
    assert LoopConfig(refine_nms=0.4).resolved_refine_nms == 0.4
    assert LoopConfig().beta == 5 and LoopConfig().tracker.alpha == 5


def test_refine_prefers_associated_entries():
    a = BBox(0, 0, 10, 10)
    t0 = TrackState(0, np.zeros(8), np.eye(8), history=[(k, a, k != 3) for k in range(8)])
    t1 = make_track(1, [a.shifted(0.5, 0)] * 8)
    recs = refine_tracks([t0, t1], LoopConfig(), 8)
    at3 = [(tid, d) for tid, d in recs if d.frame_index == 3]
    assert [tid for tid, _ in at3] == [1]
    assert {d.score for tid, d in recs if tid == 0} == {1.0}


def test_refinement_invariants(rng):
    seq = [[BBox.from_center(x, y, 10, 10) for x, y in rng.uniform(10, 200, (8, 2))] for _ in range(15)]
    seq = [f + [b.shifted(1, 1) for b in f[:3]] for f in seq]
    tracks = track_sequence(seq, TrackerConfig())
    cfg = LoopConfig()
    recs = refine_tracks(tracks, cfg, 15)
    hist = {(t.id, f, b) for t in tracks for f, b, _ in t.history}
    assert all((tid, d.frame_index, d.box) in hist for tid, d in recs)
    per = tracks_to_detections(tracks, cfg, 15)
    for f in per:
        for i in range(len(f)):
            for j in range(i + 1, len(f)):
                assert iou(f[i], f[j]) <= cfg.resolved_refine_nms


def test_update_pseudo_gt():
    gp = [[BBox(0, 0, 1, 1)], []]
    assert update_pseudo_gt(gp, gp) == gp
    new = [[], [BBox(2, 2, 3, 3)]]
    assert update_pseudo_gt(gp, new) == new
    with pytest.raises(ValueError):
        update_pseudo_gt(gp, [[]])


def test_pseudo_gt_delta():
    boxes = [BBox(10 * k, 0, 10 * k + 5, 5) for k in range(99)]
    a = [boxes]
    assert pseudo_gt_delta(a, a) == 0.0
    b = [boxes + [BBox(0, 100, 5, 105)]]
    assert pseudo_gt_delta(a, b) == pytest.approx(1 / 199)
    assert pseudo_gt_delta([[boxes[0]]], [[BBox(500, 500, 505, 505)]]) == 1.0
    assert pseudo_gt_delta([[], []], [[], []]) == 0.0
    with pytest.raises(ValueError):
        pseudo_gt_delta(a, [[], []])


def test_detect_single_images(gt_model, default_dataset):
    assert detect_single_images(gt_model, []) == []
    img = default_dataset.frames[2]
    a, b = detect_single_images(gt_model, [img, img])
    assert [d.box for d in a] == [d.box for d in b]
    assert {d.frame_index for d in b} <= {1}


def test_short_sequence_rejected(clean_small):
    with pytest.raises(ValueError, match="alpha"):
        run_algorithm1(clean_small.frames[:9], LoopConfig())


class ReplayBackend:
    """Oracle detector: ignores training and returns ground truth."""

    def __init__(self, dataset):
        self.gt = dataset.gt_per_frame()
        self.fits = 0

    def fit(self, frames, gp, previous, seed):
        self.fits += 1
        return "oracle"

    def detect(self, model, image, frame_index):
        return [Detection(frame_index, b, 1.0) for b in self.gt[frame_index]]


def test_loop_with_stub_oracle_detector(clean_small):
    backend = ReplayBackend(clean_small)
    gp0 = [f[:-2] if t % 3 == 0 else list(f) for t, f in enumerate(clean_small.gt_per_frame())]
    res = run_algorithm1(clean_small, LoopConfig(), initial_gp=gp0, backend=backend)
    assert res.converged
    assert backend.fits == len(res.reports) - 1
    final = res.reports[-1]
    assert final.detection.f_measure == 1.0
    assert final.tracking.mota == 1.0 and final.tracking.idsw == 0
    assert res.model == "oracle"


def test_component_errors_name_stage(clean_small):
    class Broken(ReplayBackend):
        def fit(self, *a):
            raise RuntimeError("boom")

    with pytest.raises(LoopError, match="detector training failed at iteration 1"):
        run_algorithm1(clean_small, LoopConfig(), initial_gp=clean_small.gt_per_frame(), backend=Broken(clean_small))


@pytest.mark.slow
def test_clean_sequence_converges(clean_small, tmp_path):
    res = run_algorithm1(clean_small, LoopConfig(max_iterations=4), out_dir=tmp_path)
    assert res.converged
    assert res.reports[-1].detection.f_measure >= 0.95
    assert (tmp_path / "iter_0" / "pseudo_gt.txt").exists()
    assert (tmp_path / "iter_1" / "model.bin").exists()
    # a rerun is byte identical
    res2 = run_algorithm1(clean_small, LoopConfig(max_iterations=4), out_dir=tmp_path / "again")
    for f in ("detections.txt", "tracks.txt", "pseudo_gt.txt", "model.bin"):
        assert (tmp_path / "iter_1" / f).read_bytes() == (tmp_path / "again" / "iter_1" / f).read_bytes()
    assert res2.pseudo_gt == res.pseudo_gt


def test_estimator_wrapper_config():
    est = SelfTrainingLoop(init_method="proposals", beta=6)
    cfg = est._config()
    assert cfg.beta == 6 and cfg.resolved_refine_nms == 0.1
    assert est.get_params()["max_iterations"] == 4


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(max_iterations=0)
    with pytest.raises(ValueError):
        LoopConfig(convergence_epsilon=0)
    with pytest.raises(ValueError):
        LoopConfig(refine_nms=1.5)

"""Self-training loop: detect, track, refine the pseudo ground truth, retrain.

Tracking output is turned back into per-frame boxes by dropping short
trajectories and suppressing overlaps; those boxes replace the pseudo ground
truth used to train the next detector.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import detector as det
from .core import BBox, Detection, nms_indices, pseudo_gt_to_detections, write_detections, write_tracks
from .evaluation import (DetectionMetrics, MotMetrics, detection_metrics, format_detection_report,
                         format_mot_report, match_frame, mot_metrics)
from .initializer import InitConfig, initialize_pseudo_gt
from .tracker import TrackerConfig, TrackState, track_sequence, tracks_to_records

log = logging.getLogger(__name__)

PREDICTED_SCORE = 0.5
REFINE_NMS_DEFAULTS = {"emmpmh": 0.7, "proposals": 0.1}


class LoopError(RuntimeError):
    pass


@dataclass
class LoopConfig:
    beta: int = 5
    refine_nms: float | None = None
    max_iterations: int = 4
    convergence_epsilon: float = 0.01
    drop_trailing_timeout_predictions: bool = True
    seed: int = 0
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        for name, cls in (("detector", det.DetectorConfig), ("tracker", TrackerConfig), ("init", InitConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, cls(**getattr(self, name)))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.convergence_epsilon < 1:
            raise ValueError("convergence_epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.refine_nms is not None and not 0 <= self.refine_nms <= 1:
            raise ValueError("refine_nms must lie in [0, 1]")

    @property
    def resolved_refine_nms(self) -> float:
        if self.refine_nms is not None:
            return self.refine_nms
        return REFINE_NMS_DEFAULTS[self.init.method]


@dataclass
class IterationReport:
    iteration: int
    detections_per_frame: list
    gp_delta: float | None = None
    detection: DetectionMetrics | None = None
    degraded_detection: DetectionMetrics | None = None
    tracking: MotMetrics | None = None
    raw_detection: DetectionMetrics | None = None
    converged: bool = False

    def curve_row(self) -> dict:
        row = {"iteration": self.iteration, "gp_delta": self.gp_delta}
        if self.detection:
            row.update(precision=self.detection.precision, recall=self.detection.recall,
                       f_measure=self.detection.f_measure)
        if self.degraded_detection:
            row["degraded_f_measure"] = self.degraded_detection.f_measure
        if self.tracking:
            row.update(mota=self.tracking.mota, track_recall=self.tracking.recall, idsw=self.tracking.idsw,
                       mt=self.tracking.mt, ml=self.tracking.ml)
        return row

    def format(self) -> str:
        lines = [
            f"iteration: {self.iteration}",
            f"gp_delta: {'none' if self.gp_delta is None else f'{self.gp_delta:.6f}'}",
            f"converged: {str(self.converged).lower()}",
            f"boxes: {sum(self.detections_per_frame)}",
            "frame_counts: " + ",".join(map(str, self.detections_per_frame)),
        ]
        text = "\n".join(lines) + "\n"
        if self.detection:
            text += "\n" + format_detection_report(self.detection)
        if self.degraded_detection:
            text += "\n" + format_detection_report(self.degraded_detection, "detection (degraded frames)")
        if self.raw_detection:
            text += "\n" + format_detection_report(self.raw_detection, "detector output")
        if self.tracking:
            text += "\n" + format_mot_report(self.tracking)
        return text


@dataclass
class LoopResult:
    detections: list
    tracks: list
    model: det.DetectorModel | None
    reports: list
    converged: bool

    @property
    def pseudo_gt(self):
        return [[d.box for d in frame] for frame in self.detections]


# ---------------------------------------------------------------------------


def _refined_history(t: TrackState, drop_trailing: bool):
    hist = list(t.history)
    if drop_trailing and not t.active:
        while hist and not hist[-1][2]:
            hist.pop()
    return hist


def refine_tracks(tracks: Sequence[TrackState], cfg: LoopConfig, num_frames: int | None = None):
    """Surviving ``(track_id, Detection)`` records after pruning and per-frame NMS.

    Scores are 1 for associated entries and ``PREDICTED_SCORE`` for predicted ones.
    """
    pooled = {}
    for t in sorted(tracks, key=lambda tr: tr.id):
        hist = _refined_history(t, cfg.drop_trailing_timeout_predictions)
        if len(hist) <= cfg.beta:
            continue
        for frame, box, assoc in hist:
            pooled.setdefault(frame, []).append((t.id, Detection(frame, box, 1.0 if assoc else PREDICTED_SCORE)))
    thr = cfg.resolved_refine_nms
    out = []
    for frame in sorted(pooled):
        entries = pooled[frame]
        boxes = np.array([d.box.as_tuple() for _, d in entries])
        scores = np.array([d.score for _, d in entries])
        keep = sorted(nms_indices(boxes, scores, thr), key=lambda i: entries[i][0])
        out.extend(entries[i] for i in keep)
    if num_frames is not None and any(d.frame_index >= num_frames for _, d in out):
        raise ValueError("track history extends past the sequence length")
    return out


def tracks_to_detections(tracks: Sequence[TrackState], cfg: LoopConfig, num_frames: int) -> list[list[BBox]]:
    frames = [[] for _ in range(num_frames)]
    for _, d in refine_tracks(tracks, cfg, num_frames):
        frames[d.frame_index].append(d.box)
    return frames


def update_pseudo_gt(gp, refined):
    if len(gp) != len(refined):
        raise ValueError(f"pseudo ground truth has {len(gp)} frames, refinement has {len(refined)}")
    return [list(frame) for frame in refined]


def pseudo_gt_delta(a, b, iou_threshold: float = 0.5) -> float:
    """Symmetric fraction of boxes left unmatched between two pseudo ground truths."""
    if len(a) != len(b):
        raise ValueError(f"frame counts differ: {len(a)} vs {len(b)}")
    total = sum(len(x) for x in a) + sum(len(x) for x in b)
    if total == 0:
        return 0.0
    unmatched = 0
    for fa, fb in zip(a, b):
        m = len(match_frame(fa, fb, iou_threshold))
        unmatched += len(fa) + len(fb) - 2 * m
    return unmatched / total


def detect_single_images(model: det.DetectorModel, images, map_fn: Callable = map) -> list[list[Detection]]:
    images = list(images)
    return list(map_fn(lambda t: det.detect(model, images[t], t), range(len(images))))


class ReferenceBackend:
    """Detector slot used by the loop: the sliding-window reference detector.

    Any object with the same two methods can replace it, e.g. a wrapper
    that calls an external model out of process.
    """

    def __init__(self, cfg: det.DetectorConfig):
        self.cfg = cfg

    def fit(self, frames, gp, previous, seed):
        samples = det.sample_training_patches(frames, gp, self.cfg, seed=seed)
        if previous is None:
            return det.train(samples, self.cfg, seed=seed)
        return det.fine_tune(previous, samples, seed=seed)

    def detect(self, model, image, frame_index):
        return det.detect(model, image, frame_index)


# ---------------------------------------------------------------------------


def _iteration_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _report(k, gp, tracks_records, dataset, delta):
    counts = [len(f) for f in gp]
    rep = IterationReport(iteration=k, detections_per_frame=counts, gp_delta=delta)
    gt = getattr(dataset, "gt_per_frame", None)
    if gt is not None and getattr(dataset, "has_gt", False):
        gtf = dataset.gt_per_frame()
        rep.detection = detection_metrics(gp, gtf)
        flags = list(dataset.degraded_flags)
        if any(flags):
            rep.degraded_detection = detection_metrics(
                [f for f, d in zip(gp, flags) if d], [g for g, d in zip(gtf, flags) if d])
        rep.tracking = mot_metrics(tracks_records, dataset.gt_records())
    return rep


def _write_iteration(out_dir, k, gp, raw_dets, records, model, report):
    if out_dir is None:
        return
    d = Path(out_dir) / f"iter_{k}"
    d.mkdir(parents=True, exist_ok=True)
    write_detections(d / "detections.txt", raw_dets)
    write_tracks(d / "tracks.txt", records)
    write_detections(d / "pseudo_gt.txt", pseudo_gt_to_detections(gp))
    if isinstance(model, det.DetectorModel):
        det.save_model(model, d / "model.bin")
    (d / "report").write_text(report.format())


def _step(stage, k, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise LoopError(f"{stage} failed at iteration {k}: {exc}") from exc


def run_algorithm1(dataset, cfg: LoopConfig | None = None, out_dir=None, map_fn: Callable = map,
                   initial_gp=None, backend=None) -> LoopResult:
    """Run the full self-training loop on ``dataset``.

    ``dataset`` needs ``frames``; ground truth, when present, is only used
    for the per-iteration reports.  ``initial_gp`` skips the initializer and
    ``backend`` swaps the detector (see :class:`ReferenceBackend`).
    """
    cfg = cfg or LoopConfig()
    backend = backend or ReferenceBackend(cfg.detector)
    frames = list(getattr(dataset, "frames", dataset))
    n = len(frames)
    need = cfg.tracker.alpha + cfg.beta
    if n < need:
        raise ValueError(f"sequence has {n} frames; the loop needs at least alpha + beta = {need}")
    h, w = frames[0].shape
    tcfg = cfg.tracker
    if tcfg.image_width is None or tcfg.image_height is None:
        tcfg = replace(tcfg, image_width=float(w), image_height=float(h))

    def track_and_refine(per_frame_boxes, k):
        tracks = _step("tracker", k, track_sequence, per_frame_boxes, tcfg)
        refined = [[] for _ in range(n)]
        for _, d in refine_tracks(tracks, cfg, n):
            refined[d.frame_index].append(d.box)
        return tracks_to_records(tracks), refined

    if initial_gp is None:
        gp = _step("initializer", 0, initialize_pseudo_gt, frames, cfg.init, map_fn=map_fn)
    else:
        if len(initial_gp) != n:
            raise ValueError(f"initial pseudo ground truth has {len(initial_gp)} frames, sequence has {n}")
        gp = [list(f) for f in initial_gp]
    records, _ = track_and_refine(gp, 0)
    report = _report(0, gp, records, dataset, None)
    reports = [report]
    _write_iteration(out_dir, 0, gp, pseudo_gt_to_detections(gp), records, None, report)
    log.info("iteration 0: %d initial boxes", sum(map(len, gp)))

    model = None
    converged = False
    final_records = records
    for k in range(1, cfg.max_iterations + 1):
        seed = _iteration_seed(cfg.seed, k)
        stage = "detector training" if model is None else "detector fine-tuning"
        model = _step(stage, k, backend.fit, frames, gp, model, seed)
        raw = _step("detector", k, lambda: list(map_fn(lambda t: backend.detect(model, frames[t], t), range(n))))
        records, refined = track_and_refine([[d.box for d in f] for f in raw], k)
        new_gp = update_pseudo_gt(gp, refined)
        delta = pseudo_gt_delta(gp, new_gp)
        converged = delta < cfg.convergence_epsilon
        report = _report(k, new_gp, records, dataset, delta)
        report.converged = converged
        if report.detection is not None:
            report.raw_detection = detection_metrics(raw, dataset.gt_per_frame())
        reports.append(report)
        _write_iteration(out_dir, k, new_gp, [d for f in raw for d in f], records, model, report)
        log.info("iteration %d: %d boxes, delta %.4f", k, sum(map(len, new_gp)), delta)
        gp = new_gp
        final_records = records
        if converged:
            break
    dets = [[Detection(t, b, 1.0) for b in frame] for t, frame in enumerate(gp)]
    return LoopResult(dets, final_records, model, reports, converged)


class SelfTrainingLoop(BaseEstimator):
    """Estimator wrapper: ``fit`` runs the loop, ``predict`` detects on new images."""

    def __init__(self, beta=5, refine_nms=None, max_iterations=4, convergence_epsilon=0.01,
                 drop_trailing_timeout_predictions=True, seed=0, init_method="emmpmh"):
        self.beta = beta
        self.refine_nms = refine_nms
        self.max_iterations = max_iterations
        self.convergence_epsilon = convergence_epsilon
        self.drop_trailing_timeout_predictions = drop_trailing_timeout_predictions
        self.seed = seed
        self.init_method = init_method

    def _config(self):
        p = self.get_params()
        method = p.pop("init_method")
        return LoopConfig(init=InitConfig(method=method), **p)

    def fit(self, dataset, y=None):
        res = run_algorithm1(dataset, self._config())
        self.result_ = res
        self.model_ = res.model
        self.reports_ = res.reports
        self.pseudo_gt_ = res.pseudo_gt
        self.converged_ = res.converged
        return self

    def predict(self, images):
        return detect_single_images(self.model_, images)


def config_to_dict(cfg: LoopConfig) -> dict:
    return asdict(cfg)

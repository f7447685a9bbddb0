"""Detection and multi-object tracking metrics.

Detection quality is scored per frame by a maximum one-to-one matching at an
IoU threshold.  Tracking quality follows the CLEAR-MOT procedure with a
center-distance hit threshold; recall there is position-level.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import BBox, Detection, center_distance_matrix, check_box_array, iou_matrix

_INADMISSIBLE = 1e9


@dataclass
class FrameCounts:
    tp: int
    fp: int
    fn: int


@dataclass
class DetectionMetrics:
    precision: float
    recall: float
    f_measure: float
    nfp_per_image: float
    nfn_per_image: float
    tp: int
    fp: int
    fn: int
    per_frame: list = field(default_factory=list)

    @property
    def num_frames(self):
        return len(self.per_frame)


@dataclass
class MotFrame:
    gt: int
    matches: int
    fp: int
    fn: int
    idsw: int


@dataclass
class MotMetrics:
    recall: float
    mota: float
    idsw: int
    mt: int
    ml: int
    num_gt_trajectories: int
    total_gt: int
    fp: int
    fn: int
    hit_threshold: float = 20.0
    restricted: bool = False
    per_frame: list = field(default_factory=list)


def _as_box_array(items):
    if isinstance(items, np.ndarray):
        return check_box_array(items)
    out = []
    for it in items:
        box = it.box if isinstance(it, Detection) else it
        out.append(box.as_tuple() if isinstance(box, BBox) else tuple(box))
    return check_box_array(np.array(out, dtype=float).reshape(-1, 4))


def f_measure(precision, recall):
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _ratio(num, den):
    # an empty denominator means nothing could go wrong
    return num / den if den else 1.0


def match_frame(dets, gt, iou_threshold=0.5):
    """Maximum-cardinality matching at ``iou >= iou_threshold``; among those,
    the matching with the largest total IoU.  Returns ``(det_idx, gt_idx)`` pairs."""
    D = _as_box_array(dets)
    G = _as_box_array(gt)
    if len(D) == 0 or len(G) == 0:
        return []
    M = iou_matrix(D, G)
    ok = M >= iou_threshold
    if not ok.any():
        return []
    # every admissible pair is worth 1 plus a tie-break below 1/min(n, m)
    weight = np.where(ok, 1.0 + M / (min(M.shape) + 1), 0.0)
    r, c = linear_sum_assignment(weight, maximize=True)
    return [(int(i), int(j)) for i, j in zip(r, c) if ok[i, j]]


def detection_metrics(dets_per_frame: Sequence, gt_per_frame: Sequence, iou_threshold: float = 0.5) -> DetectionMetrics:
    if len(dets_per_frame) != len(gt_per_frame):
        raise ValueError(f"{len(dets_per_frame)} detection frames vs {len(gt_per_frame)} ground-truth frames")
    per = []
    for dets, gt in zip(dets_per_frame, gt_per_frame):
        tp = len(match_frame(dets, gt, iou_threshold))
        per.append(FrameCounts(tp, len(dets) - tp, len(gt) - tp))
    tp = sum(f.tp for f in per)
    fp = sum(f.fp for f in per)
    fn = sum(f.fn for f in per)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    n = max(len(per), 1)
    return DetectionMetrics(p, r, f_measure(p, r), fp / n, fn / n, tp, fp, fn, per)


def _index_records(records, what):
    """``{frame: {id: BBox}}`` from ``(id, Detection)`` records."""
    by_frame = defaultdict(dict)
    for tid, det in records:
        frame = by_frame[det.frame_index]
        if tid in frame:
            raise ValueError(f"duplicate {what} entry for id {tid} at frame {det.frame_index}")
        frame[tid] = det.box
    return by_frame


def _ever_hit_ids(hyp, gt, thr):
    hit = set()
    for t, hyps in hyp.items():
        g = gt.get(t)
        if not g:
            continue
        ids = list(hyps)
        d = center_distance_matrix(_as_box_array([hyps[i] for i in ids]), _as_box_array(list(g.values())))
        hit.update(i for i, row in zip(ids, d) if (row <= thr).any())
    return hit


def mot_metrics(tracks, gt_tracks, hit_threshold: float = 20.0, restrict_to_gt: bool = False) -> MotMetrics:
    """CLEAR-MOT counts over ``(track_id, Detection)`` records.

    With ``restrict_to_gt`` hypotheses that never come within the threshold
    of any ground-truth object are dropped before counting, which suits
    ground truth annotating only a subset of the objects.
    """
    hyp = _index_records(tracks, "track")
    gt = _index_records(gt_tracks, "ground-truth")
    if restrict_to_gt:
        keep = _ever_hit_ids(hyp, gt, hit_threshold)
        hyp = defaultdict(dict, {t: {i: b for i, b in h.items() if i in keep} for t, h in hyp.items()})
    gt_len = defaultdict(int)
    gt_hits = defaultdict(int)
    last_match = {}
    current = {}
    per = []
    for t in sorted(set(hyp) | set(gt)):
        g = gt.get(t, {})
        h = hyp.get(t, {})
        for gid in g:
            gt_len[gid] += 1
        pairs = {}
        # keep last frame's correspondences that are still within threshold
        for gid, hid in current.items():
            if gid in g and hid in h:
                d = center_distance_matrix(_as_box_array([g[gid]]), _as_box_array([h[hid]]))[0, 0]
                if d <= hit_threshold:
                    pairs[gid] = hid
        free_g = [i for i in g if i not in pairs]
        used = set(pairs.values())
        free_h = [i for i in h if i not in used]
        if free_g and free_h:
            d = center_distance_matrix(_as_box_array([g[i] for i in free_g]), _as_box_array([h[i] for i in free_h]))
            cost = np.where(d <= hit_threshold, d, _INADMISSIBLE)
            for r, c in zip(*linear_sum_assignment(cost)):
                if d[r, c] <= hit_threshold:
                    pairs[free_g[r]] = free_h[c]
        idsw = 0
        for gid, hid in pairs.items():
            if gid in last_match and last_match[gid] != hid:
                idsw += 1
            last_match[gid] = hid
            gt_hits[gid] += 1
        current = pairs
        per.append(MotFrame(len(g), len(pairs), len(h) - len(pairs), len(g) - len(pairs), idsw))
    total = sum(f.gt for f in per)
    fp = sum(f.fp for f in per)
    fn = sum(f.fn for f in per)
    sw = sum(f.idsw for f in per)
    matches = sum(f.matches for f in per)
    ratios = [gt_hits[i] / gt_len[i] for i in gt_len]
    eps = 1e-12
    return MotMetrics(
        recall=_ratio(matches, total),
        mota=1.0 - (fn + fp + sw) / total if total else 1.0,
        idsw=sw,
        mt=sum(r >= 0.8 - eps for r in ratios),
        ml=sum(r <= 0.2 + eps for r in ratios),
        num_gt_trajectories=len(gt_len),
        total_gt=total, fp=fp, fn=fn,
        hit_threshold=hit_threshold, restricted=restrict_to_gt, per_frame=per,
    )


def mota_from_frames(per_frame: Sequence[MotFrame]) -> float:
    total = sum(f.gt for f in per_frame)
    return 1.0 - sum(f.fn + f.fp + f.idsw for f in per_frame) / total if total else 1.0


# ---------------------------------------------------------------------------
# Reports


def format_detection_report(m: DetectionMetrics, title="detection") -> str:
    lines = [
        f"# {title}",
        f"precision: {m.precision:.6f}",
        f"recall: {m.recall:.6f}",
        f"f_measure: {m.f_measure:.6f}",
        f"nfp_per_image: {m.nfp_per_image:.6f}",
        f"nfn_per_image: {m.nfn_per_image:.6f}",
        f"tp: {m.tp}",
        f"fp: {m.fp}",
        f"fn: {m.fn}",
        "frame,tp,fp,fn",
    ]
    lines += [f"{t},{f.tp},{f.fp},{f.fn}" for t, f in enumerate(m.per_frame)]
    return "\n".join(lines) + "\n"


def format_mot_report(m: MotMetrics, title="tracking") -> str:
    lines = [
        f"# {title}",
        "# recall is position-level (matched GT positions / all GT positions)",
        f"hit_threshold: {m.hit_threshold}",
        f"restricted_to_gt: {str(m.restricted).lower()}",
        f"recall: {m.recall:.6f}",
        f"mota: {m.mota:.6f}",
        f"idsw: {m.idsw}",
        f"mt: {m.mt}",
        f"ml: {m.ml}",
        f"gt_trajectories: {m.num_gt_trajectories}",
        f"gt_positions: {m.total_gt}",
        f"fp: {m.fp}",
        f"fn: {m.fn}",
        "frame,gt,matches,fp,fn,idsw",
    ]
    lines += [f"{t},{f.gt},{f.matches},{f.fp},{f.fn},{f.idsw}" for t, f in enumerate(m.per_frame)]
    return "\n".join(lines) + "\n"


def write_report(path, detection: DetectionMetrics | None = None, tracking: MotMetrics | None = None) -> None:
    parts = []
    if detection is not None:
        parts.append(format_detection_report(detection))
    if tracking is not None:
        parts.append(format_mot_report(tracking))
    Path(path).write_text("\n".join(parts))


CURVE_COLUMNS = ("iteration", "precision", "recall", "f_measure", "degraded_f_measure",
                 "mota", "track_recall", "idsw", "mt", "ml", "gp_delta")


def format_curves(rows: Sequence[dict]) -> str:
    """Per-iteration metric table (tab separated, one header line)."""
    out = ["\t".join(CURVE_COLUMNS)]
    for row in rows:
        cells = []
        for col in CURVE_COLUMNS:
            v = row.get(col)
            cells.append("nan" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v)))
        out.append("\t".join(cells))
    return "\n".join(out) + "\n"

"""Box geometry, IoU, NMS and the detection/track text formats.

Boxes use continuous pixel coordinates (origin top-left, y down) and the
continuous area convention: ``area = (x2 - x1) * (y2 - y1)`` with no +1
pixel correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class FormatError(ValueError):
    """A detection or track file could not be parsed."""


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self!r}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_center(cls, cx, cy, width, height):
        return cls(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self):
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def shifted(self, dx, dy):
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Detection:
    frame_index: int
    box: BBox
    score: float = 1.0

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


# One list of boxes per frame; the pseudo ground truth and every refined
# per-frame detection set share this shape.
PseudoGT = list


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def center_distance(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` float array."""
    arr = np.array([b.as_tuple() for b in boxes], dtype=float)
    return arr.reshape(-1, 4)


def check_box_array(boxes) -> np.ndarray:
    """Validate an ``(n, 4)`` array of ``x1, y1, x2, y2`` rows."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=float)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], BBox):
            arr = boxes_to_array(boxes)
        else:
            arr = np.asarray(boxes, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) box array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("box array contains non-finite values")
    if np.any(arr[:, 2] <= arr[:, 0]) or np.any(arr[:, 3] <= arr[:, 1]):
        raise ValueError("box array contains degenerate boxes")
    return arr


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box arrays, shape ``(len(a), len(b))``."""
    a = check_box_array(a)
    b = check_box_array(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def center_distance_matrix(a, b) -> np.ndarray:
    a = check_box_array(a)
    b = check_box_array(b)
    ca = np.column_stack([(a[:, 0] + a[:, 2]) / 2, (a[:, 1] + a[:, 3]) / 2])
    cb = np.column_stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2])
    if len(ca) == 0 or len(cb) == 0:
        return np.zeros((len(ca), len(cb)))
    return np.hypot(ca[:, None, 0] - cb[None, :, 0], ca[:, None, 1] - cb[None, :, 1])


def nms_indices(boxes, scores, threshold: float) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Ties in score keep the lower original index first.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"NMS threshold {threshold} outside [0, 1]")
    boxes = check_box_array(boxes)
    scores = np.asarray(scores, dtype=float)
    if len(boxes) == 0:
        return []
    # stable sort on -score keeps the original order among equal scores
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= overlaps[i] > threshold
    return keep


def nms(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression over detections from a single frame."""
    if not dets:
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"NMS threshold {threshold} outside [0, 1]")
        return []
    keep = nms_indices([d.box for d in dets], [d.score for d in dets], threshold)
    return [dets[i] for i in keep]


def clamp_box(box: BBox, width: int, height: int) -> BBox | None:
    """Clip a box to the image; ``None`` if nothing remains inside."""
    x1, y1 = max(box.x1, 0.0), max(box.y1, 0.0)
    x2, y2 = min(box.x2, float(width)), min(box.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    return BBox(x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# Text formats.  Detection files: ``frame,x1,y1,x2,y2,score`` per line.
# Track files: ``track_id,frame,x1,y1,x2,y2,score``.  Lines starting with '#'
# are comments.  Floats are written with repr() so files round-trip exactly.


def _fmt(v) -> str:
    return repr(float(v))


def write_detections(path, detections: Iterable[Detection]) -> None:
    path = Path(path)
    lines = [
        f"{d.frame_index},{_fmt(d.box.x1)},{_fmt(d.box.y1)},{_fmt(d.box.x2)},{_fmt(d.box.y2)},{_fmt(d.score)}"
        for d in detections
    ]
    path.write_text("".join(line + "\n" for line in lines))


def write_tracks(path, records: Iterable[tuple[int, Detection]]) -> None:
    path = Path(path)
    lines = [
        f"{tid},{d.frame_index},{_fmt(d.box.x1)},{_fmt(d.box.y1)},{_fmt(d.box.x2)},{_fmt(d.box.y2)},{_fmt(d.score)}"
        for tid, d in records
    ]
    path.write_text("".join(line + "\n" for line in lines))


def _parse_lines(path, nfields):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != nfields:
            raise FormatError(f"{path}:{lineno}: expected {nfields} fields, got {len(parts)}")
        try:
            ints = [int(p) for p in parts[: nfields - 5]]
            floats = [float(p) for p in parts[nfields - 5:]]
            box = BBox(*floats[:4])
            det = Detection(ints[-1], box, floats[4])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        rows.append((ints, det))
    return rows


def read_detections(path) -> list[Detection]:
    return [det for _, det in _parse_lines(path, 6)]


def read_tracks(path) -> list[tuple[int, Detection]]:
    return [(ints[0], det) for ints, det in _parse_lines(path, 7)]


def group_by_frame(detections: Iterable[Detection], num_frames: int) -> list[list[Detection]]:
    frames: list[list[Detection]] = [[] for _ in range(num_frames)]
    for d in detections:
        if d.frame_index >= num_frames:
            raise ValueError(f"detection frame {d.frame_index} beyond sequence length {num_frames}")
        frames[d.frame_index].append(d)
    return frames


def pseudo_gt_to_detections(gp, score: float = 1.0) -> list[Detection]:
    return [Detection(t, box, score) for t, boxes in enumerate(gp) for box in boxes]


def detections_to_pseudo_gt(detections: Iterable[Detection], num_frames: int):
    return [[d.box for d in frame] for frame in group_by_frame(detections, num_frames)]

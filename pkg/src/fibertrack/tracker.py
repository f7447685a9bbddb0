"""Kalman filter bank with Hungarian association over box centers.

Each fiber is tracked by a constant-velocity Kalman filter over the state
``(x1, y1, vx1, vy1, x2, y2, vx2, vy2)``, i.e. both box corners and their
per-frame velocities.  Predictions and detections are associated by a
minimum-total-distance matching on box centers, padded with dummy nodes so
that pairs further apart than two dummy edges stay unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .core import BBox, Detection, center_distance_matrix

POS_IDX = np.array([0, 1, 4, 5])


@dataclass
class TrackerConfig:
    dummy_cost: float = 100.0
    alpha: int = 5
    process_noise: float = 1.0
    measurement_noise: float = 4.0
    init_pos_var: float = 10.0
    init_vel_var: float = 100.0
    image_width: float | None = None
    image_height: float | None = None

    def __post_init__(self):
        if self.dummy_cost <= 0:
            raise ValueError("dummy_cost must be positive")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if min(self.process_noise, self.measurement_noise, self.init_pos_var, self.init_vel_var) <= 0:
            raise ValueError("noise parameters must be positive")

    def initial_covariance(self):
        p, v = self.init_pos_var, self.init_vel_var
        return np.diag([p, p, v, v, p, p, v, v]).astype(float)


@dataclass
class TrackState:
    id: int
    s: np.ndarray
    P: np.ndarray
    missed_count: int = 0
    history: list = field(default_factory=list)
    status: str = "active"

    @property
    def box(self) -> BBox:
        return state_to_box(self.s)

    @property
    def active(self):
        return self.status == "active"

    @property
    def last_frame(self):
        return self.history[-1][0] if self.history else None

    def entries(self):
        """Yield ``(frame, box, associated)`` history entries."""
        return iter(self.history)


def box_to_state(box: BBox) -> np.ndarray:
    return np.array([box.x1, box.y1, 0.0, 0.0, box.x2, box.y2, 0.0, 0.0])


def state_to_box(s) -> BBox:
    x1, y1, x2, y2 = s[0], s[1], s[4], s[5]
    # a filter may cross its corners under heavy noise; keep the box valid
    if x2 <= x1:
        cx = (x1 + x2) / 2
        x1, x2 = cx - 0.5, cx + 0.5
    if y2 <= y1:
        cy = (y1 + y2) / 2
        y1, y2 = cy - 0.5, cy + 0.5
    return BBox(float(x1), float(y1), float(x2), float(y2))


def transition_matrix():
    F = np.eye(8)
    F[0, 2] = F[1, 3] = F[4, 6] = F[5, 7] = 1.0
    return F


def measurement_matrix():
    H = np.zeros((4, 8))
    H[np.arange(4), POS_IDX] = 1.0
    return H


_F = transition_matrix()
_H = measurement_matrix()


def kalman_predict(t: TrackState, q: float) -> TrackState:
    s = _F @ t.s
    P = _F @ t.P @ _F.T + q * np.eye(8)
    return replace(t, s=s, P=P)


def kalman_correct(t: TrackState, z: BBox, r: float) -> TrackState:
    zv = np.array([z.x1, z.y1, z.x2, z.y2])
    S = _H @ t.P @ _H.T + r * np.eye(4)
    try:
        # K = P H^T S^-1, computed as a solve against the symmetric S
        K = np.linalg.solve(S, _H @ t.P).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular innovation covariance for track {t.id}") from exc
    s = t.s + K @ (zv - _H @ t.s)
    P = (np.eye(8) - K @ _H) @ t.P
    P = (P + P.T) / 2
    return replace(t, s=s, P=P)


# ---------------------------------------------------------------------------
# Assignment


def _shortest_augmenting_path(cost):
    """Hungarian method (shortest augmenting paths with potentials).

    Returns ``(col_of_row, u, v)`` for a square matrix, where ``u`` and ``v``
    are feasible dual potentials that are tight on the returned matching.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[j] = 1-based row matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    col_of_row[owner[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _lexicographic_optimum(tight, col_of_row):
    """Rewrite an optimal matching into the lexicographically smallest one.

    ``tight`` marks zero-reduced-cost edges; every perfect matching inside it
    is optimal.  Rows are fixed in order, each to the smallest tight column
    from which an alternating path leads back to the row's current column.
    """
    n = len(col_of_row)
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(n, dtype=int)
    row_of_col[col_of_row] = np.arange(n)
    fixed_cols = np.zeros(n, dtype=bool)
    for i in range(n):
        c = col_of_row[i]
        candidates = np.flatnonzero(tight[i] & ~fixed_cols)
        if candidates[0] == c:
            fixed_cols[c] = True
            continue
        # edge x -> y when the row owning column x has a tight edge to y
        adj = tight[row_of_col]
        nxt = np.full(n, -1)
        reached = np.zeros(n, dtype=bool)
        reached[c] = True
        frontier = np.zeros(n, dtype=bool)
        frontier[c] = True
        blocked = fixed_cols.copy()
        while frontier.any():
            hits = adj[:, frontier]
            new = hits.any(axis=1) & ~reached & ~blocked
            if not new.any():
                break
            fcols = np.flatnonzero(frontier)
            nxt[new] = fcols[np.argmax(hits[new], axis=1)]
            reached |= new
            frontier = new
        j = int(candidates[reached[candidates]][0])
        if j != c:
            x = j
            col_of_row[i] = j
            while x != c:
                y = nxt[x]
                r = row_of_col[x]
                col_of_row[r] = y
                x = y
            row_of_col[col_of_row] = np.arange(n)
        fixed_cols[j] = True
    return col_of_row


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment on a non-negative cost matrix.

    Rectangular inputs are zero-padded to square; only pairs inside the
    original matrix are returned.  Among equal-cost optima the assignment
    whose column sequence is lexicographically smallest is chosen.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("cost matrix must be finite and non-negative")
    size = max(n, m)
    square = np.zeros((size, size))
    square[:n, :m] = cost
    col_of_row, u, v = _shortest_augmenting_path(square)
    reduced = square - u[:, None] - v[None, :]
    tol = 1e-9 * max(1.0, float(square.max())) * size
    col_of_row = _lexicographic_optimum(reduced <= tol, col_of_row)
    return [(i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m]


def associate(predictions: Sequence[BBox], detections: Sequence[BBox], dummy_cost: float):
    """Match predicted boxes to detected boxes by center distance.

    Returns ``(matches, unmatched_predictions, unmatched_detections)`` where
    ``matches`` holds ``(prediction_index, detection_index)`` pairs.
    """
    n, m = len(predictions), len(detections)
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    size = n + m
    cost = np.zeros((size, size))
    cost[:n, :m] = center_distance_matrix(predictions, detections)
    cost[:n, m:] = dummy_cost
    cost[n:, :m] = dummy_cost
    assignment = hungarian(cost)
    matches = [(i, j) for i, j in assignment if i < n and j < m]
    matched_p = {i for i, _ in matches}
    matched_d = {j for _, j in matches}
    return (
        matches,
        [i for i in range(n) if i not in matched_p],
        [j for j in range(m) if j not in matched_d],
    )


# ---------------------------------------------------------------------------
# Track lifecycle


def _as_boxes(detections):
    return [d.box if isinstance(d, Detection) else d for d in detections]


def _outside(box: BBox, cfg: TrackerConfig):
    if cfg.image_width is None or cfg.image_height is None:
        return False
    cx, cy = box.center
    return not (0 <= cx < cfg.image_width and 0 <= cy < cfg.image_height)


def track_step(tracks: list[TrackState], detections_t, cfg: TrackerConfig, frame_index: int,
               next_id: int | None = None) -> list[TrackState]:
    """Advance the track bank by one frame.

    Dead tracks are carried along unchanged so that the returned list holds
    every track ever born.  New ids continue from the largest existing id.
    """
    boxes = _as_boxes(detections_t)
    if next_id is None:
        next_id = max((t.id for t in tracks), default=-1) + 1
    out = []
    live = []
    for t in tracks:
        if not t.active:
            out.append(t)
            continue
        t = kalman_predict(t, cfg.process_noise)
        if _outside(t.box, cfg):
            t = replace(t, status="dead")
            out.append(t)
            continue
        live.append(len(out))
        out.append(t)

    matches, lost, born = associate([out[k].box for k in live], boxes, cfg.dummy_cost)
    for pi, di in matches:
        k = live[pi]
        t = kalman_correct(out[k], boxes[di], cfg.measurement_noise)
        out[k] = replace(t, missed_count=0, history=t.history + [(frame_index, t.box, True)])
    for pi in lost:
        k = live[pi]
        t = out[k]
        missed = t.missed_count + 1
        out[k] = replace(
            t,
            missed_count=missed,
            history=t.history + [(frame_index, t.box, False)],
            status="dead" if missed >= cfg.alpha else "active",
        )
    for di in born:
        box = boxes[di]
        out.append(TrackState(
            id=next_id,
            s=box_to_state(box),
            P=cfg.initial_covariance(),
            history=[(frame_index, box, True)],
        ))
        next_id += 1
    return out


def track_sequence(detections_per_frame, cfg: TrackerConfig) -> list[TrackState]:
    """Run the tracker over an ordered sequence of per-frame detections."""
    tracks: list[TrackState] = []
    next_id = 0
    for t, dets in enumerate(detections_per_frame):
        tracks = track_step(tracks, dets, cfg, t, next_id=next_id)
        next_id = max((tr.id for tr in tracks), default=-1) + 1
    return tracks


def tracks_to_records(tracks: Sequence[TrackState]) -> list[tuple[int, Detection]]:
    """Flatten tracks for the track file format (score 1 associated, 0 predicted)."""
    records = []
    for t in tracks:
        for frame, box, assoc in t.history:
            records.append((t.id, Detection(frame, box, 1.0 if assoc else 0.0)))
    records.sort(key=lambda r: (r[1].frame_index, r[0]))
    return records


class KalmanBoxTracker(BaseEstimator):
    """Estimator-style wrapper; ``fit`` consumes per-frame detections."""

    def __init__(self, dummy_cost=100.0, alpha=5, process_noise=1.0, measurement_noise=4.0,
                 init_pos_var=10.0, init_vel_var=100.0, image_width=None, image_height=None):
        self.dummy_cost = dummy_cost
        self.alpha = alpha
        self.process_noise = process_noise
        self.measurement_noise = measurement_noise
        self.init_pos_var = init_pos_var
        self.init_vel_var = init_vel_var
        self.image_width = image_width
        self.image_height = image_height

    def fit(self, detections_per_frame, y=None):
        self.tracks_ = track_sequence(detections_per_frame, TrackerConfig(**self.get_params()))
        return self

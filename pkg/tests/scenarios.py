"""Hand-built detection sequences for the spatio-temporal rules."""

from itertools import permutations

import numpy as np

from fibertrack.core import BBox


def moving_box(t, x0, y0, vx=1.0, vy=0.5, w=12.0, h=10.0):
    return BBox(x0 + vx * t, y0 + vy * t, x0 + vx * t + w, y0 + vy * t + h)


def sequence(num_frames, fibers, extra=None):
    """``fibers``: list of ``(x0, y0, frames_present)``; ``extra``: ``{frame: [BBox]}``."""
    out = [[] for _ in range(num_frames)]
    for x0, y0, present in fibers:
        for t in present:
            out[t].append(moving_box(t, x0, y0))
    for t, boxes in (extra or {}).items():
        out[t].extend(boxes)
    return out


def gap_fill(num_frames=12, gap=6):
    """One fiber, detection missing at a single middle frame."""
    return sequence(num_frames, [(20, 20, [t for t in range(num_frames) if t != gap])])


def persistent_birth(num_frames=12, start=4):
    """A second fiber first detected mid-sequence and then every frame."""
    return sequence(num_frames, [(20, 20, range(num_frames)), (120, 40, range(start, num_frames))])


def transient_fp(num_frames=12, at=5):
    """One true fiber plus a single-frame spurious box far away."""
    return sequence(num_frames, [(20, 20, range(num_frames))], extra={at: [BBox(150, 150, 162, 160)]})


def track_of_length(n, num_frames=12, start=0):
    return sequence(num_frames, [(40, 40, range(start, start + n))])


def brute_force_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in permutations(range(n), m))


def textbook_kalman(s, P, z, q, r):
    """Predict and correct written out directly from the textbook equations."""
    F = np.eye(8)
    for i in (0, 1, 4, 5):
        F[i, i + 2] = 1.0
    H = np.zeros((4, 8))
    for row, col in enumerate((0, 1, 4, 5)):
        H[row, col] = 1.0
    s_pred = F @ s
    P_pred = F @ P @ F.T + q * np.eye(8)
    S = H @ P_pred @ H.T + r * np.eye(4)
    K = P_pred @ H.T @ np.linalg.inv(S)
    s_new = s_pred + K @ (z - H @ s_pred)
    P_new = (np.eye(8) - K @ H) @ P_pred
    return s_new, P_new

"""Iteration-0 pseudo ground truth.

Two unsupervised routes produce the first per-frame fiber boxes:

``emmpmh``
    EM/MPM segmentation, the darkest class as fiber mask, pair-of-points
    Hough ellipse detection on the mask boundary, and the minimum bounding
    box of every ellipse.
``proposals``
    A generic scored-box proposal source, filtered by a size prior derived
    from the mean EMMPMH box area on the first frame, then NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .core import BBox, Detection, nms
from .segmentation import EmMpmParams, class_mask, emmpm_segment


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0
    votes: int = 0

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"ellipse axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")


@dataclass
class HoughParams:
    min_semi_axis: float = 3.0
    max_semi_axis: float = 12.0
    vote_fraction: float = 0.5
    bin_width: float = 1.0
    # boundary pixel centres sit about half a pixel inside the true edge
    raster_correction: float = 0.5

    def __post_init__(self):
        if not 0 < self.min_semi_axis <= self.max_semi_axis:
            raise ValueError("need 0 < min_semi_axis <= max_semi_axis")
        if not 0 < self.vote_fraction <= 1:
            raise ValueError("vote_fraction must lie in (0, 1]")


@dataclass
class InitConfig:
    method: str = "emmpmh"
    size_prior_low_factor: float = 0.2
    size_prior_high_factor: float = 2.0
    proposal_nms: float = 0.1
    hough: HoughParams = field(default_factory=HoughParams)
    emmpm: EmMpmParams = field(default_factory=EmMpmParams)

    def __post_init__(self):
        if isinstance(self.hough, dict):
            self.hough = HoughParams(**self.hough)
        if isinstance(self.emmpm, dict):
            self.emmpm = EmMpmParams(**self.emmpm)
        if self.method not in ("emmpmh", "proposals"):
            raise ValueError(f"unknown init method {self.method!r}")
        if not 0 < self.size_prior_low_factor < self.size_prior_high_factor:
            raise ValueError("need 0 < size_prior_low_factor < size_prior_high_factor")


def min_bbox(e: Ellipse) -> BBox:
    c, s = math.cos(e.theta), math.sin(e.theta)
    hw = math.sqrt((e.a * c) ** 2 + (e.b * s) ** 2)
    hh = math.sqrt((e.a * s) ** 2 + (e.b * c) ** 2)
    return BBox(e.cx - hw, e.cy - hh, e.cx + hw, e.cy + hh)


def ellipse_perimeter(a, b):
    """Ramanujan's second approximation."""
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


def expected_boundary_count(a, b):
    """Boundary pixels of a rasterised ellipse, roughly pi/4 of its perimeter."""
    return math.pi / 4 * ellipse_perimeter(a, b)


def boundary_points(mask) -> np.ndarray:
    """Pixel centres of mask pixels with a 4-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    ys, xs = np.nonzero(mask & ~inner)
    return np.column_stack([xs + 0.5, ys + 0.5])


def _component_candidates(pts, hp: HoughParams, budget=1_000_000):
    """Score every admissible major-axis endpoint pair of one boundary."""
    n = len(pts)
    if n < 5:
        return []
    i, j = np.triu_indices(n, k=1)
    d = np.hypot(*(pts[j] - pts[i]).T)
    ok = (d >= 2 * hp.min_semi_axis) & (d <= 2 * hp.max_semi_axis)
    i, j, d = i[ok], j[ok], d[ok]
    if len(i) == 0:
        return []
    nbins = int(math.ceil(hp.max_semi_axis / hp.bin_width)) + 3
    chunk = max(1, budget // n)
    out = []
    for start in range(0, len(i), chunk):
        pi, pj, dd = i[start:start + chunk], j[start:start + chunk], d[start:start + chunk]
        centre = (pts[pi] + pts[pj]) / 2
        a = dd / 2
        # third points: distance to centre (delta) and to the second endpoint (f)
        delta = np.hypot(pts[None, :, 0] - centre[:, None, 0], pts[None, :, 1] - centre[:, None, 1])
        f = np.hypot(pts[None, :, 0] - pts[pj][:, None, 0], pts[None, :, 1] - pts[pj][:, None, 1])
        A = a[:, None]
        valid = (delta > 1e-9) & (delta < A)
        cos_t = np.clip((A ** 2 + delta ** 2 - f ** 2) / (2 * A * np.where(valid, delta, 1.0)), -1, 1)
        denom = A ** 2 - delta ** 2 * cos_t ** 2
        valid &= denom > 1e-9
        b2 = A ** 2 * delta ** 2 * (1 - cos_t ** 2) / np.where(valid, denom, 1.0)
        b = np.sqrt(np.clip(b2, 0, None))
        valid &= (b >= hp.min_semi_axis - hp.raster_correction) & (b <= A)
        bins = np.where(valid, np.floor(b / hp.bin_width).astype(int), nbins - 1)
        bins = np.clip(bins, 0, nbins - 1)
        hist = np.zeros((len(pi), nbins))
        np.add.at(hist, (np.repeat(np.arange(len(pi)), n), bins.ravel()), valid.ravel())
        hist[:, -1] = 0
        # pixelised boundaries spread the minor-axis votes over neighbouring bins
        smooth = hist[:, :-2] + hist[:, 1:-1] + hist[:, 2:]
        peak = np.argmax(smooth, axis=1)
        votes = smooth[np.arange(len(pi)), peak]
        lo, hi = peak * hp.bin_width, (peak + 3) * hp.bin_width
        inwin = valid & (b >= lo[:, None]) & (b < hi[:, None])
        bsum = (b * inwin).sum(axis=1)
        bcnt = inwin.sum(axis=1)
        for k in np.flatnonzero(bcnt > 0):
            out.append((float(votes[k]), centre[k, 0], centre[k, 1], float(a[k]), float(bsum[k] / bcnt[k]),
                        pts[pj[k]] - pts[pi[k]]))
    return out


def hough_ellipses(mask, cfg: HoughParams | InitConfig | None = None) -> list[Ellipse]:
    """Detect ellipses on the boundary of a binary mask (pair-of-points Hough).

    For every pair of boundary points whose separation could be a major
    axis, the centre, orientation and semi-major axis follow directly; every
    third boundary point then votes for a semi-minor axis length.  Pairs whose
    best minor-axis window reaches ``vote_fraction`` of the expected boundary
    pixel count become candidates, accepted greedily by votes and deduplicated by
    centre distance.
    """
    if isinstance(cfg, InitConfig):
        cfg = cfg.hough
    hp = cfg or HoughParams()
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, ncomp = ndimage.label(mask, structure=np.ones((3, 3)))
    pts_all = boundary_points(mask)
    comp_of_pt = labels[(pts_all[:, 1] - 0.5).astype(int), (pts_all[:, 0] - 0.5).astype(int)]
    order = np.argsort(comp_of_pt, kind="stable")
    pts_all, comp_of_pt = pts_all[order], comp_of_pt[order]
    splits = np.searchsorted(comp_of_pt, np.arange(1, ncomp + 2))
    rc = hp.raster_correction
    candidates = []
    for c in range(ncomp):
        pts = pts_all[splits[c]:splits[c + 1]]
        for votes, cx, cy, a, b, axis in _component_candidates(pts, hp):
            a_c, b_c = a + rc, min(b + rc, a + rc)
            if votes < hp.vote_fraction * expected_boundary_count(a_c, b_c):
                continue
            theta = math.atan2(axis[1], axis[0]) % math.pi
            candidates.append((votes, cx, cy, a_c, b_c, theta))
    # strongest first; coordinates break ties deterministically
    candidates.sort(key=lambda r: (-r[0], r[2], r[1], r[3]))
    accepted: list[Ellipse] = []
    for votes, cx, cy, a, b, theta in candidates:
        if any(math.hypot(cx - e.cx, cy - e.cy) < e.b for e in accepted):
            continue
        accepted.append(Ellipse(float(cx), float(cy), float(a), float(b), float(theta), int(votes)))
    return accepted


def size_prior_filter(boxes, mean_area: float, low_factor: float = 0.2, high_factor: float = 2.0):
    """Keep boxes whose area lies in ``[low_factor, high_factor] * mean_area``."""
    if mean_area <= 0:
        raise ValueError(f"mean_area must be positive, got {mean_area}")
    lo, hi = low_factor * mean_area, high_factor * mean_area
    return [b for b in boxes if lo <= (b.box if isinstance(b, Detection) else b).area <= hi]


# ---------------------------------------------------------------------------
# Proposal source (stands in for a generic object-proposal method)


def blob_proposals(image, sigmas=(1.0, 2.0), thresholds=(1.0, 1.5, 2.0)) -> list[tuple[BBox, float]]:
    """Connected components of thresholded gradient-magnitude maps.

    Several smoothing scales and thresholds give deliberately redundant,
    heavily overlapping boxes.  Scores are the mean normalized gradient
    magnitude inside each component.
    """
    img = np.asarray(image, dtype=float)
    out = []
    for s in sigmas:
        mag = ndimage.gaussian_gradient_magnitude(img, sigma=s)
        norm = mag / (mag.max() + 1e-12)
        mu, sd = mag.mean(), mag.std()
        for k in thresholds:
            labels, n = ndimage.label(mag > mu + k * sd, structure=np.ones((3, 3)))
            if n == 0:
                continue
            slices = ndimage.find_objects(labels)
            means = ndimage.mean(norm, labels, index=np.arange(1, n + 1))
            for sl, score in zip(slices, means):
                ys, xs = sl
                out.append((BBox(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop)),
                            float(np.clip(score, 0, 1))))
    return out


ProposalSource = Callable[[np.ndarray], list]


# ---------------------------------------------------------------------------


def frame_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def emmpmh_boxes(image, cfg: InitConfig, seed: int | None = None) -> list[BBox]:
    params = cfg.emmpm if seed is None else EmMpmParams(**{**cfg.emmpm.__dict__, "rng_seed": seed})
    labelmap = emmpm_segment(image, params)
    mask = class_mask(labelmap, image)
    return [min_bbox(e) for e in hough_ellipses(mask, cfg.hough)]


def _inside(box: BBox, shape):
    cx, cy = box.center
    return 0 <= cx < shape[1] and 0 <= cy < shape[0]


def mean_box_area(boxes) -> float:
    if not boxes:
        raise ValueError("cannot derive a size prior: no EMMPMH detections on the sample frame")
    return float(np.mean([b.area for b in boxes]))


def initialize_pseudo_gt(frames, cfg: InitConfig | None = None, proposal_source: ProposalSource | None = None,
                         map_fn=map, sample_boxes=None):
    """Build the iteration-0 pseudo ground truth, one box list per frame.

    ``frames`` may be a dataset or a list of images.  ``sample_boxes`` can
    carry precomputed EMMPMH boxes of the first frame for the size prior.
    """
    cfg = cfg or InitConfig()
    frames = list(getattr(frames, "frames", frames))
    if not frames:
        raise ValueError("cannot initialize an empty sequence")
    seed = cfg.emmpm.rng_seed
    if cfg.method == "emmpmh":
        def run(t):
            boxes = emmpmh_boxes(frames[t], cfg, frame_seed(seed, t))
            return [b for b in boxes if _inside(b, frames[t].shape)]
        return list(map_fn(run, range(len(frames))))

    source = proposal_source or blob_proposals
    if sample_boxes is None:
        sample_boxes = emmpmh_boxes(frames[0], cfg, frame_seed(seed, 0))
    area = mean_box_area(sample_boxes)

    def run(t):
        dets = []
        for item in source(frames[t]):
            box, score = (item.box, item.score) if isinstance(item, Detection) else item
            dets.append(Detection(t, box, float(score)))
        dets = size_prior_filter(dets, area, cfg.size_prior_low_factor, cfg.size_prior_high_factor)
        return [d.box for d in nms(dets, cfg.proposal_nms) if _inside(d.box, frames[t].shape)]

    return list(map_fn(run, range(len(frames))))

"""Synthetic serial-section sequences with complete ground truth.

Fibers are near-vertical tubes sliced at constant spacing: each one drifts
with a constant velocity plus a small smooth wobble, and its cross-section
is a dark filled ellipse elongated along the drift direction.  A chosen
fraction of frames receives local degradations, either a defocus disc
(local Gaussian blur) or a stain blob (soft-edged darkening).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .core import Detection, read_tracks, write_tracks
from .initializer import Ellipse, min_bbox

FRAME_PATTERN = "frame_%04d.png"
GT_FILE = "gt.txt"
META_FILE = "dataset.json"


@dataclass
class SynthConfig:
    width: int = 256
    height: int = 256
    num_frames: int = 25
    num_fibers: int = 40
    mean_radius: float = 6.0
    radius_sd: float = 0.6
    max_aspect: float = 1.25
    max_drift_velocity: float = 1.0
    wobble_amplitude: float = 0.5
    degradation_frame_fraction: float = 0.3
    blur_disc_radius_range: tuple = (25.0, 50.0)
    stain_blob_radius_range: tuple = (25.0, 50.0)
    stain_intensity_offset: float = 100.0
    background_level: float = 180.0
    fiber_level: float = 75.0
    noise_sd: float = 8.0
    min_center_separation: float = 18.0
    rng_seed: int = 0

    def __post_init__(self):
        self.blur_disc_radius_range = tuple(float(v) for v in self.blur_disc_radius_range)
        self.stain_blob_radius_range = tuple(float(v) for v in self.stain_blob_radius_range)
        if min(self.width, self.height, self.num_frames) <= 0 or self.num_fibers < 0:
            raise ValueError("image size and frame count must be positive")
        if self.mean_radius <= 0 or self.radius_sd < 0 or self.max_aspect < 1:
            raise ValueError("invalid fiber radius/aspect parameters")
        if not 0.0 <= self.degradation_frame_fraction <= 1.0:
            raise ValueError("degradation_frame_fraction must lie in [0, 1]")
        if self.min_center_separation < 2 * self.mean_radius:
            raise ValueError("min_center_separation must be at least 2 * mean_radius")
        if self.max_drift_velocity < 0 or self.noise_sd < 0 or self.wobble_amplitude < 0:
            raise ValueError("drift, wobble and noise must be non-negative")
        for lo, hi in (self.blur_disc_radius_range, self.stain_blob_radius_range):
            if not 0 < lo <= hi:
                raise ValueError("radius ranges must satisfy 0 < low <= high")

    def num_degraded_frames(self):
        # round half up; 0.3 * 25 is 7.4999... in binary floating point
        return int(math.floor(self.degradation_frame_fraction * self.num_frames + 0.5 + 1e-9))


@dataclass
class SequenceDataset:
    frames: list
    gt_boxes: list | None = None
    degraded_flags: list = field(default_factory=list)
    degradations: list = field(default_factory=list)
    config: dict | None = None

    def __post_init__(self):
        if not self.degraded_flags:
            self.degraded_flags = [False] * len(self.frames)
        if not self.degradations:
            self.degradations = [[] for _ in self.frames]

    def __len__(self):
        return len(self.frames)

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape if self.frames else (0, 0)

    @property
    def has_gt(self):
        return self.gt_boxes is not None

    def gt_per_frame(self):
        """Ground truth as one list of boxes per frame (ids dropped)."""
        return [[box for _, box in frame] for frame in self.gt_boxes]

    def gt_records(self):
        return [(fid, Detection(t, box, 1.0)) for t, frame in enumerate(self.gt_boxes) for fid, box in frame]

    def __eq__(self, other):
        if not isinstance(other, SequenceDataset) or len(self) != len(other):
            return NotImplemented if not isinstance(other, SequenceDataset) else False
        return (
            all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
            and self.gt_boxes == other.gt_boxes
            and list(self.degraded_flags) == list(other.degraded_flags)
        )


# ---------------------------------------------------------------------------
# Trajectories


def _wobble(t, amp, period, phase):
    return amp * np.sin(2 * np.pi * t / period + phase)


def _sample_trajectories(cfg: SynthConfig, rng, max_retries=2000):
    T = cfg.num_frames
    t = np.arange(T, dtype=float)
    vmax = cfg.max_drift_velocity
    min_period = 10.0
    # keep each per-frame step within vmax * sqrt(2)
    amp_cap = (math.sqrt(2) - 1) * vmax * min_period / (2 * np.pi)
    amp = min(cfg.wobble_amplitude, amp_cap)
    fibers = []
    centers = np.zeros((0, T, 2))
    for fid in range(cfg.num_fibers):
        r = float(np.clip(rng.normal(cfg.mean_radius, cfg.radius_sd), 0.6 * cfg.mean_radius, 1.4 * cfg.mean_radius))
        aspect = float(rng.uniform(1.0, cfg.max_aspect))
        a, b = r * aspect, r
        margin = a + 2.0
        for _ in range(max_retries):
            speed = vmax * math.sqrt(rng.uniform())
            heading = rng.uniform(0, 2 * np.pi)
            vx, vy = speed * math.cos(heading), speed * math.sin(heading)
            periods = rng.uniform(min_period, 3 * min_period, size=2)
            phases = rng.uniform(0, 2 * np.pi, size=2)
            x0 = rng.uniform(margin, cfg.width - margin)
            y0 = rng.uniform(margin, cfg.height - margin)
            cx = x0 + vx * t + _wobble(t, amp, periods[0], phases[0])
            cy = y0 + vy * t + _wobble(t, amp, periods[1], phases[1])
            if cx.min() < margin or cx.max() > cfg.width - margin:
                continue
            if cy.min() < margin or cy.max() > cfg.height - margin:
                continue
            path = np.stack([cx, cy], axis=1)
            if len(centers):
                d = np.linalg.norm(centers - path[None], axis=2)
                if d.min() < cfg.min_center_separation:
                    continue
            break
        else:
            raise ValueError(
                f"could not place fiber {fid} of {cfg.num_fibers} with separation "
                f"{cfg.min_center_separation} px after {max_retries} attempts"
            )
        theta = math.atan2(vy, vx) % np.pi if speed > 1e-6 else float(rng.uniform(0, np.pi))
        contrast_jitter = float(rng.normal(0.0, 5.0))
        fibers.append(dict(a=a, b=b, theta=theta, path=path, level=cfg.fiber_level + contrast_jitter))
        centers = np.concatenate([centers, path[None]], axis=0)
    return fibers


# ---------------------------------------------------------------------------
# Rendering


def ellipse_coverage(shape, cx, cy, a, b, theta, supersample=4):
    """Fractional pixel coverage of a filled ellipse, as a float image.

    Pixel ``(row, col)`` spans ``[col, col+1) x [row, row+1)`` in continuous
    coordinates.
    """
    h, w = shape
    out = np.zeros(shape)
    ext = max(a, b) + 1
    c0, c1 = max(int(math.floor(cx - ext)), 0), min(int(math.ceil(cx + ext)) + 1, w)
    r0, r1 = max(int(math.floor(cy - ext)), 0), min(int(math.ceil(cy + ext)) + 1, h)
    if c0 >= c1 or r0 >= r1:
        return out
    offs = (np.arange(supersample) + 0.5) / supersample
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).ravel()
    X, Y = np.meshgrid(xs - cx, ys - cy)
    ct, st = math.cos(theta), math.sin(theta)
    u = X * ct + Y * st
    v = -X * st + Y * ct
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    cov = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    out[r0:r1, c0:c1] = cov
    return out


def _soft_disc(shape, cx, cy, radius, edge=3.0):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy)
    return 1.0 / (1.0 + np.exp((d - radius) / edge))


def _apply_degradations(img, events, cfg: SynthConfig):
    for ev in events:
        mask = _soft_disc(img.shape, ev["cx"], ev["cy"], ev["radius"])
        if ev["kind"] == "blur":
            sigma = ev["radius"] / 6.0
            blurred = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)
            img = img * (1 - mask) + blurred * mask
        else:
            img = img - cfg.stain_intensity_offset * mask
    return img


def _render_frame(cfg: SynthConfig, fibers, t, events, seed_seq):
    rng = np.random.default_rng(seed_seq)
    shape = (cfg.height, cfg.width)
    img = np.full(shape, cfg.background_level, dtype=float)
    for f in fibers:
        cx, cy = f["path"][t]
        cov = ellipse_coverage(shape, cx, cy, f["a"], f["b"], f["theta"])
        img -= (cfg.background_level - f["level"]) * cov
    img = _apply_degradations(img, events, cfg)
    img += rng.normal(0.0, cfg.noise_sd, size=shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _sample_events(cfg: SynthConfig, rng):
    events = []
    for _ in range(int(rng.integers(1, 4))):
        kind = "blur" if rng.uniform() < 0.5 else "stain"
        lo, hi = cfg.blur_disc_radius_range if kind == "blur" else cfg.stain_blob_radius_range
        events.append(dict(
            kind=kind,
            cx=float(rng.uniform(0, cfg.width)),
            cy=float(rng.uniform(0, cfg.height)),
            radius=float(rng.uniform(lo, hi)),
        ))
    return events


def generate(config: SynthConfig | None = None, map_fn=map) -> SequenceDataset:
    """Generate a synthetic sequence; deterministic given ``config.rng_seed``.

    ``map_fn`` lets callers render frames through a parallel map; output does
    not depend on it because every frame draws from its own seed stream.
    """
    cfg = config or SynthConfig()
    root = np.random.SeedSequence(cfg.rng_seed)
    traj_seq, event_seq, *frame_seqs = root.spawn(2 + cfg.num_frames)
    fibers = _sample_trajectories(cfg, np.random.default_rng(traj_seq))

    erng = np.random.default_rng(event_seq)
    n_bad = cfg.num_degraded_frames()
    bad = set(int(i) for i in erng.choice(cfg.num_frames, size=n_bad, replace=False)) if n_bad else set()
    events = [_sample_events(cfg, erng) if t in bad else [] for t in range(cfg.num_frames)]

    frames = list(map_fn(
        lambda t: _render_frame(cfg, fibers, t, events[t], frame_seqs[t]),
        range(cfg.num_frames),
    ))
    gt = []
    for t in range(cfg.num_frames):
        row = []
        for fid, f in enumerate(fibers):
            cx, cy = f["path"][t]
            row.append((fid, min_bbox(Ellipse(float(cx), float(cy), f["a"], f["b"], f["theta"]))))
        gt.append(row)
    return SequenceDataset(
        frames=frames,
        gt_boxes=gt,
        degraded_flags=[t in bad for t in range(cfg.num_frames)],
        degradations=events,
        config=asdict(cfg),
    )


# ---------------------------------------------------------------------------
# Disk layout: frame_%04d.png, gt.txt (track format), dataset.json (flags)


def export(dataset: SequenceDataset, directory) -> None:
    if directory is None or str(directory).strip() == "":
        raise ValueError("export directory path is empty")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {directory}: {exc}") from exc
    for t, frame in enumerate(dataset.frames):
        path = directory / (FRAME_PATTERN % t)
        if not cv2.imwrite(str(path), frame):
            raise OSError(f"failed to write {path}")
    if dataset.gt_boxes is not None:
        write_tracks(directory / GT_FILE, dataset.gt_records())
    meta = {
        "num_frames": dataset.num_frames,
        "degraded_flags": [bool(f) for f in dataset.degraded_flags],
        "degradations": dataset.degradations,
        "config": dataset.config,
    }
    (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load(directory) -> SequenceDataset:
    """Read a dataset directory written by :func:`export`.

    Directories holding only ``frame_*.png`` images load with ``gt_boxes``
    set to ``None``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png images in {directory}")
    frames = []
    for p in paths:
        img = cv2.imread(str(p), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise OSError(f"cannot read image {p}")
        if img.ndim == 3:
            img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
        frames.append(img.astype(np.uint8))
    meta_path = directory / META_FILE
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    gt = None
    if (directory / GT_FILE).exists():
        gt = [[] for _ in frames]
        for fid, det in read_tracks(directory / GT_FILE):
            if det.frame_index >= len(frames):
                raise ValueError(f"{directory / GT_FILE}: frame {det.frame_index} beyond {len(frames)} images")
            gt[det.frame_index].append((fid, det.box))
        for row in gt:
            row.sort(key=lambda r: r[0])
    return SequenceDataset(
        frames=frames,
        gt_boxes=gt,
        degraded_flags=meta.get("degraded_flags", []),
        degradations=meta.get("degradations", []),
        config=meta.get("config"),
    )

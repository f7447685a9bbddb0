"""Trainable sliding-window fiber detector.

The detector keeps the training contract of a two-class region detector:
samples overlapping a pseudo ground-truth box by more than ``iou_pos`` are
positives, samples below ``iou_neg`` against every box are negatives, and
training minimizes a logistic classification loss plus ``reg_weight`` times
a smooth-L1 box-regression loss on the positives.

Features of a box are a ``patch_size`` square resampling of the box grown by
``context`` (mean/variance normalized) followed by a magnitude-weighted
histogram of signed gradient orientations over the patch interior.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import fft, ndimage
from sklearn.base import BaseEstimator, ClassifierMixin

from .core import BBox, Detection, check_box_array, iou_matrix, nms_indices

MODEL_VERSION = "fibertrack-detector/1"
MIN_PATCH_STD = 1.0


class TrainingError(RuntimeError):
    pass


class ModelVersionError(ValueError):
    pass


@dataclass
class DetectorConfig:
    patch_size: int = 24
    context: float = 2.0
    orientation_bins: int = 8
    num_scales: int = 7
    score_threshold: float = 0.5
    detector_nms: float = 0.3
    iou_pos: float = 0.7
    iou_neg: float = 0.3
    neg_per_pos: float = 3.0
    jitter_per_box: int = 2
    near_negative_fraction: float = 0.5
    per_frame_cap: int = 256
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    l2: float = 1e-4
    reg_weight: float = 1.0
    size_prior_low_factor: float = 0.2
    size_prior_high_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 4 or self.context < 1 or self.orientation_bins < 1:
            raise ValueError("invalid feature layout")
        if not 0 < self.score_threshold < 1:
            raise ValueError("score_threshold must lie in (0, 1)")
        if not 0 <= self.iou_neg <= self.iou_pos <= 1:
            raise ValueError("need 0 <= iou_neg <= iou_pos <= 1")
        if self.num_scales < 1 or self.batch_size < 1 or self.per_frame_cap < 2:
            raise ValueError("num_scales, batch_size and per_frame_cap must be positive")

    @property
    def feature_dim(self):
        return self.patch_size ** 2 + self.orientation_bins


@dataclass
class DetectorModel:
    config: DetectorConfig
    scales: np.ndarray
    w: np.ndarray
    b: float
    reg_w: np.ndarray
    reg_b: np.ndarray
    epochs_seen: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        arrays = (self.w, self.reg_w, self.reg_b, np.asarray(self.b), self.scales)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("model weights must be finite")
        if len(self.scales) == 0:
            raise ValueError("scale list must be non-empty")

    def params(self):
        return np.concatenate([self.w, [self.b], self.reg_w.ravel(), self.reg_b])

    def with_params(self, theta):
        d = self.config.feature_dim
        w, b = theta[:d], float(theta[d])
        reg_w = theta[d + 1:d + 1 + 4 * d].reshape(4, d)
        reg_b = theta[d + 1 + 4 * d:]
        return replace(self, w=w.copy(), b=b, reg_w=reg_w.copy(), reg_b=reg_b.copy())

    def decision_function(self, X):
        return X @ self.w + self.b

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))

    def regress(self, X):
        return X @ self.reg_w.T + self.reg_b


@dataclass
class SampleSet:
    X: np.ndarray
    y: np.ndarray
    boxes: np.ndarray
    frames: np.ndarray
    targets: np.ndarray
    mean_area: float

    def __len__(self):
        return len(self.y)

    @property
    def positives(self):
        idx = np.flatnonzero(self.y == 1)
        return [(int(self.frames[i]), BBox(*self.boxes[i]), self.X[i]) for i in idx]

    @property
    def negatives(self):
        idx = np.flatnonzero(self.y == 0)
        return [(int(self.frames[i]), BBox(*self.boxes[i]), self.X[i]) for i in idx]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# Features


def _sample_grid(image, xs, ys):
    """Bilinear samples at continuous coordinates (pixel centres at +0.5)."""
    coords = np.stack([ys - 0.5, xs - 0.5])
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest")


def _orientation_maps(patch_like, nbins):
    """Per-bin gradient magnitude maps (central differences, interior only)."""
    gx = np.zeros_like(patch_like)
    gy = np.zeros_like(patch_like)
    gx[..., :, 1:-1] = (patch_like[..., :, 2:] - patch_like[..., :, :-2]) / 2
    gy[..., 1:-1, :] = (patch_like[..., 2:, :] - patch_like[..., :-2, :]) / 2
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    # linear vote split between the two nearest bin centres (circular), so
    # the histogram is continuous in the gradient angle
    pos = (ang + np.pi) / (2 * np.pi) * nbins - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(int) % nbins
    hi = (lo + 1) % nbins
    return [mag * ((lo == k) * (1 - frac) + (hi == k) * frac) for k in range(nbins)]


def _normalize_hist(h):
    return h / np.sqrt((h ** 2).sum(axis=-1, keepdims=True) + 1e-12)


def extract_features(image, boxes, cfg: DetectorConfig) -> np.ndarray:
    """Feature rows for arbitrary boxes on one image."""
    boxes = check_box_array(boxes)
    P = cfg.patch_size
    if len(boxes) == 0:
        return np.zeros((0, cfg.feature_dim))
    img = np.asarray(image, dtype=float)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    rw = (boxes[:, 2] - boxes[:, 0]) * cfg.context
    rh = (boxes[:, 3] - boxes[:, 1]) * cfg.context
    g = (np.arange(P) + 0.5) / P
    xs = (cx - rw / 2)[:, None, None] + rw[:, None, None] * g[None, None, :]
    ys = (cy - rh / 2)[:, None, None] + rh[:, None, None] * g[None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    patches = _sample_grid(img, xs.ravel(), ys.ravel()).reshape(len(boxes), P, P)
    return _patch_features(patches, cfg)


def _patch_features(patches, cfg: DetectorConfig):
    n, P, _ = patches.shape
    flat = patches.reshape(n, -1)
    mu = flat.mean(axis=1, keepdims=True)
    sd = np.maximum(flat.std(axis=1, keepdims=True), MIN_PATCH_STD)
    norm = (flat - mu) / sd / P
    maps = _orientation_maps(patches, cfg.orientation_bins)
    hist = np.stack([m[:, 1:-1, 1:-1].sum(axis=(1, 2)) for m in maps], axis=1)
    return np.hstack([norm, _normalize_hist(hist)])


def scales_from_area(mean_area, cfg: DetectorConfig) -> np.ndarray:
    """Square window sides spanning the size prior ``[low, high] * mean_area``."""
    lo = math.sqrt(cfg.size_prior_low_factor * mean_area)
    hi = math.sqrt(cfg.size_prior_high_factor * mean_area)
    if cfg.num_scales == 1:
        return np.array([math.sqrt(mean_area)])
    return np.geomspace(lo, hi, cfg.num_scales)


def _window_lattice(image, side, cfg: DetectorConfig):
    """Resample the image so every stride-aligned window is a patch slice.

    Returns the resampled image, the sample spacing, the stride in samples,
    and the top-left corners of the window grid.
    """
    P = cfg.patch_size
    h, w = image.shape
    spacing = side * cfg.context / P
    step = max(1, int(round(P / (4 * cfg.context))))
    stride = step * spacing
    margin = (cfg.context - 1) / 2 * side
    ox = np.arange(-stride, w - side + stride + 1e-9, stride)
    oy = np.arange(-stride, h - side + stride + 1e-9, stride)
    if len(ox) == 0:
        ox = np.array([(w - side) / 2])
    if len(oy) == 0:
        oy = np.array([(h - side) / 2])
    nx = (len(ox) - 1) * step + P
    ny = (len(oy) - 1) * step + P
    xs = ox[0] - margin + (np.arange(nx) + 0.5) * spacing
    ys = oy[0] - margin + (np.arange(ny) + 0.5) * spacing
    X, Y = np.meshgrid(xs, ys)
    R = _sample_grid(image, X.ravel(), Y.ravel()).reshape(ny, nx)
    return R, step, ox, oy


def _box_sum(integral, P, step, ny, nx, inset=0):
    """Sums over every window of an integral image (optionally inset)."""
    r0 = np.arange(ny) * step + inset
    c0 = np.arange(nx) * step + inset
    r1 = r0 + P - 2 * inset
    c1 = c0 + P - 2 * inset
    I = integral
    return I[r1][:, c1] - I[r0][:, c1] - I[r1][:, c0] + I[r0][:, c0]


def _integral(a):
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return out


def _window_features_lattice(R, step, ny, nx, cfg: DetectorConfig, templates):
    """Linear responses of every window to each template, plus histograms.

    ``templates`` is ``(m, P*P + nbins)``; the result is ``(ny, nx, m)`` equal
    to ``features @ templates.T`` without materialising the features.
    """
    P = cfg.patch_size
    npx = P * P
    S1 = _box_sum(_integral(R), P, step, ny, nx)
    S2 = _box_sum(_integral(R * R), P, step, ny, nx)
    mu = S1 / npx
    sd = np.maximum(np.sqrt(np.maximum(S2 / npx - mu ** 2, 0.0)), MIN_PATCH_STD)
    hist = np.stack([_box_sum(_integral(m), P, step, ny, nx, inset=1)
                     for m in _orientation_maps(R, cfg.orientation_bins)], axis=-1)
    hist = _normalize_hist(hist)
    out = np.empty((ny, nx, len(templates)))
    shape = [fft.next_fast_len(n, real=True) for n in R.shape]
    FR = fft.rfft2(R, shape)
    for k, t in enumerate(templates):
        T = t[:npx].reshape(P, P)
        full = fft.irfft2(FR * fft.rfft2(T[::-1, ::-1], shape), shape)
        corr = full[P - 1:P - 1 + (ny - 1) * step + 1:step, P - 1:P - 1 + (nx - 1) * step + 1:step]
        out[..., k] = (corr - mu * T.sum()) / (sd * P) + hist @ t[npx:]
    return out


def _apply_deltas(boxes, deltas):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + w / 2 + deltas[:, 0] * w
    cy = boxes[:, 1] + h / 2 + deltas[:, 1] * h
    nw = w * np.exp(np.clip(deltas[:, 2], -1, 1))
    nh = h * np.exp(np.clip(deltas[:, 3], -1, 1))
    return np.column_stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2])


def regression_targets(boxes, gt):
    """Centre offsets (relative to size) and log size ratios, per row."""
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    return np.column_stack([
        ((gt[:, 0] + gt[:, 2]) - (boxes[:, 0] + boxes[:, 2])) / 2 / w,
        ((gt[:, 1] + gt[:, 3]) - (boxes[:, 1] + boxes[:, 3])) / 2 / h,
        np.log(gw / w),
        np.log(gh / h),
    ])


# ---------------------------------------------------------------------------
# Sampling


def label_candidates(candidates, gp_boxes, iou_pos=0.7, iou_neg=0.3):
    """1 for positives, 0 for negatives, -1 for the ignored band in between."""
    cand = check_box_array(candidates)
    gp = check_box_array(gp_boxes)
    if len(gp) == 0:
        return np.zeros(len(cand), dtype=int)
    best = iou_matrix(cand, gp).max(axis=1)
    labels = np.full(len(cand), -1)
    labels[best > iou_pos] = 1
    labels[best < iou_neg] = 0
    return labels


def _jitter(box, rng, n, iou_pos, max_tries=50):
    out = []
    w, h = box[2] - box[0], box[3] - box[1]
    for _ in range(max_tries):
        if len(out) >= n:
            break
        dx, dy = rng.normal(0, 0.08, size=2) * (w, h)
        sw, sh = np.exp(rng.normal(0, 0.08, size=2))
        cx, cy = (box[0] + box[2]) / 2 + dx, (box[1] + box[3]) / 2 + dy
        cand = np.array([cx - w * sw / 2, cy - h * sh / 2, cx + w * sw / 2, cy + h * sh / 2])
        if iou_matrix(cand[None], box[None])[0, 0] > iou_pos:
            out.append(cand)
    return out


def _draw_negatives(rng, gpt, n, lo_side, hi_side, shape, cfg, near, max_rounds=50):
    """Windows below ``iou_neg`` against every box, uniform over the image or
    over the neighbourhood of the boxes (``near``)."""
    h, w = shape
    out = []
    for _ in range(max_rounds):
        if len(out) >= n:
            break
        k = 4 * (n - len(out))
        side = np.exp(rng.uniform(math.log(lo_side), math.log(hi_side), size=k))
        if near:
            anchor = gpt[rng.integers(len(gpt), size=k)]
            acx = (anchor[:, 0] + anchor[:, 2]) / 2
            acy = (anchor[:, 1] + anchor[:, 3]) / 2
            aw = anchor[:, 2] - anchor[:, 0]
            ah = anchor[:, 3] - anchor[:, 1]
            reach = np.maximum(aw, ah)
            # half the draws are windows sitting inside a box (partial views)
            inner = rng.uniform(size=k) < 0.5
            inner_hi = np.maximum(0.55 * np.minimum(aw, ah), lo_side * 1.0001)
            side = np.where(inner, np.exp(rng.uniform(math.log(lo_side), np.log(inner_hi))), side)
            spread = np.where(inner, 0.3 * reach, reach)
            x0 = acx + rng.uniform(-1, 1, size=k) * spread - side / 2
            y0 = acy + rng.uniform(-1, 1, size=k) * spread - side / 2
        else:
            x0 = rng.uniform(-side / 4, w - 3 * side / 4)
            y0 = rng.uniform(-side / 4, h - 3 * side / 4)
        cand = np.column_stack([x0, y0, x0 + side, y0 + side])
        lab = label_candidates(cand, gpt, cfg.iou_pos, cfg.iou_neg)
        out.extend(cand[lab == 0][: n - len(out)])
    return out


def sample_training_patches(frames, gp, cfg: DetectorConfig | None = None, seed: int | None = None) -> SampleSet:
    """Draw labelled training windows from every frame of the pseudo ground truth."""
    cfg = cfg or DetectorConfig()
    frames = list(getattr(frames, "frames", frames))
    if len(frames) != len(gp):
        raise ValueError(f"{len(frames)} frames but pseudo ground truth has {len(gp)}")
    all_gp = [check_box_array(boxes) for boxes in gp]
    n_gp = sum(len(b) for b in all_gp)
    if n_gp == 0:
        raise TrainingError("pseudo ground truth holds no boxes; no positive samples")
    areas = np.concatenate([(b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) for b in all_gp if len(b)])
    mean_area = float(areas.mean())
    lo_side = math.sqrt(cfg.size_prior_low_factor * mean_area)
    hi_side = math.sqrt(cfg.size_prior_high_factor * mean_area)
    streams = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(len(frames))
    Xs, ys, bs, fs, ts = [], [], [], [], []
    for t, (img, gpt) in enumerate(zip(frames, all_gp)):
        rng = np.random.default_rng(streams[t])
        if len(gpt) == 0:
            continue
        pos = []
        for box in gpt:
            pos.append(box)
            pos.extend(_jitter(box, rng, cfg.jitter_per_box, cfg.iou_pos))
        pos = np.array(pos)
        max_pos = max(1, int(cfg.per_frame_cap / (1 + cfg.neg_per_pos)))
        if len(pos) > max_pos:
            pos = pos[np.sort(rng.choice(len(pos), max_pos, replace=False))]
        n_neg = int(round(cfg.neg_per_pos * len(pos)))
        h, w = img.shape
        n_near = int(round(cfg.near_negative_fraction * n_neg))
        neg = _draw_negatives(rng, gpt, n_near, lo_side, hi_side, img.shape, cfg, near=True)
        neg += _draw_negatives(rng, gpt, n_neg - len(neg), lo_side, hi_side, img.shape, cfg, near=False)
        neg = np.array(neg).reshape(-1, 4)
        match = iou_matrix(pos, gpt).argmax(axis=1)
        boxes = np.vstack([pos, neg])
        Xs.append(extract_features(img, boxes, cfg))
        ys.append(np.r_[np.ones(len(pos)), np.zeros(len(neg))])
        bs.append(boxes)
        fs.append(np.full(len(boxes), t))
        ts.append(np.vstack([regression_targets(pos, gpt[match]), np.zeros((len(neg), 4))]))
    return SampleSet(
        X=np.vstack(Xs), y=np.concatenate(ys), boxes=np.vstack(bs),
        frames=np.concatenate(fs).astype(int), targets=np.vstack(ts), mean_area=mean_area,
    )


# ---------------------------------------------------------------------------
# Loss and training


def _smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x ** 2, ax - 0.5)


def _smooth_l1_grad(x):
    return np.clip(x, -1, 1)


def loss_and_grad(theta, X, y, targets, cfg: DetectorConfig):
    """Total loss ``L_cls + reg_weight * L_reg + l2/2 |theta|^2`` and its gradient.

    ``L_cls`` is the mean logistic loss over the batch and ``L_reg`` the
    smooth-L1 box loss summed over the four offsets and averaged over the
    positives in the batch.
    """
    n, d = X.shape
    w, b = theta[:d], theta[d]
    reg_w = theta[d + 1:d + 1 + 4 * d].reshape(4, d)
    reg_b = theta[d + 1 + 4 * d:]
    z = X @ w + b
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0, evaluated stably
    sgn = np.where(y == 1, -z, z)
    l_cls = np.mean(np.logaddexp(0.0, sgn))
    dz = (_sigmoid(z) - y) / n
    grad = np.zeros_like(theta)
    grad[:d] = X.T @ dz
    grad[d] = dz.sum()
    pos = y == 1
    npos = max(int(pos.sum()), 1)
    l_reg = 0.0
    if pos.any() and cfg.reg_weight != 0:
        r = X[pos] @ reg_w.T + reg_b - targets[pos]
        l_reg = _smooth_l1(r).sum() / npos
        g = _smooth_l1_grad(r) * (cfg.reg_weight / npos)
        grad[d + 1:d + 1 + 4 * d] = (g.T @ X[pos]).ravel()
        grad[d + 1 + 4 * d:] = g.sum(axis=0)
    penalty = np.r_[w, reg_w.ravel()]
    l2 = 0.5 * cfg.l2 * (penalty @ penalty)
    grad[:d] += cfg.l2 * w
    grad[d + 1:d + 1 + 4 * d] += cfg.l2 * reg_w.ravel()
    return l_cls + cfg.reg_weight * l_reg + l2, grad


def training_loss(model: DetectorModel, samples: SampleSet) -> float:
    return float(loss_and_grad(model.params(), samples.X, samples.y, samples.targets, model.config)[0])


def _init_model(samples: SampleSet, cfg: DetectorConfig) -> DetectorModel:
    d = cfg.feature_dim
    if samples.X.shape[1] != d:
        raise ValueError(f"sample features have {samples.X.shape[1]} dims, config expects {d}")
    return DetectorModel(
        config=cfg,
        scales=scales_from_area(samples.mean_area, cfg),
        w=np.zeros(d), b=0.0, reg_w=np.zeros((4, d)), reg_b=np.zeros(4),
    )


def _sgd(model: DetectorModel, samples: SampleSet, epochs: int, lr: float, seed: int) -> DetectorModel:
    cfg = model.config
    if epochs == 0:
        return model
    if not (np.any(samples.y == 1) and np.any(samples.y == 0)):
        raise TrainingError("training needs both positive and negative samples")
    rng = np.random.default_rng(seed)
    theta = model.params()
    velocity = np.zeros_like(theta)
    X, y, T = samples.X, samples.y, samples.targets
    history = list(model.loss_history)
    if not history:
        history.append(float(loss_and_grad(theta, X, y, T, cfg)[0]))
    for epoch in range(model.epochs_seen + 1, model.epochs_seen + epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(theta, X[idx], y[idx], T[idx], cfg)
            velocity = cfg.momentum * velocity - lr * g
            theta = theta + velocity
        loss = float(loss_and_grad(theta, X, y, T, cfg)[0])
        if not np.isfinite(loss) or not np.all(np.isfinite(theta)):
            raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})")
        history.append(loss)
    out = model.with_params(theta)
    return replace(out, epochs_seen=model.epochs_seen + epochs, loss_history=history)


def train(samples: SampleSet, cfg: DetectorConfig | None = None, epochs=None, lr=None, seed=None) -> DetectorModel:
    """Train a detector from scratch (zero-initialized weights)."""
    cfg = cfg or DetectorConfig()
    model = _init_model(samples, cfg)
    return _sgd(model, samples, cfg.epochs if epochs is None else epochs,
                cfg.lr if lr is None else lr, cfg.seed if seed is None else seed)


def fine_tune(model: DetectorModel, samples: SampleSet, epochs=None, lr=None, seed=None) -> DetectorModel:
    """Continue training ``model`` on new samples, keeping its scale list."""
    cfg = model.config
    if samples.X.shape[1] != cfg.feature_dim:
        raise ValueError("sample features do not match the model's feature layout")
    return _sgd(model, samples, cfg.epochs if epochs is None else epochs,
                cfg.lr if lr is None else lr, cfg.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# Detection


def score_windows(model: DetectorModel, image):
    """Score every sliding window; returns ``(boxes, scores, deltas)`` arrays."""
    cfg = model.config
    img = np.asarray(image, dtype=float)
    templates = np.vstack([np.r_[model.w], model.reg_w])
    all_boxes, all_scores, all_deltas = [], [], []
    for side in model.scales:
        R, step, ox, oy = _window_lattice(img, float(side), cfg)
        resp = _window_features_lattice(R, step, len(oy), len(ox), cfg, templates)
        OX, OY = np.meshgrid(ox, oy)
        boxes = np.column_stack([OX.ravel(), OY.ravel(), OX.ravel() + side, OY.ravel() + side])
        flat = resp.reshape(-1, len(templates))
        all_boxes.append(boxes)
        all_scores.append(_sigmoid(flat[:, 0] + model.b))
        all_deltas.append(flat[:, 1:] + model.reg_b)
    return np.vstack(all_boxes), np.concatenate(all_scores), np.vstack(all_deltas)


def detect(model: DetectorModel, image, frame_index: int = 0) -> list[Detection]:
    cfg = model.config
    boxes, scores, deltas = score_windows(model, image)
    keep = scores > cfg.score_threshold
    if not keep.any():
        return []
    refined = _apply_deltas(boxes[keep], deltas[keep])
    s = scores[keep]
    order = nms_indices(refined, s, cfg.detector_nms)
    return [Detection(frame_index, BBox(*map(float, refined[i])), float(s[i])) for i in order]


# ---------------------------------------------------------------------------
# Persistence


def save_model(model: DetectorModel, path) -> None:
    meta = {
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "b": model.b,
        "epochs_seen": model.epochs_seen,
        "loss_history": model.loss_history,
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             scales=model.scales, w=model.w, reg_w=model.reg_w, reg_b=model.reg_b)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> DetectorModel:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(data["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"{path}: not a detector model file ({exc})") from exc
    if meta.get("version") != MODEL_VERSION:
        raise ModelVersionError(f"{path}: model version {meta.get('version')!r}, expected {MODEL_VERSION!r}")
    return DetectorModel(
        config=DetectorConfig(**meta["config"]),
        scales=data["scales"], w=data["w"], b=float(meta["b"]),
        reg_w=data["reg_w"], reg_b=data["reg_b"],
        epochs_seen=int(meta["epochs_seen"]), loss_history=list(meta["loss_history"]),
    )


# ---------------------------------------------------------------------------


class SlidingWindowDetector(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train` / :func:`detect`.

    ``fit`` takes a :class:`SampleSet` (or frames plus pseudo ground truth via
    :meth:`fit_frames`); ``predict`` on an image returns detections, while
    ``predict_proba``/``decision_function`` score feature rows.
    """

    _estimator_type = "classifier"

    def __init__(self, score_threshold=0.5, detector_nms=0.3, num_scales=7, epochs=10, lr=0.01,
                 batch_size=32, reg_weight=1.0, neg_per_pos=3.0, per_frame_cap=256, seed=0):
        self.score_threshold = score_threshold
        self.detector_nms = detector_nms
        self.num_scales = num_scales
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.reg_weight = reg_weight
        self.neg_per_pos = neg_per_pos
        self.per_frame_cap = per_frame_cap
        self.seed = seed

    def _config(self):
        return DetectorConfig(**self.get_params())

    def fit(self, samples: SampleSet, y=None):
        if getattr(self, "model_", None) is not None and getattr(self, "warm_start_", False):
            self.model_ = fine_tune(self.model_, samples)
        else:
            self.model_ = train(samples, self._config())
        self.classes_ = np.array([0, 1])
        return self

    def fit_frames(self, frames, gp):
        return self.fit(sample_training_patches(frames, gp, self._config()))

    def decision_function(self, X):
        return self.model_.decision_function(np.asarray(X, dtype=float))

    def predict_proba(self, X):
        p = self.model_.predict_proba(np.asarray(X, dtype=float))
        return np.column_stack([1 - p, p])

    def predict(self, image):
        image = np.asarray(image)
        if image.ndim == 2 and image.shape[1] != self.model_.config.feature_dim:
            return detect(self.model_, image)
        return (self.decision_function(image) > 0).astype(int)

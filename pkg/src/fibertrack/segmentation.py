"""EM/MPM segmentation under a Potts Markov random field.

Labels are sampled by checkerboard Gibbs sweeps from per-class Gaussian
likelihoods times a 4-neighbourhood Potts prior; class means and variances
are re-estimated in closed form from the sampled label marginals.  The final
labelling is the per-pixel majority over the recorded sweeps (MPM).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

log = logging.getLogger(__name__)

MIN_SIGMA = 0.5


class SegmentationError(RuntimeError):
    pass


@dataclass
class EmMpmParams:
    num_classes: int = 3
    potts_beta: float = 1.0
    em_iterations: int = 5
    gibbs_sweeps_per_em: int = 8
    max_restarts: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.potts_beta < 0:
            raise ValueError("potts_beta must be >= 0")
        if self.em_iterations < 1 or self.gibbs_sweeps_per_em < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class LabelMap:
    labels: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    @property
    def num_classes(self):
        return len(self.means)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def to_image(self):
        """8-bit rendering for inspection (class index times 255 // k)."""
        return (self.labels * (255 // self.num_classes)).astype(np.uint8)


class _Checkerboard:
    """Flat indices of each checkerboard colour and of their 4-neighbours.

    Labels live in a padded buffer whose border holds -1 so that it never
    matches a class.
    """

    def __init__(self, h, w):
        self.shape = (h, w)
        self.buf = np.full((h + 2) * (w + 2), -1, dtype=np.int64)
        yy, xx = np.mgrid[0:h, 0:w]
        self.colours = []
        for parity in (0, 1):
            sel = (yy + xx) % 2 == parity
            inner = np.flatnonzero(sel.ravel())
            padded = (yy[sel] + 1) * (w + 2) + (xx[sel] + 1)
            nbrs = np.stack([padded - (w + 2), padded + (w + 2), padded - 1, padded + 1])
            self.colours.append((inner, padded, nbrs))

    def load(self, labels):
        h, w = self.shape
        self.buf.reshape(h + 2, w + 2)[1:-1, 1:-1] = labels

    def labels(self):
        h, w = self.shape
        return self.buf.reshape(h + 2, w + 2)[1:-1, 1:-1].copy()


def _gibbs_half_sweep(board, colour, loglik_flat, beta, rng):
    inner, padded, nbrs = board.colours[colour]
    k = loglik_flat.shape[0]
    nb = board.buf[nbrs]
    counts = np.stack([(nb == c).sum(axis=0) for c in range(k)])
    logp = loglik_flat[:, inner] + beta * counts
    logp -= logp.max(axis=0, keepdims=True)
    cdf = np.cumsum(np.exp(logp), axis=0)
    draw = rng.uniform(size=cdf.shape[1]) * cdf[-1]
    board.buf[padded] = np.minimum((cdf < draw[None]).sum(axis=0), k - 1)


def _log_likelihood(x, means, sigmas):
    return -0.5 * ((x[None] - means[:, None, None]) / sigmas[:, None, None]) ** 2 - np.log(sigmas)[:, None, None]


def _run(x, init_means, params, rng):
    k = params.num_classes
    means = np.array(init_means, dtype=float)
    labels = np.argmin(np.abs(x[..., None] - means), axis=-1)
    sigmas = np.array([x[labels == c].std() if np.any(labels == c) else x.std() for c in range(k)])
    sigmas = np.maximum(sigmas, MIN_SIGMA)
    h, w = x.shape
    board = _Checkerboard(h, w)
    board.load(labels)
    flat_idx = np.arange(h * w)
    sweeps = params.gibbs_sweeps_per_em
    keep_from = sweeps - max(1, sweeps // 2)
    tally = None
    for _ in range(params.em_iterations):
        tally = np.zeros((k, h, w))
        loglik = _log_likelihood(x, means, sigmas).reshape(k, -1)
        for s in range(sweeps):
            for colour in (0, 1):
                _gibbs_half_sweep(board, colour, loglik, params.potts_beta, rng)
            if s >= keep_from:
                tally.reshape(k, -1)[board.labels().ravel(), flat_idx] += 1
        marg = tally / tally.sum(axis=0, keepdims=True)
        weight = marg.reshape(k, -1).sum(axis=1)
        if np.any(weight <= 0):
            return None
        flat = x.ravel()
        means = (marg.reshape(k, -1) @ flat) / weight
        var = (marg.reshape(k, -1) * (flat[None] - means[:, None]) ** 2).sum(axis=1) / weight
        sigmas = np.maximum(np.sqrt(var), MIN_SIGMA)
    mpm = np.argmax(tally, axis=0)
    return mpm, means, sigmas


def emmpm_segment(image, params: EmMpmParams | None = None) -> LabelMap:
    """Segment a grayscale image into ``params.num_classes`` intensity classes."""
    params = params or EmMpmParams()
    x = np.asarray(image, dtype=float)
    if x.ndim != 2 or x.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {x.shape}")
    k = params.num_classes
    values, inverse = np.unique(x, return_inverse=True)
    if len(values) < k:
        # no room for k classes: one label per distinct intensity, darkest first
        labels = inverse.reshape(x.shape)
        means = np.concatenate([values, np.full(k - len(values), values[-1])])
        return LabelMap(labels, means.astype(float), np.full(k, MIN_SIGMA))
    rng = np.random.default_rng(params.rng_seed)
    base = np.quantile(x, (np.arange(k) + 0.5) / k)
    spread = max(x.std(), 1.0)
    init = base
    for attempt in range(params.max_restarts + 1):
        out = _run(x, init, params, rng)
        if out is not None:
            labels, means, sigmas = out
            break
        log.debug("empty class on attempt %d; re-jittering means", attempt)
        init = np.sort(base + rng.normal(0.0, 0.25 * spread, size=k))
    else:
        raise SegmentationError(f"a class stayed empty after {params.max_restarts} restarts")
    # order classes by mean so that index 0 is the darkest
    order = np.argsort(means)
    rank = np.empty(k, dtype=int)
    rank[order] = np.arange(k)
    return LabelMap(rank[labels], means[order], sigmas[order])


def class_mask(labelmap: LabelMap, image) -> np.ndarray:
    """Binary mask of the darkest class, measured on ``image``."""
    x = np.asarray(image, dtype=float)
    labels = labelmap.labels
    present = np.unique(labels)
    means = [x[labels == c].mean() for c in present]
    return labels == present[int(np.argmin(means))]


class EmMpmSegmenter(BaseEstimator):
    """EM/MPM segmentation exposed through the estimator interface."""

    def __init__(self, num_classes=3, potts_beta=1.0, em_iterations=5, gibbs_sweeps_per_em=8,
                 max_restarts=3, rng_seed=0):
        self.num_classes = num_classes
        self.potts_beta = potts_beta
        self.em_iterations = em_iterations
        self.gibbs_sweeps_per_em = gibbs_sweeps_per_em
        self.max_restarts = max_restarts
        self.rng_seed = rng_seed

    def fit(self, image, y=None):
        self.labelmap_ = emmpm_segment(image, EmMpmParams(**self.get_params()))
        self.means_ = self.labelmap_.means
        self.sigmas_ = self.labelmap_.sigmas
        return self

    def fit_predict(self, image, y=None):
        return self.fit(image).labelmap_.labels

    def fiber_mask(self, image):
        return class_mask(self.fit(image).labelmap_, image)

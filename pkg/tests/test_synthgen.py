import math

import numpy as np
import pytest

from fibertrack import synthgen

from conftest import small_config


def test_generation_is_deterministic():
    a = synthgen.generate(small_config(degradation_frame_fraction=0.3))
    b = synthgen.generate(small_config(degradation_frame_fraction=0.3))
    assert a == b
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))


def test_different_seed_differs():
    a = synthgen.generate(small_config(rng_seed=1))
    b = synthgen.generate(small_config(rng_seed=2))
    assert not np.array_equal(a.frames[0], b.frames[0])


def test_threaded_map_matches_serial():
    from concurrent.futures import ThreadPoolExecutor
    cfg = small_config(degradation_frame_fraction=0.5)
    with ThreadPoolExecutor(3) as pool:
        assert synthgen.generate(cfg, map_fn=pool.map) == synthgen.generate(cfg)


def test_zero_fraction_has_no_degradation(clean_small):
    assert not any(clean_small.degraded_flags)
    assert all(ev == [] for ev in clean_small.degradations)


def test_every_frame_has_all_fibers():
    ds = synthgen.generate(small_config(num_fibers=10, num_frames=25))
    assert all(len(f) == 10 for f in ds.gt_boxes)
    ids = [sorted(i for i, _ in f) for f in ds.gt_boxes]
    assert all(x == ids[0] for x in ids)


@pytest.mark.parametrize("fraction,frames,expected", [(0.3, 25, 8), (0.0, 25, 0), (1.0, 10, 10), (0.15, 10, 2)])
def test_degraded_count_rounds_half_up(fraction, frames, expected):
    ds = synthgen.generate(small_config(num_fibers=4, num_frames=frames, degradation_frame_fraction=fraction))
    assert sum(ds.degraded_flags) == expected


def test_gt_boxes_match_rendered_extent():
    cfg = small_config(num_fibers=6, num_frames=2, noise_sd=0.0)
    ds = synthgen.generate(cfg)
    img = ds.frames[0].astype(float)
    dark = img < cfg.background_level - 20
    for _, box in ds.gt_boxes[0]:
        x0, y0 = int(box.x1) - 2, int(box.y1) - 2
        sub = dark[max(y0, 0):int(box.y2) + 3, max(x0, 0):int(box.x2) + 3]
        ys, xs = np.nonzero(sub)
        ext = (xs.min() + max(x0, 0), ys.min() + max(y0, 0), xs.max() + 1 + max(x0, 0), ys.max() + 1 + max(y0, 0))
        assert max(abs(p - q) for p, q in zip(ext, box.as_tuple())) <= 1.0


def test_drift_bounded():
    cfg = small_config(num_frames=20)
    ds = synthgen.generate(cfg)
    bound = cfg.max_drift_velocity * math.sqrt(2) + 1e-9
    prev = dict(ds.gt_boxes[0])
    for frame in ds.gt_boxes[1:]:
        cur = dict(frame)
        for fid, box in cur.items():
            (x0, y0), (x1, y1) = prev[fid].center, box.center
            assert math.hypot(x1 - x0, y1 - y0) <= bound
        prev = cur


def test_minimum_separation(clean_small):
    cfg = small_config()
    for frame in clean_small.gt_boxes:
        c = np.array([b.center for _, b in frame])
        d = np.hypot(*(c[:, None, :] - c[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        assert d.min() >= cfg.min_center_separation - 2 * cfg.max_drift_velocity * cfg.num_frames


def test_fibers_are_dark(clean_small):
    img = clean_small.frames[0].astype(float)
    inside = [img[int(b.center[1]), int(b.center[0])] for _, b in clean_small.gt_boxes[0]]
    assert np.mean(inside) < img.mean() - 40


def test_export_load_round_trip(tmp_path):
    ds = synthgen.generate(small_config(degradation_frame_fraction=0.4))
    synthgen.export(ds, tmp_path / "ds")
    pngs = sorted((tmp_path / "ds").glob("*.png"))
    assert len(pngs) == ds.num_frames
    assert (tmp_path / "ds" / synthgen.GT_FILE).exists()
    back = synthgen.load(tmp_path / "ds")
    assert back == ds


def test_export_rejects_empty_path(tmp_path):
    ds = synthgen.generate(small_config(num_fibers=2, num_frames=3))
    with pytest.raises((ValueError, OSError)):
        synthgen.export(ds, "")


@pytest.mark.parametrize("kw", [dict(num_frames=0), dict(degradation_frame_fraction=1.5), dict(mean_radius=-1),
                                dict(min_center_separation=2.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        small_config(**kw)

import numpy as np
import pytest

from fibertrack import detector as det
from fibertrack import synthgen


def small_config(**kw):
    base = dict(width=128, height=128, num_fibers=12, num_frames=12, degradation_frame_fraction=0.0, rng_seed=3)
    base.update(kw)
    return synthgen.SynthConfig(**base)


@pytest.fixture(scope="session")
def clean_small():
    return synthgen.generate(small_config())


@pytest.fixture(scope="session")
def default_dataset():
    return synthgen.generate(synthgen.SynthConfig(rng_seed=0))


@pytest.fixture(scope="session")
def gt_model(default_dataset):
    """Detector trained directly on ground truth of the default benchmark."""
    ds = default_dataset
    samples = det.sample_training_patches(ds.frames, ds.gt_per_frame(), seed=0)
    return det.train(samples, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

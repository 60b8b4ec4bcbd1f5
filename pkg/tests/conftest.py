import numpy as np
import pytest

from soupforge import data as D
from soupforge import models as M


@pytest.fixture(scope="session")
def blobs():
    """Small, well separated 3-class synthetic set on 8x8 images."""
    ds = D.synth_dataset(D.SynthSpec(classes=3, size=8, per_class=40, margin=6.0), seed=0)
    return ds.to_batch()


@pytest.fixture(scope="session")
def small_model(blobs):
    arch = M.conv_arch("tiny", input_shape=(1, 8, 8), num_classes=3, depth=1, width=4, hidden=16)
    model, _ = M.train(M.build_model(arch, 0), blobs.images, blobs.labels,
                       epochs=4, lr=0.1, batch=16, seed=0)
    return model


@pytest.fixture(scope="session")
def other_model(blobs):
    arch = M.conv_arch("tiny-b", input_shape=(1, 8, 8), num_classes=3, depth=1, width=4, hidden=16)
    model, _ = M.train(M.build_model(arch, 7), blobs.images, blobs.labels,
                       epochs=4, lr=0.1, batch=16, seed=7)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ipcd.pcio import IntrinsicTriplet, PointCloud  # noqa: E402
from ipcd.scenegen import SceneSpec, build_scene, sample_triplet, sun_from_time  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return build_scene(SceneSpec(seed=7, building_count=(2, 2)))


@pytest.fixture(scope="session")
def small_triplet(small_scene):
    return sample_triplet(small_scene, sun_from_time("morning"), 1500, seed=3)


def random_cloud(rng, n=100):
    return PointCloud(rng.normal(size=(n, 3)), rng.random((n, 3)))


def random_triplet(rng, n=32):
    a = rng.uniform(0.05, 0.95, (n, 3))
    s = rng.uniform(0.05, 0.95, (n, 3))
    return IntrinsicTriplet(PointCloud(rng.normal(size=(n, 3)), a * s), a, s, sun_from_time("noon"))


def loss_probe(params, batch, pld, lam=0.1):
    """Return ``(fn, x0, grad)`` for grad-checking the total loss over all parameters."""
    from ipcd import autodiff as ad
    from ipcd.model import LossConfig, forward_tensors, knn_indices, loss_total

    knn = knn_indices(batch.cloud.positions, min(params.config.k, len(batch) - 1))
    names = sorted(params.arrays)

    def run(arrays):
        tape = ad.Tape()
        p = tape.bind(arrays, set(names))
        loss, _ = loss_total(forward_tensors(p, params.config, batch.cloud, knn, pld), batch, LossConfig(lam))
        return loss, tape

    loss, _ = run(params.arrays)
    grads = ad.backward(loss)
    grad = np.concatenate([grads[k].ravel() for k in names])

    def fn(flat):
        loss, tape = run(params.unflat(flat))
        return float(loss.value), tape.signature()

    return fn, params.flat(), grad

import numpy as np
import pytest

from tactbench.dataset import Dataset
from tactbench.sample import GraspPose, Sample


def fake_sample(object_id="obj", label=1, index=0, tactile=(6, 4), camera=(5, 5), seed=None):
    rng = np.random.default_rng(index if seed is None else seed)
    th, tw = tactile
    ch, cw = camera
    return Sample(
        object_id=object_id, scale=0.8, grasp=GraspPose(0.01 * index, -0.02, 0.03, 0.5),
        tactile_left=(rng.random((th, tw)) * 0.002).astype(np.float32),
        tactile_right=(rng.random((th, tw)) * 0.002).astype(np.float32),
        rgb=rng.integers(0, 256, (ch, cw, 3), dtype=np.uint8),
        depth=rng.random((ch, cw)).astype(np.float32),
        left_force=2.0 + rng.random(), right_force=2.0 + rng.random(),
        label=int(label), attempt_index=int(index))


def counts_dataset(per_object: dict) -> Dataset:
    """Raw set with the given {object_id: (successes, failures)} counts, interleaved by attempt index."""
    samples = []
    for oid, (s, f) in per_object.items():
        labels = [1] * s + [0] * f
        order = np.random.default_rng(len(labels)).permutation(len(labels))
        for idx, k in enumerate(order):
            samples.append(fake_sample(oid, labels[k], idx, tactile=(2, 2), camera=(2, 2)))
    return Dataset(samples, "raw", {}, {"seed": 0})


@pytest.fixture
def small_dataset():
    samples = [fake_sample(oid, (i + j) % 2, i) for j, oid in enumerate(("a", "b", "c")) for i in range(10)]
    return Dataset(samples, "raw", {"attempts_total": 40}, {"seed": 3, "config_hash": "deadbeef"})

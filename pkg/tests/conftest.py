import numpy as np
import pytest

from viewfuse.core import CameraIntrinsics, Pose, RgbdFrame
from viewfuse.synth import SynthConfig, generate_corpus

TINY = SynthConfig(seed=5, num_train=2, num_val=1, frames_per_scene=6)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY)


@pytest.fixture(scope="session")
def scene(tiny_corpus):
    return tiny_corpus["train"][0]


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    return Pose(r, rng.normal(size=3))


def make_frame(depth, pose=None, fx=1.0, fy=1.0, cx=0.0, cy=0.0, frame_id=0):
    h, w = depth.shape
    intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
    return RgbdFrame(np.zeros((h, w, 3)), np.asarray(depth, dtype=np.float64), intr,
                     pose or Pose.identity(), frame_id)

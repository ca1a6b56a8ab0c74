"""
Shared fixtures: the shipped skeleton, seeded generators, random clips and a
tiny model configuration.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from services.config import ModelConfig
from services.dataio import MotionClip
from services.rotmath import sixd_encode
from services.skeleton import JOINT_COUNT, load_skeleton


@pytest.fixture(scope="session")
def skeleton():
    return load_skeleton()


@pytest.fixture(scope="session")
def skel(skeleton):
    return skeleton[0]


@pytest.fixture(scope="session")
def scales(skeleton):
    return skeleton[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotations(rng: np.random.Generator, *shape) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    mats = Rotation.random(n, random_state=rng).as_matrix()
    return mats.reshape(shape + (3, 3))


def random_clip(rng: np.random.Generator, frames: int = 5, fps: float = 60.0) -> MotionClip:
    local = sixd_encode(random_rotations(rng, frames, JOINT_COUNT))
    root = rng.normal(scale=0.5, size=(frames, 3))
    return MotionClip(local, root, fps)


def smooth_clip(rng: np.random.Generator, frames: int = 120, fps: float = 60.0) -> MotionClip:
    """Small sinusoidal joint motion around the rest pose."""
    t = np.arange(frames)[:, None] / fps
    axes = rng.normal(size=(JOINT_COUNT, 3))
    freq = rng.uniform(0.3, 1.5, size=JOINT_COUNT)
    angles = 0.3 * np.sin(2 * np.pi * freq * t)[..., None] * axes
    mats = Rotation.from_rotvec(angles.reshape(-1, 3)).as_matrix().reshape(frames, JOINT_COUNT, 3, 3)
    root = np.stack([0.3 * t[:, 0], 0.9 + 0.02 * np.sin(4 * t[:, 0]), np.zeros(frames)], axis=1)
    return MotionClip(sixd_encode(mats), root, fps)


@pytest.fixture
def clip_pair(rng):
    return random_clip(rng), random_clip(rng)


@pytest.fixture
def tiny_config():
    return ModelConfig(latent_dim=16, blocks=[1, 1, 1], window=8, T=50, schedule="cosine")


def chain_fk(local: np.ndarray, root: np.ndarray, skel):
    """Compose the ancestor chain of every joint independently: (22, 3, 3) -> rotations, positions."""
    rots, poss = [], []
    for j in range(JOINT_COUNT):
        chain = [j]
        while skel.parent[chain[-1]] >= 0:
            chain.append(skel.parent[chain[-1]])
        chain = chain[::-1]
        R = np.eye(3)
        p = np.array(root, dtype=np.float64)
        for k, joint in enumerate(chain):
            if k > 0:
                p = p + R @ skel.offset[joint]
            R = R @ local[joint]
        rots.append(R)
        poss.append(p)
    return np.array(rots), np.array(poss)

"""
Procedural motion generator: a desk-scale stand-in for mocap data.

Every joint angle is a finite sum of sinusoids of the clip time, so clips are
smooth (C-infinity) and bounded well inside +/-150 degrees.
"""

import logging
from typing import Callable, Dict, List

import numpy as np

from services.dataio import MotionClip
from services.errors import InvalidArgument
from services.rotmath import rot_x, rot_y, rot_z, sixd_encode
from services.skeleton import JOINT_COUNT

logger = logging.getLogger(__name__)

KINDS = ("walk", "reach", "squat", "kick", "mixed")
PELVIS_HEIGHT = 0.93
MAX_ANGLE = np.radians(150.0)


def _euler(n: int, x=0.0, y=0.0, z=0.0) -> np.ndarray:
    """Rx(x) @ Ry(y) @ Rz(z) for per-frame angle arrays (or scalars)."""
    x = np.broadcast_to(np.clip(x, -MAX_ANGLE, MAX_ANGLE), (n,))
    y = np.broadcast_to(np.clip(y, -MAX_ANGLE, MAX_ANGLE), (n,))
    z = np.broadcast_to(np.clip(z, -MAX_ANGLE, MAX_ANGLE), (n,))
    return rot_x(x) @ rot_y(y) @ rot_z(z)


class _Rig:
    """Accumulates per-joint local rotation matrices for one clip."""

    def __init__(self, n: int):
        self.n = n
        self.rot = np.broadcast_to(np.eye(3), (n, JOINT_COUNT, 3, 3)).copy()

    def set(self, joint: int, x=0.0, y=0.0, z=0.0):
        self.rot[:, joint] = _euler(self.n, x, y, z)

    def arms_down(self, lx=0.0, rx=0.0, ly=0.0, ry=0.0, drop=1.3):
        # shoulders rotate the T-pose arms down by `drop` rad, then swing about x
        self.set(16, x=lx, y=ly, z=-drop)
        self.set(17, x=rx, y=ry, z=drop)


def _walk(rig: _Rig, t: np.ndarray, p: Dict[str, float]) -> np.ndarray:
    w = 2 * np.pi / p["period_s"]
    ph = w * t + p["phase"]
    a = p["amp"]
    rig.set(1, x=-0.45 * a * np.sin(ph))
    rig.set(2, x=0.45 * a * np.sin(ph))
    rig.set(4, x=0.35 * a * (1 + np.sin(ph + np.pi / 2)))
    rig.set(5, x=0.35 * a * (1 + np.sin(ph - np.pi / 2)))
    rig.set(7, x=0.15 * a * np.sin(ph - np.pi / 2))
    rig.set(8, x=0.15 * a * np.sin(ph + np.pi / 2))
    rig.set(3, y=0.06 * a * np.sin(ph))
    rig.set(6, y=-0.04 * a * np.sin(ph))
    rig.arms_down(lx=0.3 * a * np.sin(ph), rx=-0.3 * a * np.sin(ph))
    rig.set(18, y=0.3 + 0.1 * a * np.sin(ph))
    rig.set(19, y=-0.3 - 0.1 * a * np.sin(ph))
    rig.set(15, x=0.05 * np.sin(2 * ph))
    yaw = p["heading"] + 0.08 * np.sin(ph)
    rig.set(0, y=yaw)

    speed = 1.2 * a
    trans = np.zeros((len(t), 3))
    trans[:, 0] = speed * t * np.sin(p["heading"])
    trans[:, 2] = speed * t * np.cos(p["heading"])
    trans[:, 1] = PELVIS_HEIGHT + 0.02 * np.cos(2 * ph)
    return trans


def _reach(rig: _Rig, t: np.ndarray, p: Dict[str, float]) -> np.ndarray:
    w = 2 * np.pi / p["period_s"]
    ph = w * t + p["phase"]
    a = p["amp"]
    left = 0.5 * (1 - np.cos(ph))
    right = 0.5 * (1 - np.cos(ph + np.pi))
    rig.arms_down(lx=-1.3 * a * left, rx=-1.3 * a * right, ly=0.3 * left, ry=-0.3 * right)
    rig.set(18, y=0.9 * (1 - left))
    rig.set(19, y=-0.9 * (1 - right))
    rig.set(3, x=0.12 * a * np.sin(ph), y=0.15 * a * np.sin(ph))
    rig.set(6, x=0.08 * a * np.sin(ph))
    rig.set(12, x=-0.1 * np.sin(ph))
    rig.set(4, x=0.1 + 0.05 * np.sin(ph))
    rig.set(5, x=0.1 + 0.05 * np.sin(ph))
    rig.set(0, y=p["heading"] + 0.1 * np.sin(0.5 * ph))
    trans = np.zeros((len(t), 3))
    trans[:, 0] = 0.03 * np.sin(0.5 * ph)
    trans[:, 1] = PELVIS_HEIGHT - 0.02
    return trans


def _squat(rig: _Rig, t: np.ndarray, p: Dict[str, float]) -> np.ndarray:
    w = 2 * np.pi / p["period_s"]
    ph = w * t + p["phase"]
    a = p["amp"]
    d = 0.5 * (1 - np.cos(ph))
    rig.set(1, x=-1.0 * a * d)
    rig.set(2, x=-1.0 * a * d)
    rig.set(4, x=1.6 * a * d)
    rig.set(5, x=1.6 * a * d)
    rig.set(7, x=-0.6 * a * d)
    rig.set(8, x=-0.6 * a * d)
    rig.set(3, x=0.35 * a * d)
    rig.arms_down(lx=-1.1 * d, rx=-1.1 * d)
    rig.set(0, y=p["heading"])
    trans = np.zeros((len(t), 3))
    trans[:, 1] = PELVIS_HEIGHT - 0.35 * a * d
    trans[:, 2] = -0.08 * a * d
    return trans


def _kick(rig: _Rig, t: np.ndarray, p: Dict[str, float]) -> np.ndarray:
    w = 2 * np.pi / p["period_s"]
    ph = w * t + p["phase"]
    a = p["amp"]
    swing = 0.5 * (1 - np.cos(ph))
    hip, knee = (1, 4) if p["side"] < 0.5 else (2, 5)
    rig.set(hip, x=-1.1 * a * swing)
    rig.set(knee, x=0.9 * a * np.sin(0.5 * ph) ** 2 * (1 - swing))
    stance_knee = 5 if knee == 4 else 4
    rig.set(stance_knee, x=0.1 * swing)
    rig.set(3, x=-0.15 * a * swing)
    rig.arms_down(lx=0.4 * swing, rx=0.4 * swing, ly=0.2, ry=-0.2, drop=1.0)
    rig.set(0, y=p["heading"], x=0.1 * a * swing)
    trans = np.zeros((len(t), 3))
    trans[:, 1] = PELVIS_HEIGHT - 0.03 * swing
    return trans


GENERATORS: Dict[str, Callable] = {
    "walk": _walk,
    "reach": _reach,
    "squat": _squat,
    "kick": _kick,
}

PERIODS = {
    "walk": (56, 80),
    "reach": (80, 150),
    "squat": (90, 160),
    "kick": (60, 110),
}


def synth_clip(kind: str, frames: int, fps: float, rng: np.random.Generator) -> MotionClip:
    """Generate one clip of a concrete kind, drawing its parameters from rng."""
    lo, hi = PERIODS[kind]
    period_frames = int(rng.integers(lo, hi + 1))
    params = {
        "period_s": period_frames / fps,
        "phase": float(rng.uniform(0, 2 * np.pi)),
        "amp": float(rng.uniform(0.75, 1.15)),
        "heading": float(rng.uniform(-np.pi, np.pi)),
        "side": float(rng.uniform()),
    }
    t = np.arange(frames) / fps
    rig = _Rig(frames)
    trans = GENERATORS[kind](rig, t, params)
    return MotionClip(
        local_rot=sixd_encode(rig.rot),
        root_trans=trans,
        fps=fps,
        meta={"kind": kind, "period_frames": period_frames},
    )


def synth_dataset(
    kind: str,
    count: int,
    frames: int = 120,
    fps: float = 60.0,
    seed: int = 0,
) -> List[MotionClip]:
    """
    Deterministic procedural dataset.

    Args:
        kind: walk, reach, squat, kick or mixed (kind drawn per clip)
        count: number of clips (>= 1)
        frames: frames per clip (>= 2)
        fps: frame rate
        seed: generator seed; equal seeds give bit-identical clips

    Returns:
        list of MotionClip
    """
    if kind not in KINDS:
        raise InvalidArgument(f"unknown motion kind '{kind}', expected one of {KINDS}")
    if count < 1 or frames < 2:
        raise InvalidArgument(f"need count >= 1 and frames >= 2, got count={count}, frames={frames}")
    rng = np.random.default_rng(seed)
    concrete = [k for k in KINDS if k != "mixed"]
    clips = []
    for i in range(count):
        k = concrete[int(rng.integers(len(concrete)))] if kind == "mixed" else kind
        clip = synth_clip(k, frames, fps, rng)
        clip.meta.update({"index": i, "seed": seed})
        clips.append(clip)
    logger.info("synthesized %d %s clips (%d frames @ %.0f fps, seed %d)", count, kind, frames, fps, seed)
    return clips

"""
Motion clip container, sparse condition extraction, windowing and
normalization statistics.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from services.errors import ClipTooShort, DataFormatError, EmptyDataset, InvalidArgument, ShapeMismatch
from services.rotmath import angular_velocity, identity_6d, linear_velocity, sixd_decode, sixd_encode
from services.skeleton import (
    HEAD,
    JOINT_COUNT,
    LEFT_WRIST,
    RIGHT_WRIST,
    Pose,
    ScaleSpec,
    SkeletonDef,
    forward_kinematics_batch,
    project_sequence,
)

logger = logging.getLogger(__name__)

MAGIC = b"MAGE"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIfII")
FRAME_FLOATS = 3 + JOINT_COUNT * 6

OBSERVED_JOINTS = (HEAD, LEFT_WRIST, RIGHT_WRIST)
COND_FEATURES = 18
COND_DIM = len(OBSERVED_JOINTS) * COND_FEATURES
STD_FLOOR = 1e-6


@dataclass
class MotionClip:
    """N frames of local 6D joint rotations plus root translation."""

    local_rot: np.ndarray  # (N, 22, 6)
    root_trans: np.ndarray  # (N, 3) meters
    fps: float = 60.0
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.local_rot = np.asarray(self.local_rot, dtype=np.float64)
        self.root_trans = np.asarray(self.root_trans, dtype=np.float64)
        n = self.local_rot.shape[0]
        if self.local_rot.shape != (n, JOINT_COUNT, 6):
            raise ShapeMismatch(f"local_rot must be (N, {JOINT_COUNT}, 6), got {self.local_rot.shape}")
        if self.root_trans.shape != (n, 3):
            raise ShapeMismatch(f"root_trans must be ({n}, 3), got {self.root_trans.shape}")
        if n < 2:
            raise ClipTooShort(f"a motion clip needs at least 2 frames, got {n}")
        if not self.fps > 0:
            raise DataFormatError(f"fps must be positive, got {self.fps}")

    def __len__(self) -> int:
        return self.local_rot.shape[0]

    @property
    def frames(self) -> List[Pose]:
        return [Pose(self.local_rot[i], self.root_trans[i]) for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "MotionClip":
        return MotionClip(self.local_rot[start:stop], self.root_trans[start:stop], self.fps, dict(self.meta))

    def global_positions(self, skel: SkeletonDef) -> np.ndarray:
        """(N, 22, 3) joint positions from forward kinematics."""
        return forward_kinematics_batch(sixd_decode(self.local_rot), self.root_trans, skel)[1]


@dataclass
class SparseCondition:
    """Per frame and observed joint: (r 6D, omega 6D, p 3, v 3)."""

    features: np.ndarray  # (N, 3, 18)

    def __len__(self) -> int:
        return self.features.shape[0]

    def flat(self) -> np.ndarray:
        return self.features.reshape(len(self), COND_DIM)

    @property
    def head_pos(self) -> np.ndarray:
        return self.features[:, 0, 12:15]

    def slice(self, start: int, stop: int) -> "SparseCondition":
        return SparseCondition(self.features[start:stop])


@dataclass
class Window:
    condition: SparseCondition
    target: Optional[MotionClip]
    start: int
    history_len: int


@dataclass
class NormStats:
    cond_mean: np.ndarray
    cond_std: np.ndarray
    target_mean: Dict[str, np.ndarray]
    target_std: Dict[str, np.ndarray]

    def to_tensors(self) -> Dict[str, np.ndarray]:
        out = {"norm/cond/mean": self.cond_mean, "norm/cond/std": self.cond_std}
        for sid in self.target_mean:
            out[f"norm/{sid}/mean"] = self.target_mean[sid]
            out[f"norm/{sid}/std"] = self.target_std[sid]
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray]) -> "NormStats":
        sids = sorted({k.split("/")[1] for k in tensors if k.startswith("norm/S")})
        return cls(
            cond_mean=tensors["norm/cond/mean"],
            cond_std=tensors["norm/cond/std"],
            target_mean={s: tensors[f"norm/{s}/mean"] for s in sids},
            target_std={s: tensors[f"norm/{s}/std"] for s in sids},
        )


def extract_condition(clip: MotionClip, skel: SkeletonDef) -> SparseCondition:
    """
    Build the head + wrists observation features of a clip.

    Frame 0 has no predecessor, so its angular velocity is the identity
    encoding and its linear velocity is zero. Velocities are per frame.
    """
    g_rot, g_pos = forward_kinematics_batch(sixd_decode(clip.local_rot), clip.root_trans, skel)
    idx = list(OBSERVED_JOINTS)
    rot = g_rot[:, idx]
    pos = g_pos[:, idx]

    omega = np.empty(rot.shape[:2] + (6,))
    omega[0] = identity_6d()
    omega[1:] = sixd_encode(angular_velocity(rot[:-1], rot[1:]))
    vel = np.zeros_like(pos)
    vel[1:] = linear_velocity(pos[:-1], pos[1:])

    features = np.concatenate([sixd_encode(rot), omega, pos, vel], axis=-1)
    return SparseCondition(features)


def window_starts(length: int, window: int = 120, history: int = 12) -> List[int]:
    """
    Start frames of overlapping windows; stride is window - history and the
    last window is right-aligned to the end of the sequence.
    """
    if not 0 <= history < window:
        raise InvalidArgument(f"history must be in [0, {window}), got {history}")
    if length < window:
        raise ClipTooShort(f"sequence of {length} frames is shorter than the {window}-frame window")
    stride = window - history
    starts = [0]
    while starts[-1] + window < length:
        nxt = starts[-1] + stride
        if nxt + window > length:
            nxt = length - window
        starts.append(nxt)
    return starts


def make_windows(
    clip: Optional[MotionClip],
    condition: SparseCondition,
    window: int = 120,
    history: int = 12,
) -> List[Window]:
    """
    Cut a clip (and its condition) into overlapping windows.

    Args:
        clip: ground truth; may be None at inference time
        condition: observation features for the same frames
        window: frames per window
        history: frames shared with the previous window

    Returns:
        windows in temporal order; history_len is the actual overlap with
        the previous window (larger than `history` only for a right-aligned tail)
    """
    starts = window_starts(len(condition), window, history)
    out = []
    prev_end = 0
    for s in starts:
        out.append(
            Window(
                condition=condition.slice(s, s + window),
                target=clip.slice(s, s + window) if clip is not None else None,
                start=s,
                history_len=max(0, prev_end - s),
            )
        )
        prev_end = s + window
    return out


def fit_channel_stats(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-channel mean and (population) std over all leading axes.

    Raises:
        EmptyDataset: no rows to fit on
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.size == 0:
        raise EmptyDataset("cannot fit normalization statistics on an empty dataset")
    rows = x.reshape(-1, x.shape[-1])
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return mean, std


def apply_norm(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def invert_norm(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return x * std + mean


def scale_targets(local_rot: np.ndarray, scales: Dict[str, ScaleSpec]) -> Dict[str, np.ndarray]:
    """(..., 22, 6) local rotations -> flat per-scale targets (..., node_count * 6)."""
    lead = local_rot.shape[:-2]
    return {sid: project_sequence(local_rot, spec).reshape(lead + (-1,)) for sid, spec in scales.items()}


def fit_normstats(
    clips: Sequence[MotionClip],
    skel: SkeletonDef,
    scales: Dict[str, ScaleSpec],
) -> NormStats:
    """Fit condition and per-scale target statistics over every frame of the dataset."""
    if not clips:
        raise EmptyDataset("cannot fit normalization statistics on an empty dataset")
    cond = np.concatenate([extract_condition(c, skel).flat() for c in clips])
    rot = np.concatenate([c.local_rot for c in clips])
    cond_mean, cond_std = fit_channel_stats(cond)
    t_mean, t_std = {}, {}
    for sid, target in scale_targets(rot, scales).items():
        t_mean[sid], t_std[sid] = fit_channel_stats(target)
    logger.info("fitted normalization over %d clips / %d frames", len(clips), rot.shape[0])
    return NormStats(cond_mean, cond_std, t_mean, t_std)


@dataclass
class TrainingArrays:
    cond: np.ndarray  # (W, N, 54) normalized
    targets: Dict[str, np.ndarray]  # sid -> (W, N, dim) normalized

    def __len__(self) -> int:
        return self.cond.shape[0]


def build_training_arrays(
    clips: Sequence[MotionClip],
    skel: SkeletonDef,
    scales: Dict[str, ScaleSpec],
    stats: NormStats,
    window: int = 120,
    history: int = 12,
) -> TrainingArrays:
    """
    Window every clip and produce normalized conditions and stage targets.

    The S3 target is the normalized window itself; coarser targets are the
    projection of the raw window, normalized with their own statistics.
    """
    if not clips:
        raise EmptyDataset("no clips to build training windows from")
    conds, rots = [], []
    for clip in clips:
        cond = extract_condition(clip, skel)
        for w in make_windows(clip, cond, window, history):
            conds.append(w.condition.flat())
            rots.append(w.target.local_rot)
    cond = apply_norm(np.stack(conds), stats.cond_mean, stats.cond_std)
    raw = scale_targets(np.stack(rots), scales)
    targets = {sid: apply_norm(v, stats.target_mean[sid], stats.target_std[sid]) for sid, v in raw.items()}
    return TrainingArrays(cond=cond, targets=targets)


def split_dataset(
    clips: Sequence[MotionClip], holdout: int, seed: int = 0
) -> Tuple[List[MotionClip], List[MotionClip]]:
    """Deterministic train / held-out split; the held-out set has `holdout` clips."""
    if not 0 <= holdout < len(clips):
        raise InvalidArgument(f"holdout must be in [0, {len(clips)}), got {holdout}")
    order = np.random.default_rng(seed).permutation(len(clips))
    held = set(order[:holdout].tolist())
    train = [c for i, c in enumerate(clips) if i not in held]
    test = [c for i, c in enumerate(clips) if i in held]
    return train, test


def save_clip(path: Union[str, Path], clip: MotionClip) -> None:
    """Write a clip in the little-endian MAGE container format."""
    body = np.concatenate(
        [clip.root_trans, clip.local_rot.reshape(len(clip), JOINT_COUNT * 6)], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, float(clip.fps), JOINT_COUNT, len(clip)))
        f.write(body.tobytes())


def load_clip(path: Union[str, Path]) -> MotionClip:
    """
    Read a MAGE container file.

    Raises:
        DataFormatError: bad magic, version, joint count or truncated body
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read motion file {path}: {e}") from e
    if len(data) < HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, fps, joints, frames = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    if joints != JOINT_COUNT:
        raise DataFormatError(f"{path}: expected {JOINT_COUNT} joints, found {joints}")
    expected = HEADER.size + frames * FRAME_FLOATS * 4
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(frames, FRAME_FLOATS)
    body = body.astype(np.float64)
    return MotionClip(
        local_rot=body[:, 3:].reshape(frames, JOINT_COUNT, 6),
        root_trans=body[:, :3],
        fps=float(fps),
    )


def save_dataset(directory: Union[str, Path], clips: Sequence[MotionClip]) -> Path:
    """Write clips/NNNNN.mage files plus a manifest.yaml listing them."""
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, clip in enumerate(clips):
        rel = f"clips/{i:05d}.mage"
        save_clip(directory / rel, clip)
        entries.append({"file": rel, "frames": len(clip), "fps": float(clip.fps), **_plain(clip.meta)})
    manifest = directory / "manifest.yaml"
    with open(manifest, "w") as f:
        yaml.safe_dump({"format_version": FORMAT_VERSION, "clips": entries}, f, sort_keys=False)
    logger.info("wrote %d clips to %s", len(clips), directory)
    return manifest


def load_dataset(directory: Union[str, Path]) -> List[MotionClip]:
    """
    Read every clip listed in a dataset manifest.

    Raises:
        DataFormatError: missing or malformed manifest
        EmptyDataset: manifest lists no clips
    """
    directory = Path(directory)
    manifest = directory / "manifest.yaml"
    try:
        with open(manifest, "r") as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise DataFormatError(f"cannot read dataset manifest {manifest}: {e}") from e
    if not isinstance(raw, dict) or not isinstance(raw.get("clips"), list):
        raise DataFormatError(f"{manifest}: expected a mapping with a 'clips' list")
    if not raw["clips"]:
        raise EmptyDataset(f"{manifest} lists no clips")
    clips = []
    for i, entry in enumerate(raw["clips"]):
        if not isinstance(entry, dict) or not isinstance(entry.get("file"), str):
            raise DataFormatError(f"{manifest}: clip entry {i} has no 'file'")
        clip = load_clip(directory / entry["file"])
        clip.meta = {k: v for k, v in entry.items() if k not in ("file", "frames", "fps")}
        clips.append(clip)
    return clips


def _plain(meta: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for k, v in meta.items():
        out[k] = v.item() if isinstance(v, np.generic) else v
    return out

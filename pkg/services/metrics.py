"""
Motion evaluation: rotation, position, velocity and jerk errors, region
position errors, per-clip and aggregate reports, and the two reference
baselines (rest pose and mean pose).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from services.dataio import MotionClip
from services.errors import ClipTooShort, EmptyDataset, LengthMismatch
from services.rotmath import chordal_mean, geodesic_angle_deg, identity_6d, sixd_decode, sixd_encode
from services.skeleton import HEAD, JOINT_COUNT, SkeletonDef, anchor_root

logger = logging.getLogger(__name__)

AGGREGATE = "__aggregate__"
METRIC_NAMES = ("mpjre", "mpjpe", "mpjve", "jitter", "root_pe", "hand_pe", "upper_pe", "lower_pe", "gt_jitter")


@dataclass(frozen=True)
class RegionSpec:
    root: FrozenSet[int] = frozenset({0})
    hand: FrozenSet[int] = frozenset({20, 21})
    upper: FrozenSet[int] = frozenset({3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21})
    lower: FrozenSet[int] = frozenset({0, 1, 2, 4, 5, 7, 8, 10, 11})

    def __post_init__(self):
        for name in ("root", "hand", "upper", "lower"):
            joints = getattr(self, name)
            if not joints or any(not 0 <= j < JOINT_COUNT for j in joints):
                raise ValueError(f"region '{name}' must list joints within 0..{JOINT_COUNT - 1}")

    def joints(self, region: str) -> List[int]:
        return sorted(getattr(self, region))


REGIONS = RegionSpec()


def _check_pair(pred: MotionClip, gt: MotionClip) -> None:
    if len(pred) != len(gt):
        raise LengthMismatch(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    if pred.fps != gt.fps:
        raise LengthMismatch(f"prediction runs at {pred.fps} fps, ground truth at {gt.fps}")


def mpjre(pred: MotionClip, gt: MotionClip) -> float:
    """Mean per-joint local rotation error in degrees."""
    _check_pair(pred, gt)
    angles = geodesic_angle_deg(sixd_decode(pred.local_rot), sixd_decode(gt.local_rot))
    return float(angles.mean())


def _joint_errors(pred: MotionClip, gt: MotionClip, skel: SkeletonDef) -> np.ndarray:
    _check_pair(pred, gt)
    return np.linalg.norm(pred.global_positions(skel) - gt.global_positions(skel), axis=-1)


def mpjpe(pred: MotionClip, gt: MotionClip, skel: SkeletonDef) -> float:
    """Mean per-joint position error in centimeters."""
    return float(_joint_errors(pred, gt, skel).mean() * 100.0)


def region_pe(
    pred: MotionClip,
    gt: MotionClip,
    skel: SkeletonDef,
    region: str,
    regions: RegionSpec = REGIONS,
) -> float:
    """Mean position error over one joint region (root, hand, upper, lower) in centimeters."""
    err = _joint_errors(pred, gt, skel)
    return float(err[:, regions.joints(region)].mean() * 100.0)


def velocities(positions: np.ndarray, fps: float) -> np.ndarray:
    """Backward differences (N-1, J, 3) in meters per second."""
    return np.diff(positions, axis=0) * fps


def mpjve(pred: MotionClip, gt: MotionClip, skel: SkeletonDef) -> float:
    """Mean per-joint velocity error in cm/s over frames 1..N-1."""
    _check_pair(pred, gt)
    dv = velocities(pred.global_positions(skel), pred.fps) - velocities(gt.global_positions(skel), gt.fps)
    return float(np.linalg.norm(dv, axis=-1).mean() * 100.0)


def jerk(positions: np.ndarray, fps: float) -> np.ndarray:
    """Third backward difference p[n] - 3p[n-1] + 3p[n-2] - p[n-3], scaled by fps^3."""
    p = positions
    return (p[3:] - 3.0 * p[2:-1] + 3.0 * p[1:-2] - p[:-3]) * fps**3


def jitter(clip: MotionClip, skel: SkeletonDef) -> float:
    """
    Mean jerk magnitude over frames 3..N-1 and all joints, in units of 10^2 m/s^3.

    Raises:
        ClipTooShort: fewer than 4 frames
    """
    if len(clip) < 4:
        raise ClipTooShort(f"jitter needs at least 4 frames, got {len(clip)}")
    j = jerk(clip.global_positions(skel), clip.fps)
    return float(np.linalg.norm(j, axis=-1).mean() / 100.0)


@dataclass
class ClipMetrics:
    clip: str
    frames: int
    mpjre: float
    mpjpe: float
    mpjve: float
    jitter: float
    root_pe: float
    hand_pe: float
    upper_pe: float
    lower_pe: float
    gt_jitter: float


@dataclass
class EvalReport:
    clips: List[ClipMetrics] = field(default_factory=list)
    aggregate: Optional[ClipMetrics] = None

    def records(self) -> List[Dict]:
        """One plain dict per clip, then the aggregate."""
        out = [asdict(c) for c in self.clips]
        if self.aggregate is not None:
            out.append(asdict(self.aggregate))
        return out


def clip_metrics(pred: MotionClip, gt: MotionClip, skel: SkeletonDef, name: str = "", regions: RegionSpec = REGIONS):
    """Every metric for one clip pair, with forward kinematics run once per clip."""
    _check_pair(pred, gt)
    if len(gt) < 4:
        raise ClipTooShort(f"evaluation needs at least 4 frames, got {len(gt)}")
    pp, gp = pred.global_positions(skel), gt.global_positions(skel)
    err = np.linalg.norm(pp - gp, axis=-1) * 100.0
    dv = velocities(pp, pred.fps) - velocities(gp, gt.fps)
    return ClipMetrics(
        clip=name,
        frames=len(gt),
        mpjre=mpjre(pred, gt),
        mpjpe=float(err.mean()),
        mpjve=float(np.linalg.norm(dv, axis=-1).mean() * 100.0),
        jitter=float(np.linalg.norm(jerk(pp, pred.fps), axis=-1).mean() / 100.0),
        root_pe=float(err[:, regions.joints("root")].mean()),
        hand_pe=float(err[:, regions.joints("hand")].mean()),
        upper_pe=float(err[:, regions.joints("upper")].mean()),
        lower_pe=float(err[:, regions.joints("lower")].mean()),
        gt_jitter=float(np.linalg.norm(jerk(gp, gt.fps), axis=-1).mean() / 100.0),
    )


def aggregate(rows: Sequence[ClipMetrics]) -> ClipMetrics:
    """Frame-weighted mean of per-clip metrics."""
    if not rows:
        raise EmptyDataset("no clips to aggregate")
    w = np.array([r.frames for r in rows], dtype=np.float64)
    values = {m: float(np.average([getattr(r, m) for r in rows], weights=w)) for m in METRIC_NAMES}
    return ClipMetrics(clip=AGGREGATE, frames=int(w.sum()), **values)


def evaluate_clips(
    preds: Sequence[MotionClip],
    gts: Sequence[MotionClip],
    skel: SkeletonDef,
    names: Optional[Sequence[str]] = None,
    regions: RegionSpec = REGIONS,
    progress: bool = False,
) -> EvalReport:
    """
    Evaluate paired clips.

    Raises:
        LengthMismatch: different number of predictions and references, or a pair differs in length
        EmptyDataset: nothing to evaluate
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions for {len(gts)} reference clips")
    names = names or [str(gt.meta.get("index", i)) for i, gt in enumerate(gts)]
    rows = [
        clip_metrics(p, g, skel, name=n, regions=regions)
        for p, g, n in tqdm(list(zip(preds, gts, names)), desc="eval", disable=not progress)
    ]
    report = EvalReport(clips=rows, aggregate=aggregate(rows))
    logger.info(
        "evaluated %d clips: MPJPE %.2f cm, MPJRE %.2f deg",
        len(rows),
        report.aggregate.mpjpe,
        report.aggregate.mpjre,
    )
    return report


def _head_positions(clip: MotionClip, skel: SkeletonDef) -> np.ndarray:
    return clip.global_positions(skel)[:, HEAD]


def _constant_pose_clip(pose: np.ndarray, gt: MotionClip, skel: SkeletonDef, label: str) -> MotionClip:
    local = np.broadcast_to(pose, (len(gt), JOINT_COUNT, 6)).copy()
    root = anchor_root(local, _head_positions(gt, skel), skel)
    return MotionClip(local, root, gt.fps, {**gt.meta, "baseline": label})


def rest_pose_baseline(gt: MotionClip, skel: SkeletonDef) -> MotionClip:
    """Identity local rotations everywhere, root placed so the head follows the observed head."""
    return _constant_pose_clip(np.broadcast_to(identity_6d(), (JOINT_COUNT, 6)), gt, skel, "rest")


def mean_local_pose(clips: Sequence[MotionClip]) -> np.ndarray:
    """Per-joint chordal mean of every local rotation in the clips: (22, 6)."""
    if not clips:
        raise EmptyDataset("cannot average the pose of an empty dataset")
    mats = sixd_decode(np.concatenate([c.local_rot for c in clips]))
    return sixd_encode(chordal_mean(np.swapaxes(mats, 0, 1)))


def mean_pose_baseline(gt: MotionClip, mean_pose: np.ndarray, skel: SkeletonDef) -> MotionClip:
    """The dataset's mean local pose on every frame, root placed from the observed head."""
    return _constant_pose_clip(mean_pose, gt, skel, "mean")

"""
22-joint kinematic tree, forward kinematics and the multi-scale
(6 / 11 / 22 node) skeleton representation.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from services.errors import SkeletonConfigError
from services.rotmath import chordal_mean, sixd_decode, sixd_encode
from services.settings import get_settings

logger = logging.getLogger(__name__)

JOINT_COUNT = 22
HEAD = 15
LEFT_WRIST = 20
RIGHT_WRIST = 21
SCALE_IDS = ("S1", "S2", "S3")


class SkeletonFile(BaseModel):
    """Schema of skeleton.yaml; validators enforce the tree and partition invariants."""

    model_config = ConfigDict(extra="forbid")

    names: List[str]
    parents: List[int]
    offsets: List[List[float]]
    scales: Dict[str, Dict[str, List[int]]]
    composite_mode: Literal["chordal_mean", "representative"] = "chordal_mean"
    representatives: Dict[str, Dict[str, int]] = {}

    @model_validator(mode="after")
    def check_tree(self):
        n = len(self.parents)
        if n != JOINT_COUNT:
            raise ValueError(f"expected {JOINT_COUNT} joints, got {n} parents")
        if len(self.names) != n or len(self.offsets) != n:
            raise ValueError(
                f"names ({len(self.names)}), parents ({n}) and offsets ({len(self.offsets)}) must have equal length"
            )
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            p = self.parents[j]
            if p < 0:
                raise ValueError(f"joint {j} ({self.names[j]}) is a second root")
            if p >= j:
                raise ValueError(
                    f"joint {j} ({self.names[j]}) has parent {p}; parents must precede children"
                )
        for j, off in enumerate(self.offsets):
            if len(off) != 3 or not all(np.isfinite(off)):
                raise ValueError(f"offset of joint {j} ({self.names[j]}) must be 3 finite numbers")
        return self

    @model_validator(mode="after")
    def check_scales(self):
        if set(self.scales) != {"S1", "S2"}:
            raise ValueError(f"scales must define exactly S1 and S2, got {sorted(self.scales)}")
        every = set(range(JOINT_COUNT))
        for sid, groups in self.scales.items():
            seen = set()
            for gname, members in groups.items():
                if not members:
                    raise ValueError(f"{sid} group '{gname}' is empty")
                for j in members:
                    if j not in every:
                        raise ValueError(f"{sid} group '{gname}' has out-of-range joint {j}")
                    if j in seen:
                        raise ValueError(f"{sid} joint {j} appears in more than one group")
                    seen.add(j)
            if seen != every:
                raise ValueError(f"{sid} groups miss joints {sorted(every - seen)}")
        fine = [set(m) for m in self.scales["S2"].values()]
        for gname, members in self.scales["S1"].items():
            coarse = set(members)
            for f in fine:
                if f & coarse and not f <= coarse:
                    raise ValueError(
                        f"S2 group {sorted(f)} straddles S1 group '{gname}'; scales must nest"
                    )
        for sid, reps in self.representatives.items():
            for gname, j in reps.items():
                if j not in self.scales.get(sid, {}).get(gname, []):
                    raise ValueError(f"representative {j} is not a member of {sid} group '{gname}'")
        return self


@dataclass(frozen=True)
class SkeletonDef:
    parent: np.ndarray
    offset: np.ndarray
    names: Tuple[str, ...]

    @property
    def joint_count(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ScaleSpec:
    scale_id: str
    groups: Tuple[Tuple[int, ...], ...]
    group_names: Tuple[str, ...]
    coarse_parent: Tuple[int, ...]
    representatives: Tuple[int, ...]
    composite_mode: str = "chordal_mean"

    @property
    def node_count(self) -> int:
        return len(self.groups)

    @property
    def is_identity(self) -> bool:
        return all(len(g) == 1 for g in self.groups) and tuple(g[0] for g in self.groups) == tuple(
            range(len(self.groups))
        )


@dataclass
class Pose:
    local_rot: np.ndarray  # (22, 6)
    root_trans: np.ndarray  # (3,)


@dataclass
class GlobalPose:
    global_rot: np.ndarray  # (22, 3, 3)
    global_pos: np.ndarray  # (22, 3)


def _build_scale(
    sid: str,
    groups: Dict[str, List[int]],
    parent: np.ndarray,
    mode: str,
    reps: Dict[str, int],
) -> ScaleSpec:
    names = tuple(groups)
    members = tuple(tuple(sorted(groups[n])) for n in names)
    owner = {}
    for g, mem in enumerate(members):
        for j in mem:
            owner[j] = g
    coarse_parent = []
    representatives = []
    for name, mem in zip(names, members):
        # kinematic root of the group is its smallest index (parents precede children)
        root = mem[0]
        p = int(parent[root])
        coarse_parent.append(-1 if p < 0 else owner[p])
        representatives.append(reps.get(name, root))
    return ScaleSpec(
        scale_id=sid,
        groups=members,
        group_names=names,
        coarse_parent=tuple(coarse_parent),
        representatives=tuple(representatives),
        composite_mode=mode,
    )


def parse_skeleton(raw: dict) -> Tuple[SkeletonDef, Dict[str, ScaleSpec]]:
    """
    Validate a skeleton description and build the definition plus its scales.

    Raises:
        SkeletonConfigError: with the first violated invariant in the message
    """
    try:
        cfg = SkeletonFile.model_validate(raw)
    except ValidationError as e:
        raise SkeletonConfigError(f"invalid skeleton config: {e}") from e

    parent = np.asarray(cfg.parents, dtype=np.int64)
    skel = SkeletonDef(
        parent=parent,
        offset=np.asarray(cfg.offsets, dtype=np.float64),
        names=tuple(cfg.names),
    )
    scales = {
        sid: _build_scale(sid, cfg.scales[sid], parent, cfg.composite_mode, cfg.representatives.get(sid, {}))
        for sid in ("S1", "S2")
    }
    scales["S3"] = _build_scale(
        "S3", {n: [j] for j, n in enumerate(cfg.names)}, parent, cfg.composite_mode, {}
    )
    return skel, scales


@lru_cache(maxsize=8)
def _load_cached(path: str) -> Tuple[SkeletonDef, Dict[str, ScaleSpec]]:
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise SkeletonConfigError(f"cannot read skeleton config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise SkeletonConfigError(f"skeleton config {path} must be a mapping")
    skel, scales = parse_skeleton(raw)
    logger.debug("loaded skeleton from %s (%d joints)", path, skel.joint_count)
    return skel, scales


def load_skeleton(path: Optional[Union[str, Path]] = None) -> Tuple[SkeletonDef, Dict[str, ScaleSpec]]:
    """Load (and cache) the skeleton definition and its S1/S2/S3 scale specs."""
    path = path or get_settings().skeleton_path
    return _load_cached(str(path))


def forward_kinematics_batch(
    local_rot: np.ndarray, root_trans: np.ndarray, skel: SkeletonDef
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized forward kinematics.

    Args:
        local_rot: (..., 22, 3, 3) local rotation matrices
        root_trans: (..., 3) root translation in meters
        skel: skeleton definition

    Returns:
        (global_rot (..., 22, 3, 3), global_pos (..., 22, 3))
    """
    local_rot = np.asarray(local_rot, dtype=np.float64)
    root_trans = np.asarray(root_trans, dtype=np.float64)
    J = skel.joint_count
    g_rot = np.empty_like(local_rot)
    g_pos = np.empty(local_rot.shape[:-2] + (3,))
    g_rot[..., 0, :, :] = local_rot[..., 0, :, :]
    g_pos[..., 0, :] = root_trans
    for j in range(1, J):
        p = skel.parent[j]
        g_rot[..., j, :, :] = g_rot[..., p, :, :] @ local_rot[..., j, :, :]
        g_pos[..., j, :] = g_pos[..., p, :] + g_rot[..., p, :, :] @ skel.offset[j]
    return g_rot, g_pos


def forward_kinematics(pose: Pose, skel: SkeletonDef) -> GlobalPose:
    g_rot, g_pos = forward_kinematics_batch(sixd_decode(pose.local_rot), pose.root_trans, skel)
    return GlobalPose(global_rot=g_rot, global_pos=g_pos)


def project_sequence(frames: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    """
    Project local 6D rotations onto the composite nodes of a scale.

    Args:
        frames: (..., 22, 6) local rotations
        spec: target scale

    Returns:
        (..., node_count, 6); the input itself for the 22-singleton scale
    """
    frames = np.asarray(frames, dtype=np.float64)
    if spec.is_identity:
        return frames.copy()
    if spec.composite_mode == "representative":
        return frames[..., list(spec.representatives), :].copy()

    mats = sixd_decode(frames)
    out = np.empty(frames.shape[:-2] + (spec.node_count, 6))
    for g, members in enumerate(spec.groups):
        if len(members) == 1:
            out[..., g, :] = sixd_encode(mats[..., members[0], :, :])
        else:
            out[..., g, :] = sixd_encode(chordal_mean(mats[..., list(members), :, :]))
    return out


def project_to_scale(frame: np.ndarray, spec: ScaleSpec) -> np.ndarray:
    """Single-frame form of project_sequence: (22, 6) -> (node_count, 6)."""
    return project_sequence(frame, spec)


def scale_dim(spec: ScaleSpec) -> int:
    return spec.node_count * 6


def nesting_map(fine: ScaleSpec, coarse: ScaleSpec) -> List[List[int]]:
    """For each coarse group, the indices of the fine nodes it contains."""
    fine_sets = [set(g) for g in fine.groups]
    return [[i for i, f in enumerate(fine_sets) if f <= set(c)] for c in coarse.groups]


def rest_positions(skel: SkeletonDef) -> np.ndarray:
    """Global joint positions of the rest pose with the root at the origin."""
    eye = np.broadcast_to(np.eye(3), (skel.joint_count, 3, 3))
    return forward_kinematics_batch(eye, np.zeros(3), skel)[1]


def anchor_root(local_rot: np.ndarray, head_pos: np.ndarray, skel: SkeletonDef, head: int = HEAD) -> np.ndarray:
    """
    Root translations that put the head joint at the observed positions.

    Args:
        local_rot: (N, 22, 6) local rotations
        head_pos: (N, 3) observed head positions
        skel: skeleton definition
        head: index of the anchoring joint

    Returns:
        (N, 3) root translations
    """
    local_rot = np.asarray(local_rot, dtype=np.float64)
    zeros = np.zeros(local_rot.shape[:-2] + (3,))
    rel = forward_kinematics_batch(sixd_decode(local_rot), zeros, skel)[1][..., head, :]
    return np.asarray(head_pos, dtype=np.float64) - rel

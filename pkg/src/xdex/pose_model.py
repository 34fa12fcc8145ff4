"""Rigid 21-keypoint human hand skeleton driven by 15 axis-angle finger joints.

Frame convention (wrist frame, meters): +x points from the wrist toward the
fingertips, +y toward the thumb side, +z out of the back of the hand. A
positive rotation about +y curls a finger toward the palm.

Keypoint layout: index 0 is the wrist, then four keypoints per finger
(MCP, PIP, DIP, TIP) for thumb, index, middle, ring, little. Pose joints
sit at the MCP, PIP and DIP keypoints of each finger, in the same finger
order, so a 45-vector reads as 5 fingers x 3 joints x 3 coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "little")
N_KEYPOINTS = 21
N_JOINTS = 15
POSE_DIM = 3 * N_JOINTS
WRIST = 0


def tip_index(finger: str) -> int:
    """Keypoint index of the TIP of ``finger``."""
    return 1 + 4 * FINGERS.index(finger) + 3


def _standard_joint_at() -> np.ndarray:
    joint_at = np.full(N_KEYPOINTS, -1, dtype=np.int64)
    for f in range(5):
        for j in range(3):
            joint_at[1 + 4 * f + j] = 3 * f + j
    return joint_at


@dataclass(frozen=True, eq=False)
class HandSkeleton:
    """Keypoint tree with rest-pose bone offsets.

    ``joint_at[i]`` is the pose joint located at keypoint ``i`` (or -1). A
    joint rotates every bone below the keypoint it sits on, so the bone
    leading into keypoint ``c`` is rotated by the joint at ``parent[c]`` and
    all joints above it.
    """

    parent: np.ndarray
    rest_offset: np.ndarray
    names: tuple[str, ...] = ()
    joint_at: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        offset = np.asarray(self.rest_offset, dtype=np.float64)
        n = len(parent)
        if offset.shape != (n, 3):
            raise ValueError(f"rest_offset must be {n}x3, got {offset.shape}")
        if n == 0 or parent[0] != -1:
            raise ValueError("keypoint 0 must be the single root (parent -1)")
        for i in range(1, n):
            if not 0 <= parent[i] < i:
                raise ValueError(
                    f"keypoint {i} has parent {parent[i]}; parents must precede children"
                )
        lengths = np.linalg.norm(offset[1:], axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError("all bone lengths must be positive")
        if self.joint_at is None:
            if n != N_KEYPOINTS:
                raise ValueError("joint_at is required for non-standard skeletons")
            joint_at = _standard_joint_at()
        else:
            joint_at = np.asarray(self.joint_at, dtype=np.int64)
            if joint_at.shape != (n,):
                raise ValueError("joint_at must have one entry per keypoint")
        names = tuple(self.names) if self.names else tuple(f"k{i}" for i in range(n))
        for arr in (parent, offset, joint_at):
            arr.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "rest_offset", offset)
        object.__setattr__(self, "joint_at", joint_at)
        object.__setattr__(self, "names", names)

    @property
    def n_keypoints(self) -> int:
        return len(self.parent)

    @property
    def n_joints(self) -> int:
        return int(self.joint_at.max()) + 1 if np.any(self.joint_at >= 0) else 0

    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.rest_offset[1:], axis=1)

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "parent": self.parent.tolist(),
            "rest_offset": self.rest_offset.tolist(),
        }


def load_skeleton(path: str | Path) -> HandSkeleton:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return HandSkeleton(
        parent=doc["parent"],
        rest_offset=doc["rest_offset"],
        names=tuple(doc.get("names", ())),
        joint_at=doc.get("joint_at"),
    )


def default_skeleton() -> HandSkeleton:
    """Skeleton with typical adult bone lengths, shipped as ``skeleton_default.json``."""
    ref = resources.files("xdex") / "data" / "skeleton_default.json"
    with resources.as_file(ref) as path:
        return load_skeleton(path)


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix of an axis-angle 3-vector."""
    v = np.asarray(axis_angle, dtype=np.float64)
    return rodrigues_batch(v.reshape(1, 3))[0]


def rodrigues_batch(axis_angles: np.ndarray) -> np.ndarray:
    """(N, 3) axis-angle vectors to (N, 3, 3) rotations."""
    v = np.asarray(axis_angles, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # sin(t)/t and (1 - cos t)/t^2 with their Taylor limits near zero
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def canonicalize(theta) -> np.ndarray:
    """Wrap every axis-angle block with norm > pi to the equivalent one with norm <= pi."""
    t = np.array(theta, dtype=np.float64)
    blocks = t.reshape(*t.shape[:-1], -1, 3)
    norm = np.linalg.norm(blocks, axis=-1)
    wrap = norm > np.pi
    if np.any(wrap):
        safe = np.where(wrap, norm, 1.0)
        angle = np.mod(norm + np.pi, 2.0 * np.pi) - np.pi
        # mod can land exactly on -pi; the same rotation is +pi
        angle = np.where(angle == -np.pi, np.pi, angle)
        scale = np.where(wrap, angle / safe, 1.0)
        blocks = blocks * scale[..., None]
    return blocks.reshape(t.shape)


def validate_pose(theta, dim: int = POSE_DIM) -> np.ndarray:
    t = np.asarray(theta, dtype=np.float64)
    if t.shape[-1] != dim:
        raise ValueError(f"pose must have {dim} coordinates, got {t.shape[-1]}")
    if not np.all(np.isfinite(t)):
        raise ValueError("pose contains non-finite values")
    return canonicalize(t)


def hand_keypoints(skeleton: HandSkeleton, pose) -> np.ndarray:
    """Keypoint positions (n_keypoints, 3) in the wrist frame for one pose."""
    theta = np.asarray(pose, dtype=np.float64)
    if theta.ndim != 1:
        raise ValueError("hand_keypoints expects a single pose; use hand_keypoints_batch")
    return hand_keypoints_batch(skeleton, theta[None, :])[0]


def hand_keypoints_batch(skeleton: HandSkeleton, poses) -> np.ndarray:
    """Keypoint positions (N, n_keypoints, 3) for a batch of poses."""
    theta = np.asarray(poses, dtype=np.float64)
    n_joints = skeleton.n_joints
    if theta.ndim != 2 or theta.shape[1] != 3 * n_joints:
        raise ValueError(
            f"poses must be (N, {3 * n_joints}) for this skeleton, got {theta.shape}"
        )
    N = theta.shape[0]
    rot = rodrigues_batch(theta.reshape(N * n_joints, 3)).reshape(N, n_joints, 3, 3)
    n = skeleton.n_keypoints
    pos = np.zeros((N, n, 3))
    glob = np.empty((N, n, 3, 3))
    for i in range(n):
        p = skeleton.parent[i]
        if p < 0:
            g = np.broadcast_to(np.eye(3), (N, 3, 3))
        else:
            pos[:, i] = pos[:, p] + glob[:, p] @ skeleton.rest_offset[i]
            g = glob[:, p]
        j = skeleton.joint_at[i]
        glob[:, i] = g @ rot[:, j] if j >= 0 else g
    return pos

"""Action and observation plumbing plus the lift-task reward and rollout scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from xdex.eigengrasp import EigengraspBasis, synthesize
from xdex.pose_model import FINGERS, HandSkeleton, default_skeleton, hand_keypoints
from xdex.retarget import RetargetConfig, map_targets, resolve_scale, solve
from xdex.robot_hand import HandFrames, RobotHandModel
from xdex.surrogate import MlpParams, predict

ARM_DOF = 6
SLOTS = ("palm",) + FINGERS
TARGET_HEIGHT = 0.6
INITIAL_HEIGHT = 0.3
NEAR_TIPS = 0.12
NEAR_PALM = 0.15
HEIGHT_BAND = 0.05
SUCCESS_BONUS = 200.0
STEPS_TO_SUCCEED = {"test": 30, "train": 60}
ATTACH_DISTANCE = 0.08


# --------------------------------------------------------------------------
# actions


@dataclass
class HandSession:
    """Per-hand action state. ``q_prev`` is owned here and updated by the oracle backend."""

    basis: EigengraspBasis
    model: RobotHandModel
    skeleton: HandSkeleton = field(default_factory=default_skeleton)
    config: RetargetConfig = field(default_factory=RetargetConfig)
    backend: str = "oracle"
    params: MlpParams | None = None
    q_prev: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.backend not in ("oracle", "surrogate"):
            raise ValueError(f"backend must be 'oracle' or 'surrogate', got {self.backend!r}")
        if self.backend == "surrogate" and self.params is None:
            raise ValueError("surrogate backend needs trained params")
        if self.q_prev is None:
            self.q_prev = self.model.mid_range()
        if self.scale is None:
            self.scale = resolve_scale(self.model, self.config, self.skeleton)


@dataclass(frozen=True)
class CrossDexAction:
    arm_targets: np.ndarray  # 6 arm joint targets, passed through untouched
    w: np.ndarray  # eigengrasp weights

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.arm_targets, self.w])


def act(action: CrossDexAction, session: HandSession) -> dict[str, np.ndarray]:
    """Map an eigengrasp action to arm and hand joint targets."""
    if session is None:
        raise ValueError("session is not initialized")
    arm = action.arm_targets
    if np.shape(arm) != (ARM_DOF,):
        raise ValueError(f"arm targets must have {ARM_DOF} values")
    w = np.asarray(action.w, dtype=np.float64)
    if w.shape != (session.basis.k,):
        raise ValueError(f"expected {session.basis.k} eigengrasp weights, got {w.shape}")
    theta = synthesize(session.basis, w)
    if session.backend == "surrogate":
        hand = predict(session.params, theta[None, :])[0]
    else:
        kp = hand_keypoints(session.skeleton, theta)
        targets = map_targets(kp, session.model, session.scale)
        hand = solve(session.model, targets, session.q_prev, session.config).q
        session.q_prev = hand
    return {"arm_targets": arm, "hand_targets": hand}


# --------------------------------------------------------------------------
# observations


def observation_dim(k: int) -> int:
    return ARM_DOF + 3 * len(SLOTS) + 7 + ARM_DOF + k


def hand_slots(frames: HandFrames, finger_tags) -> np.ndarray:
    """(6, 3) [palm, thumb, index, middle, ring, little]; absent fingers take the palm position."""
    tags = tuple(finger_tags)
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate finger tags {tags}")
    if len(tags) != len(frames.tips):
        raise ValueError("one finger tag per fingertip is required")
    slots = np.tile(np.asarray(frames.palm, dtype=np.float64), (len(SLOTS), 1))
    for tag, tip in zip(tags, frames.tips):
        if tag not in FINGERS:
            raise ValueError(f"unknown finger tag {tag!r}")
        slots[SLOTS.index(tag)] = tip
    return slots


def normalize_quaternion(quat) -> np.ndarray:
    q = np.asarray(quat, dtype=np.float64)
    n = np.linalg.norm(q)
    if q.shape != (4,) or not n > 0:
        raise ValueError("object quaternion must be a non-zero (x, y, z, w) 4-vector")
    return q / n


def build_observation(arm_joints, frames: HandFrames, finger_tags, object_pose, prev_action) -> np.ndarray:
    """Concatenate [arm joints 6 | hand slots 18 | object pos 3 + quat xyzw 4 | previous action]."""
    arm = np.asarray(arm_joints, dtype=np.float64)
    if arm.shape != (ARM_DOF,):
        raise ValueError(f"arm joints must have {ARM_DOF} values")
    pose = np.asarray(object_pose, dtype=np.float64)
    if pose.shape != (7,):
        raise ValueError("object pose must be position (3) + quaternion (4)")
    prev = np.asarray(prev_action, dtype=np.float64).ravel()
    return np.concatenate([
        arm,
        hand_slots(frames, finger_tags).ravel(),
        pose[:3],
        normalize_quaternion(pose[3:]),
        prev,
    ])


# --------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class SceneState:
    palm: np.ndarray
    tips: np.ndarray  # (n, 3), n >= 1
    object_center: np.ndarray
    object_initial_xy: np.ndarray

    @property
    def height(self) -> float:
        return float(self.object_center[2])

    @classmethod
    def from_record(cls, rec: dict) -> "SceneState":
        tips = np.asarray(rec["tips"], dtype=np.float64).reshape(-1, 3)
        scene = cls(
            palm=np.asarray(rec["palm"], dtype=np.float64).reshape(3),
            tips=tips,
            object_center=np.asarray(rec["object_center"], dtype=np.float64).reshape(3),
            object_initial_xy=np.asarray(rec["object_xy0"], dtype=np.float64).reshape(2),
        )
        if len(tips) < 1:
            raise ValueError("scene needs at least one fingertip")
        for arr in (scene.palm, scene.tips, scene.object_center, scene.object_initial_xy):
            if not np.all(np.isfinite(arr)):
                raise ValueError("scene contains non-finite values")
        return scene

    def to_record(self) -> dict:
        return {
            "palm": self.palm.tolist(),
            "tips": self.tips.tolist(),
            "object_center": self.object_center.tolist(),
            "object_xy0": self.object_initial_xy.tolist(),
        }


def distances(scene: SceneState) -> tuple[float, float]:
    """(mean fingertip-object distance, palm-object distance)."""
    tips = float(np.mean(np.linalg.norm(scene.tips - scene.object_center, axis=1)))
    palm = float(np.linalg.norm(scene.palm - scene.object_center))
    return tips, palm


def height_reward(tip_dist: float, palm_dist: float, height: float) -> float:
    if tip_dist >= NEAR_TIPS and palm_dist >= NEAR_PALM:
        return 0.0
    dh = height - TARGET_HEIGHT
    return 0.9 - 2.0 * abs(dh) + dh + 1.0 / (abs(dh) + 1.0)


def reward_components(scene: SceneState) -> dict[str, float]:
    tip_dist, palm_dist = distances(scene)
    xy = scene.object_center[:2] - scene.object_initial_xy
    return {
        "r_dis": -2.0 * tip_dist - palm_dist,
        "r_height": height_reward(tip_dist, palm_dist, scene.height),
        "r_xy": -0.3 * float(np.linalg.norm(xy)),
    }


def step_qualifies(scene: SceneState) -> bool:
    tip_dist, palm_dist = distances(scene)
    near = tip_dist <= NEAR_TIPS or palm_dist <= NEAR_PALM
    return abs(scene.height - TARGET_HEIGHT) <= HEIGHT_BAND and near


@dataclass
class SuccessTracker:
    required_steps: int = STEPS_TO_SUCCEED["test"]
    counter: int = 0
    done: bool = False

    @classmethod
    def for_mode(cls, mode: str) -> "SuccessTracker":
        if mode not in STEPS_TO_SUCCEED:
            raise ValueError(f"mode must be one of {tuple(STEPS_TO_SUCCEED)}")
        return cls(required_steps=STEPS_TO_SUCCEED[mode])


def success_update(tracker: SuccessTracker, scene: SceneState) -> tuple[float, bool]:
    """Advance the consecutive-success counter; a failed step resets it to zero."""
    if tracker.done:
        raise RuntimeError("success tracker already finished")
    tracker.counter = tracker.counter + 1 if step_qualifies(scene) else 0
    if tracker.counter >= tracker.required_steps:
        tracker.done = True
        return SUCCESS_BONUS, True
    return 0.0, False


def score_rollout(trajectory, mode: str = "test") -> dict:
    """Sum shaped rewards and the success bonus until success or the object falls (height < 0)."""
    scenes = list(trajectory)
    if not scenes:
        raise ValueError("trajectory is empty")
    tracker = SuccessTracker.for_mode(mode)
    total = 0.0
    steps = 0
    for scene in scenes:
        steps += 1
        parts = reward_components(scene)
        total += parts["r_dis"] + parts["r_height"] + parts["r_xy"]
        if scene.height < 0.0:
            break
        bonus, done = success_update(tracker, scene)
        total += bonus
        if done:
            break
    return {"total_reward": total, "success": tracker.done, "steps": steps}


def kinematic_rollout(palm_path, tips_path, object_start) -> list[SceneState]:
    """Scenes for scripted hand motion with the object glued to the palm while the
    mean fingertip distance is below ``ATTACH_DISTANCE``; otherwise it stays put."""
    palm_path = np.asarray(palm_path, dtype=np.float64)
    tips_path = np.asarray(tips_path, dtype=np.float64)
    obj = np.asarray(object_start, dtype=np.float64).copy()
    xy0 = obj[:2].copy()
    offset = None
    scenes = []
    for palm, tips in zip(palm_path, tips_path):
        tip_dist = float(np.mean(np.linalg.norm(tips - obj, axis=1)))
        if tip_dist < ATTACH_DISTANCE:
            if offset is None:
                offset = obj - palm
            obj = palm + offset
        else:
            offset = None
        scenes.append(SceneState(palm.copy(), tips.copy(), obj.copy(), xy0.copy()))
    return scenes

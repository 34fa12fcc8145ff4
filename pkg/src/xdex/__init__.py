"""Cross-embodiment dexterous-hand retargeting: eigengrasp actions to robot joint targets."""

__version__ = "0.1.0"

from xdex.pose_model import HandSkeleton, default_skeleton, hand_keypoints, rodrigues
from xdex.eigengrasp import EigengraspBasis, compute_basis, project, synthesize
from xdex.robot_hand import RobotHandModel, clamp, fk, jacobian, load_hand, load_urdf
from xdex.retarget import RetargetConfig, map_targets, retarget_step, retarget_trajectory

__all__ = [
    "__version__",
    "HandSkeleton",
    "default_skeleton",
    "hand_keypoints",
    "rodrigues",
    "EigengraspBasis",
    "compute_basis",
    "project",
    "synthesize",
    "RobotHandModel",
    "clamp",
    "fk",
    "jacobian",
    "load_hand",
    "load_urdf",
    "RetargetConfig",
    "map_targets",
    "retarget_step",
    "retarget_trajectory",
]

"""Dexterous-hand kinematics from URDF: forward kinematics, Jacobians, limits."""

from __future__ import annotations

import dataclasses
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from xdex import kernels
from xdex.pose_model import FINGERS

SUPPORTED_JOINTS = {"fixed": kernels.FIXED, "revolute": kernels.REVOLUTE, "prismatic": kernels.PRISMATIC}


class URDFError(ValueError):
    """Malformed or unsupported robot description."""


class UnsupportedJointError(URDFError):
    def __init__(self, joint: str, jtype: str):
        super().__init__(f"joint {joint!r} has unsupported type {jtype!r}")
        self.joint = joint
        self.jtype = jtype


class KinematicLoopError(URDFError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    type: str
    parent: str
    child: str
    xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rpy: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    lower: float = 0.0
    upper: float = 0.0
    mimic: tuple[str, float, float] | None = None  # (source joint, multiplier, offset)

    def origin_matrix(self) -> np.ndarray:
        roll, pitch, yaw = self.rpy
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        T = np.eye(4)
        T[:3, :3] = [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
        T[:3, 3] = self.xyz
        return T


@dataclass(frozen=True)
class HandFrames:
    palm: np.ndarray
    tips: np.ndarray  # (n, 3), ordered as the model's fingertip links

    def stacked(self) -> np.ndarray:
        return np.vstack([self.palm[None, :], self.tips])


@dataclass(frozen=True, eq=False)
class RobotHandModel:
    joints: tuple[Joint, ...]
    actuated_order: tuple[str, ...]
    palm_link: str
    fingertip_links: tuple[str, ...]
    finger_tags: tuple[str, ...]
    mount_joint: str | None = None
    scale: float | None = None
    name: str = "hand"
    _arrays: dict = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "_arrays", _compile(self))

    @property
    def m(self) -> int:
        return len(self.actuated_order)

    @property
    def n(self) -> int:
        return len(self.fingertip_links)

    @property
    def links(self) -> tuple[str, ...]:
        return self._arrays["links"]

    @property
    def root_link(self) -> str:
        return self.links[self._arrays["root"]]

    @property
    def lower(self) -> np.ndarray:
        return self._arrays["lower"]

    @property
    def upper(self) -> np.ndarray:
        return self._arrays["upper"]

    def mid_range(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def joint(self, name: str) -> Joint:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(name)

    def kernel_args(self) -> tuple:
        a = self._arrays
        return (a["parent_link"], a["child_link"], a["origins"], a["axes"], a["jtype"],
                a["src"], a["mult"], a["offset"], a["n_links"], a["root"])


def _compile(model: RobotHandModel) -> dict:
    joints = model.joints
    by_name = {j.name: j for j in joints}
    if len(by_name) != len(joints):
        raise URDFError("duplicate joint names")
    links: list[str] = []
    for j in joints:
        for l in (j.parent, j.child):
            if l not in links:
                links.append(l)
    children = [j.child for j in joints]
    for l in links:
        if children.count(l) > 1:
            raise KinematicLoopError(f"link {l!r} is the child of more than one joint")
    roots = [l for l in links if l not in children]
    if len(roots) != 1:
        if not roots:
            raise KinematicLoopError("no root link: the joint graph contains a cycle")
        raise URDFError(f"expected a single root link, found {roots}")
    root = roots[0]
    # topological order by breadth-first walk from the root
    order: list[Joint] = []
    frontier = [root]
    while frontier:
        nxt = []
        for l in frontier:
            for j in joints:
                if j.parent == l:
                    order.append(j)
                    nxt.append(j.child)
        frontier = nxt
    if len(order) != len(joints):
        raise KinematicLoopError("joint graph contains a cycle unreachable from the root")

    actuated = list(model.actuated_order)
    for name in actuated:
        if name not in by_name:
            raise URDFError(f"actuated joint {name!r} not in the model")
        if by_name[name].type == "fixed" or by_name[name].mimic is not None:
            raise URDFError(f"joint {name!r} cannot be actuated")
    col = {name: i for i, name in enumerate(actuated)}

    def resolve(j: Joint, depth: int = 0) -> tuple[int, float, float]:
        if j.type == "fixed":
            return -1, 0.0, 0.0
        if j.mimic is None:
            if j.name not in col:
                raise URDFError(f"movable joint {j.name!r} is neither actuated nor mimic")
            return col[j.name], 1.0, 0.0
        if depth > len(joints):
            raise URDFError(f"mimic chain through {j.name!r} is cyclic")
        source, mul, off = j.mimic
        if source not in by_name:
            raise URDFError(f"joint {j.name!r} mimics unknown joint {source!r}")
        s, m0, o0 = resolve(by_name[source], depth + 1)
        return s, mul * m0, mul * o0 + off

    link_idx = {l: i for i, l in enumerate(links)}
    J = len(order)
    arrays = {
        "links": tuple(links),
        "root": link_idx[root],
        "n_links": len(links),
        "order": tuple(j.name for j in order),
        "parent_link": np.array([link_idx[j.parent] for j in order], dtype=np.int64),
        "child_link": np.array([link_idx[j.child] for j in order], dtype=np.int64),
        "origins": np.array([j.origin_matrix() for j in order]).reshape(J, 4, 4),
        "axes": np.array([j.axis for j in order], dtype=np.float64).reshape(J, 3),
        "jtype": np.array([SUPPORTED_JOINTS[j.type] for j in order], dtype=np.int64),
    }
    resolved = [resolve(j) for j in order]
    arrays["src"] = np.array([r[0] for r in resolved], dtype=np.int64)
    arrays["mult"] = np.array([r[1] for r in resolved], dtype=np.float64)
    arrays["offset"] = np.array([r[2] for r in resolved], dtype=np.float64)
    arrays["lower"] = np.array([by_name[n].lower for n in actuated], dtype=np.float64)
    arrays["upper"] = np.array([by_name[n].upper for n in actuated], dtype=np.float64)

    for l in (model.palm_link, *model.fingertip_links):
        if l not in link_idx:
            raise URDFError(f"hand config references missing link {l!r}")
    if len(set(model.finger_tags)) != len(model.finger_tags):
        raise URDFError("finger tags must be unique")
    if len(model.finger_tags) != len(model.fingertip_links):
        raise URDFError("every fingertip link needs exactly one finger tag")
    for t in model.finger_tags:
        if t not in FINGERS:
            raise URDFError(f"unknown finger tag {t!r}; expected one of {FINGERS}")
    if model.mount_joint is not None and model.mount_joint not in by_name:
        raise URDFError(f"mount joint {model.mount_joint!r} not in the model")

    point_links = [model.palm_link, *model.fingertip_links]
    arrays["point_links"] = np.array([link_idx[l] for l in point_links], dtype=np.int64)
    # joint jj is an ancestor of point i if it lies on the root -> link path
    parent_joint = {j.child: j for j in order}
    pos_of = {name: i for i, name in enumerate(arrays["order"])}
    ancestor = np.zeros((J, len(point_links)), dtype=np.bool_)
    for i, l in enumerate(point_links):
        cur = l
        while cur in parent_joint:
            j = parent_joint[cur]
            ancestor[pos_of[j.name], i] = True
            cur = j.parent
    arrays["ancestor"] = ancestor
    for key, value in arrays.items():
        if isinstance(value, np.ndarray):
            value.setflags(write=False)
    return arrays


def _floats(text: str | None, default: tuple[float, ...]) -> tuple[float, ...]:
    if text is None:
        return default
    vals = tuple(float(x) for x in text.split())
    if len(vals) != len(default):
        raise URDFError(f"expected {len(default)} numbers, got {text!r}")
    return vals


def parse_urdf_joints(document: str) -> tuple[list[Joint], list[str]]:
    """Joints of a URDF document and the movable, non-mimic ones in document order."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise URDFError(f"malformed URDF XML: {exc}") from exc
    if root.tag != "robot":
        raise URDFError("URDF root element must be <robot>")
    link_names = {l.get("name") for l in root.findall("link")}
    joints: list[Joint] = []
    movable: list[str] = []
    for el in root.findall("joint"):
        name = el.get("name")
        jtype = el.get("type")
        if name is None or jtype is None:
            raise URDFError("every <joint> needs name and type attributes")
        if jtype not in SUPPORTED_JOINTS:
            raise UnsupportedJointError(name, jtype)
        parent = el.find("parent")
        child = el.find("child")
        if parent is None or child is None:
            raise URDFError(f"joint {name!r} lacks parent or child")
        plink, clink = parent.get("link"), child.get("link")
        for l in (plink, clink):
            if l not in link_names:
                raise URDFError(f"joint {name!r} references undeclared link {l!r}")
        origin = el.find("origin")
        xyz = _floats(origin.get("xyz") if origin is not None else None, (0.0, 0.0, 0.0))
        rpy = _floats(origin.get("rpy") if origin is not None else None, (0.0, 0.0, 0.0))
        axis_el = el.find("axis")
        axis = np.array(_floats(axis_el.get("xyz") if axis_el is not None else None, (1.0, 0.0, 0.0)))
        lower = upper = 0.0
        mimic = None
        if jtype != "fixed":
            norm = np.linalg.norm(axis)
            if norm == 0.0:
                raise URDFError(f"joint {name!r} has a zero axis")
            axis = axis / norm
            mim = el.find("mimic")
            if mim is not None:
                mimic = (mim.get("joint"), float(mim.get("multiplier", 1.0)), float(mim.get("offset", 0.0)))
            else:
                lim = el.find("limit")
                if lim is None or lim.get("lower") is None or lim.get("upper") is None:
                    raise URDFError(f"joint {name!r} needs <limit lower=.. upper=..>")
                lower, upper = float(lim.get("lower")), float(lim.get("upper"))
                if not (math.isfinite(lower) and math.isfinite(upper)) or lower > upper:
                    raise URDFError(f"joint {name!r} has invalid limits [{lower}, {upper}]")
                movable.append(name)
        joints.append(Joint(name, jtype, plink, clink, xyz, rpy, tuple(float(a) for a in axis),
                            lower, upper, mimic))
    return joints, movable


def load_urdf(document: str, hand_config: dict) -> RobotHandModel:
    joints, movable = parse_urdf_joints(document)
    override = hand_config.get("joint_order_override")
    order = tuple(override) if override else tuple(movable)
    if override and sorted(override) != sorted(movable):
        raise URDFError("joint_order_override must list exactly the actuated joints")
    tips = hand_config["fingertips"]
    scale = hand_config.get("scale")
    return RobotHandModel(
        joints=tuple(joints),
        actuated_order=order,
        palm_link=hand_config["palm_link"],
        fingertip_links=tuple(t["link"] for t in tips),
        finger_tags=tuple(t["finger_tag"] for t in tips),
        mount_joint=hand_config.get("mount_joint"),
        scale=float(scale) if scale is not None else None,
        name=hand_config.get("name", "hand"),
    )


def load_hand(config_path: str | Path) -> RobotHandModel:
    """Load a hand from its JSON config; ``urdf_path`` is relative to the config file."""
    config_path = Path(config_path)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    config.setdefault("name", config_path.stem)
    urdf = (config_path.parent / config["urdf_path"]).read_text(encoding="utf-8")
    return load_urdf(urdf, config)


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture hand config (``four_finger`` or ``five_finger``)."""
    return Path(__file__).parent / "data" / "hands" / f"{name}.json"


def _check_q(model: RobotHandModel, q) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.float64)
    if q.shape != (model.m,):
        raise ValueError(f"expected {model.m} joint values, got shape {q.shape}")
    return q


def points(model: RobotHandModel, q) -> np.ndarray:
    """(n+1, 3) stacked [palm, tips...] positions."""
    q = _check_q(model, q)
    return kernels.link_points(q, *model.kernel_args(), model._arrays["point_links"])


def fk(model: RobotHandModel, q) -> HandFrames:
    pts = points(model, q)
    return HandFrames(palm=pts[0], tips=pts[1:])


def points_and_jacobian(model: RobotHandModel, q) -> tuple[np.ndarray, np.ndarray]:
    q = _check_q(model, q)
    a = model._arrays
    return kernels.points_jacobian(q, *model.kernel_args(), a["point_links"], a["ancestor"])


def jacobian(model: RobotHandModel, q) -> np.ndarray:
    """(3(n+1), m) point-velocity Jacobian, row blocks ordered [palm, tips...]."""
    return points_and_jacobian(model, q)[1]


def fk_batch(model: RobotHandModel, Q) -> np.ndarray:
    """(N, n+1, 3) point positions for a batch of configurations."""
    Q = np.asarray(Q, dtype=np.float64)
    return np.stack([points(model, q) for q in Q]) if len(Q) else np.zeros((0, model.n + 1, 3))


def clamp(model: RobotHandModel, q_raw) -> np.ndarray:
    q = np.asarray(q_raw, dtype=np.float64)
    if q.shape[-1] != model.m:
        raise ValueError(f"expected {model.m} joint values, got {q.shape[-1]}")
    return np.minimum(np.maximum(q, model.lower), model.upper)


def randomize_mount(model: RobotHandModel, sigma: float, seed: int) -> RobotHandModel:
    """Copy of ``model`` with Gaussian noise (std ``sigma``) added to the mount-joint origin."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if model.mount_joint is None:
        raise URDFError("hand config declares no mount_joint")
    if sigma == 0:
        return dataclasses.replace(model)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=3)
    joints = tuple(
        dataclasses.replace(j, xyz=tuple(float(v) for v in np.add(j.xyz, noise)))
        if j.name == model.mount_joint
        else j
        for j in model.joints
    )
    return dataclasses.replace(model, joints=joints)

"""Per-timestep retargeting of human keypoints to robot joint positions.

Each step minimizes

    target_weight * S(points(q), targets) + smoothness_weight * |q - q_prev|^2

subject to the joint box. Every similarity variant is a sum of squared
linear combinations of point errors, ``|A (x(q) - x_target)|^2``, where
``A`` acts on the stacked [palm, tips...] rows:

    position   A = I                                 (absolute points)
    vector     rows tip_i - palm                     (palm -> tip vectors)
    dexpilot   vector rows + rows tip_i - tip_j, i<j (no pinch switching)

so the whole objective is a nonlinear least-squares problem. It is solved
by a projected Levenberg-Marquardt iteration: each trial point is the
damped Gauss-Newton step projected onto the box and must pass an Armijo
test (c = 1e-4) and never increase the objective. A rejected step raises
the damping; if that fails, projected gradient with step halving takes
over. The plain projected gradient method is ``method="gradient"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from xdex import kernels
from xdex.pose_model import WRIST, HandSkeleton, default_skeleton, hand_keypoints, tip_index
from xdex.robot_hand import RobotHandModel, clamp, points, points_and_jacobian

OBJECTIVES = ("position", "vector", "dexpilot")
ARMIJO_C = 1e-4
MAX_HALVINGS = 40
REASONS = ("max_iterations", "gradient_tolerance", "line_search", "step_tolerance")


@dataclass(frozen=True)
class RetargetConfig:
    objective: str = "dexpilot"
    scale: float | None = None  # None: the hand config value, else the length-ratio default
    smoothness_weight: float = 1.0
    max_iterations: int = 50
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    target_weight: float = 1.0
    method: str = "gauss_newton"
    damping: float = 0.1  # initial Marquardt damping of the Gauss-Newton step

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.smoothness_weight < 0 or self.target_weight < 0:
            raise ValueError("weights must be non-negative")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not (self.gradient_tolerance > 0 and self.step_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if not self.damping >= 0:
            raise ValueError("damping must be non-negative")
        if self.method not in ("gauss_newton", "gradient"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class KeypointTargets:
    palm: np.ndarray
    tips: np.ndarray  # (n, 3)
    tags: tuple[str, ...]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.palm[None, :], self.tips])

    def translated(self, t) -> "KeypointTargets":
        t = np.asarray(t, dtype=np.float64)
        return KeypointTargets(self.palm + t, self.tips + t, self.tags)

    @classmethod
    def from_points(cls, pts: np.ndarray, tags: Sequence[str]) -> "KeypointTargets":
        pts = np.asarray(pts, dtype=np.float64)
        return cls(pts[0].copy(), pts[1:].copy(), tuple(tags))


@dataclass
class StepResult:
    q: np.ndarray
    objective: float
    iterations: int
    reason: str
    trace: list[float] = field(default_factory=list)


@lru_cache(maxsize=None)
def difference_operator(objective: str, n_tips: int) -> np.ndarray:
    """Rows combining the (n_tips + 1) stacked points into compared quantities."""
    P = n_tips + 1
    if objective == "position":
        return np.eye(P)
    rows = []
    for i in range(n_tips):
        r = np.zeros(P)
        r[i + 1], r[0] = 1.0, -1.0
        rows.append(r)
    if objective == "dexpilot":
        for i in range(n_tips):
            for j in range(i + 1, n_tips):
                r = np.zeros(P)
                r[i + 1], r[j + 1] = 1.0, -1.0
                rows.append(r)
    A = np.array(rows).reshape(-1, P)
    A.setflags(write=False)
    return A


def default_scale(model: RobotHandModel, skeleton: HandSkeleton | None = None) -> float:
    """Robot palm->middle-tip length over human wrist->middle-TIP length, both at zero pose.

    Falls back to the mean over all shared fingers when the robot has no middle finger.
    """
    skeleton = skeleton or default_skeleton()
    human = hand_keypoints(skeleton, np.zeros(3 * skeleton.n_joints))
    robot = points(model, clamp(model, np.zeros(model.m)))
    tags = ["middle"] if "middle" in model.finger_tags else list(model.finger_tags)
    r = np.mean([np.linalg.norm(robot[1 + model.finger_tags.index(t)] - robot[0]) for t in tags])
    h = np.mean([np.linalg.norm(human[tip_index(t)] - human[WRIST]) for t in tags])
    return float(r / h)


def resolve_scale(model: RobotHandModel, config: RetargetConfig,
                  skeleton: HandSkeleton | None = None) -> float:
    if config.scale is not None:
        return config.scale
    if model.scale is not None:
        return model.scale
    return default_scale(model, skeleton)


def map_targets(keypoints, model: RobotHandModel, scale: float = 1.0) -> KeypointTargets:
    """Select the wrist and the robot's fingers' TIP keypoints, scaled about the wrist.

    The human wrist frame is taken to be the robot hand base frame.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.shape != (21, 3):
        raise ValueError(f"expected 21x3 keypoints, got {kp.shape}")
    if not np.all(np.isfinite(kp)):
        raise ValueError("keypoints contain non-finite values")
    wrist = kp[WRIST]
    tips = np.array([wrist + scale * (kp[tip_index(t)] - wrist) for t in model.finger_tags])
    return KeypointTargets(wrist.copy(), tips.reshape(-1, 3), model.finger_tags)


def _check_targets(model: RobotHandModel, targets: KeypointTargets) -> np.ndarray:
    if tuple(targets.tags) != tuple(model.finger_tags):
        raise ValueError(f"target tags {targets.tags} do not match the hand's {model.finger_tags}")
    x = targets.stacked()
    if not np.all(np.isfinite(x)):
        raise ValueError("targets contain non-finite values")
    return x


def _residuals(model, q, x_target, A, config, q_prev, with_jacobian):
    sw = np.sqrt(config.target_weight)
    ss = np.sqrt(config.smoothness_weight)
    if with_jacobian:
        pts, J = points_and_jacobian(model, q)
    else:
        pts, J = points(model, q), None
    r = np.concatenate([(sw * (A @ (pts - x_target))).ravel(), ss * (q - q_prev)])
    if not with_jacobian:
        return r, None
    Jp = J.reshape(len(pts), 3, model.m)
    Jr = np.vstack([sw * np.einsum("rp,pcm->rcm", A, Jp).reshape(-1, model.m),
                    ss * np.eye(model.m)])
    return r, Jr


def objective_value(model: RobotHandModel, q, targets: KeypointTargets,
                    config: RetargetConfig, q_prev) -> float:
    x_target = _check_targets(model, targets)
    A = difference_operator(config.objective, model.n)
    r, _ = _residuals(model, np.asarray(q, dtype=np.float64), x_target, A, config,
                      np.asarray(q_prev, dtype=np.float64), False)
    return float(r @ r)


def objective_gradient(model: RobotHandModel, q, targets: KeypointTargets,
                       config: RetargetConfig, q_prev) -> np.ndarray:
    x_target = _check_targets(model, targets)
    A = difference_operator(config.objective, model.n)
    r, Jr = _residuals(model, np.asarray(q, dtype=np.float64), x_target, A, config,
                       np.asarray(q_prev, dtype=np.float64), True)
    return 2.0 * Jr.T @ r


def solve(model: RobotHandModel, targets: KeypointTargets, q_prev,
          config: RetargetConfig = RetargetConfig(), q_start=None,
          backend: str | None = None) -> StepResult:
    """Run the box-constrained solver and report its iteration trace.

    The iteration starts from ``q_start`` (default ``q_prev``), projected
    onto the box; the trace lists the objective before every iteration and
    after the last accepted step, and never increases. ``backend`` overrides
    the process-wide kernel choice (``"numba"`` or ``"numpy"``).
    """
    x_target = _check_targets(model, targets)
    A = difference_operator(config.objective, model.n)
    q_prev = clamp(model, q_prev)
    q = clamp(model, q_prev if q_start is None else q_start)
    if (backend or kernels.BACKEND) == "numba":
        return _solve_numba(model, x_target, A, config, q_prev, q)
    return _solve_numpy(model, x_target, A, config, q_prev, q)


def _solve_numba(model, x_target, A, config, q_prev, q) -> StepResult:
    a = model._arrays
    trace = np.empty(config.max_iterations + 1)
    q, f, it, reason, n_trace = kernels.solve_box_lsq_numba(
        q_prev, q, np.ascontiguousarray(x_target), np.ascontiguousarray(A),
        np.sqrt(config.target_weight), np.sqrt(config.smoothness_weight),
        model.lower, model.upper, config.max_iterations, config.gradient_tolerance,
        config.step_tolerance, config.method == "gauss_newton", config.damping, ARMIJO_C,
        MAX_HALVINGS,
        *model.kernel_args(), a["point_links"], a["ancestor"], trace)
    return StepResult(q=q, objective=f, iterations=it, reason=REASONS[reason],
                      trace=trace[:n_trace].tolist())


def _solve_numpy(model, x_target, A, config, q_prev, q) -> StepResult:
    lo, hi = model.lower, model.upper
    r, Jr = _residuals(model, q, x_target, A, config, q_prev, True)
    f = float(r @ r)
    trace = [f]
    reason = "max_iterations"
    it = 0
    mu = config.damping
    while it < config.max_iterations:
        g = 2.0 * Jr.T @ r
        pg = q - np.clip(q - g, lo, hi)
        if np.linalg.norm(pg) <= config.gradient_tolerance:
            reason = "gradient_tolerance"
            break
        accepted = False
        if config.method == "gauss_newton":
            for _ in range(MAX_HALVINGS):
                d = _damped_direction(q, g, r, Jr, lo, hi, mu)
                if d is None:
                    break
                q_new, dq, f_new, accepted = _try_step(model, x_target, A, config, q_prev, q, f, g, d)
                if accepted:
                    mu /= 3.0
                    break
                mu = max(4.0 * mu, 1e-9)
        if not accepted:
            alpha = 1.0
            for _ in range(MAX_HALVINGS):
                q_new, dq, f_new, accepted = _try_step(model, x_target, A, config, q_prev, q, f, g,
                                                       -alpha * g)
                if accepted:
                    break
                alpha *= 0.5
        it += 1
        if not accepted:
            reason = "line_search"
            break
        step = float(np.linalg.norm(dq))
        q = q_new
        r, Jr = _residuals(model, q, x_target, A, config, q_prev, True)
        f = float(r @ r)
        trace.append(f)
        if step <= config.step_tolerance:
            reason = "step_tolerance"
            break
    return StepResult(q=q, objective=f, iterations=it, reason=reason, trace=trace)


def _try_step(model, x_target, A, config, q_prev, q, f, g, d):
    """Projected trial step; accepted on sufficient and monotone decrease."""
    q_new = np.clip(q + d, model.lower, model.upper)
    dq = q_new - q
    decrease = float(g @ dq)
    if decrease >= 0.0:
        return q_new, dq, f, False
    r_new, _ = _residuals(model, q_new, x_target, A, config, q_prev, False)
    f_new = float(r_new @ r_new)
    return q_new, dq, f_new, f_new <= f + ARMIJO_C * decrease and f_new <= f


def _damped_direction(q, g, r, Jr, lo, hi, mu):
    # variables pinned at a bound with the gradient pushing outward stay fixed
    pinned = ((q <= lo) & (g > 0)) | ((q >= hi) & (g < 0))
    free = ~pinned
    if not np.any(free):
        return None
    Jf = Jr[:, free]
    H = Jf.T @ Jf
    diag = np.diag_indices_from(H)
    H[diag] += mu * H[diag] + 1e-12 * (1.0 + np.trace(H))
    try:
        df = np.linalg.solve(H, -Jf.T @ r)
    except np.linalg.LinAlgError:
        return None
    d = np.zeros_like(q)
    d[free] = df
    if not np.all(np.isfinite(d)) or float(g @ d) >= 0.0:
        return None
    return d


def retarget_step(model: RobotHandModel, targets: KeypointTargets, q_prev,
                  config: RetargetConfig = RetargetConfig()) -> np.ndarray:
    return solve(model, targets, q_prev, config).q


def retarget_trajectory(model: RobotHandModel, target_sequence: Iterable[KeypointTargets],
                        q_init=None, config: RetargetConfig = RetargetConfig()) -> list[np.ndarray]:
    """Warm-started sequence of retarget steps; the first step starts at ``q_init``
    (default mid-range)."""
    seq = list(target_sequence)
    if not seq:
        raise ValueError("target sequence is empty")
    q = model.mid_range() if q_init is None else clamp(model, q_init)
    out = []
    for targets in seq:
        q = retarget_step(model, targets, q, config)
        out.append(q)
    return out

"""Serial-chain kinematics for revolute manipulators.

Joints follow the modified DH convention, one row (a, alpha, d, theta_offset)
per joint:

    T_i = Rx(alpha_i) * Tx(a_i) * Rz(q_i + theta_offset_i) * Tz(d_i)

Frame 0 is the robot base, frame i is reached after applying joint i.
Control points and collision spheres attach to a frame by index with a
constant offset expressed in that frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

# Damping policy for near-singular Jacobians: singular values below
# SIGMA_MIN are inverted as s / (s^2 + DLS_LAMBDA^2) instead of 1/s.
SIGMA_MIN = 1e-4
DLS_LAMBDA = 0.01


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero quaternion")
    return q / n


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotation_vector(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector (axis * angle, angle in [0, pi]) of a unit quaternion."""
    w = float(np.clip(q[0], -1.0, 1.0))
    v = np.asarray(q[1:], dtype=float)
    s = math.sqrt(max(0.0, 1.0 - w * w))
    if s < 1e-12:
        return 2.0 * v  # small-angle: q ~ (1, axis*angle/2)
    angle = 2.0 * math.atan2(s, w)
    if angle > math.pi:  # take the short way around
        angle -= 2.0 * math.pi
    return (angle / s) * v


def orientation_error(q_goal: np.ndarray, q_current: np.ndarray) -> np.ndarray:
    """Rotation vector that takes the current orientation onto the goal."""
    return quat_rotation_vector(quat_mul(q_goal, quat_conj(q_current)))


class Pose(NamedTuple):
    position: np.ndarray      # (3,)
    orientation: np.ndarray   # unit quaternion (w, x, y, z)


class JointState(NamedTuple):
    q: np.ndarray      # (n,) rad
    qdot: np.ndarray   # (n,) rad/s
    t: float           # seconds


# ---------------------------------------------------------------------------
# robot description

@dataclass(frozen=True)
class ControlPointAttachment:
    link_index: int
    local_offset: np.ndarray
    is_ee: bool = False

    def __post_init__(self):
        object.__setattr__(self, "local_offset",
                           np.array(self.local_offset, dtype=float).reshape(3))


@dataclass(frozen=True)
class CollisionSphere:
    link_index: int
    local_offset: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "local_offset",
                           np.array(self.local_offset, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise ValueError("collision sphere radius must be positive")


@dataclass(frozen=True)
class RobotModel:
    """Immutable serial chain: DH rows, limits, control points, spheres."""

    dh: np.ndarray                 # (n, 4) rows (a, alpha, d, theta_offset)
    joint_limits: np.ndarray       # (n, 2) rad
    velocity_limits: np.ndarray    # (n,) rad/s
    control_points: tuple[ControlPointAttachment, ...] = ()
    collision_spheres: tuple[CollisionSphere, ...] = ()
    name: str = "robot"

    def __post_init__(self):
        dh = np.array(self.dh, dtype=float).reshape(-1, 4)
        if dh.shape[0] < 1:
            raise ValueError("need at least one joint")
        limits = np.array(self.joint_limits, dtype=float).reshape(-1, 2)
        vlim = np.array(self.velocity_limits, dtype=float).reshape(-1)
        if limits.shape[0] != dh.shape[0] or vlim.shape[0] != dh.shape[0]:
            raise ValueError("limit arrays must match the joint count")
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must satisfy min < max")
        cps = tuple(self.control_points)
        if cps:
            if sum(1 for a in cps if a.is_ee) != 1:
                raise ValueError("exactly one control point must be the EE")
        n = dh.shape[0]
        for att in cps:
            if not 0 <= att.link_index <= n:
                raise ValueError(f"control point references invalid link {att.link_index}")
        for sph in self.collision_spheres:
            if not 0 <= sph.link_index <= n:
                raise ValueError(f"collision sphere references invalid link {sph.link_index}")
        for arr in (dh, limits, vlim):
            arr.setflags(write=False)
        object.__setattr__(self, "dh", dh)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "velocity_limits", vlim)
        object.__setattr__(self, "control_points", cps)
        object.__setattr__(self, "collision_spheres", tuple(self.collision_spheres))
        # per-row constants of the modified DH transform
        a, alpha, d = dh[:, 0], dh[:, 1], dh[:, 2]
        ca, sa = np.cos(alpha), np.sin(alpha)
        trans = np.stack([a, -d * sa, d * ca], axis=1)
        for arr in (ca, sa, trans):
            arr.setflags(write=False)
        object.__setattr__(self, "_ca", ca)
        object.__setattr__(self, "_sa", sa)
        object.__setattr__(self, "_trans", trans)

    @property
    def n(self) -> int:
        return self.dh.shape[0]

    @property
    def n_cp(self) -> int:
        return len(self.control_points)

    @property
    def ee_index(self) -> int:
        for i, att in enumerate(self.control_points):
            if att.is_ee:
                return i
        raise ValueError("model has no EE control point")

    @property
    def ee(self) -> ControlPointAttachment:
        return self.control_points[self.ee_index]

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.n:
            raise ValueError(f"expected {self.n} joint values, got {q.shape[0]}")
        if not np.all(np.isfinite(q)):
            raise ValueError("non-finite joint values")
        return q

    def within_limits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.joint_limits[:, 0]) and np.all(q <= self.joint_limits[:, 1]))


class FrameSet(NamedTuple):
    rotations: np.ndarray   # (n+1, 3, 3) world rotation of each frame
    origins: np.ndarray     # (n+1, 3)


def fk_frames(model: RobotModel, q) -> FrameSet:
    """All link frames for configuration q (frame 0 = base)."""
    q = model.check_q(q)
    n = model.n
    R = np.empty((n + 1, 3, 3))
    p = np.empty((n + 1, 3))
    R[0] = np.eye(3)
    p[0] = 0.0
    theta = q + model.dh[:, 3]
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = model._ca, model._sa
    for i in range(n):
        # Rx(alpha) * Rz(theta)
        Rt = np.array([
            [ct[i], -st[i], 0.0],
            [ca[i] * st[i], ca[i] * ct[i], -sa[i]],
            [sa[i] * st[i], sa[i] * ct[i], ca[i]],
        ])
        p[i + 1] = p[i] + R[i] @ model._trans[i]
        R[i + 1] = R[i] @ Rt
    return FrameSet(R, p)


def _resolve_frame(model: RobotModel, frame) -> tuple[int, np.ndarray]:
    if isinstance(frame, ControlPointAttachment):
        return frame.link_index, frame.local_offset
    idx = int(frame)
    if not 0 <= idx <= model.n:
        raise ValueError(f"invalid frame index {idx}")
    return idx, np.zeros(3)


def forward_kinematics(model: RobotModel, q, frame) -> Pose:
    """Pose of a link frame or control-point attachment in base coordinates."""
    frames = fk_frames(model, q)
    link, offset = _resolve_frame(model, frame)
    pos = frames.origins[link] + frames.rotations[link] @ offset
    return Pose(pos, quat_from_matrix(frames.rotations[link]))


def attachment_position(frames: FrameSet, att: ControlPointAttachment) -> np.ndarray:
    return frames.origins[att.link_index] + frames.rotations[att.link_index] @ att.local_offset


def control_point_positions(model: RobotModel, q) -> np.ndarray:
    """(n_cp, 3) positions of all control points, in declaration order."""
    frames = fk_frames(model, q)
    return np.array([attachment_position(frames, a) for a in model.control_points])


def jacobian_from_frames(model: RobotModel, frames: FrameSet,
                         att: ControlPointAttachment, rotational: bool) -> np.ndarray:
    """Geometric Jacobian of an attachment, given precomputed frames.

    Columns for joints distal to the attachment's link are zero.
    """
    n = model.n
    rows = 6 if rotational else 3
    J = np.zeros((rows, n))
    point = attachment_position(frames, att)
    L = att.link_index
    if L > 0:
        axes = frames.rotations[1:L + 1, :, 2]          # joint axes, world frame
        arms = point - frames.origins[1:L + 1]
        J[:3, :L] = np.cross(axes, arms).T
        if rotational:
            J[3:, :L] = axes.T
    return J


def jacobian(model: RobotModel, q, attachment) -> np.ndarray:
    """Jacobian of a control point; 6 x n for the EE, 3 x n otherwise."""
    if isinstance(attachment, int):
        attachment = model.control_points[attachment]
    frames = fk_frames(model, q)
    return jacobian_from_frames(model, frames, attachment, rotational=attachment.is_ee)


class PinvResult(NamedTuple):
    pinv: np.ndarray
    damped: bool


def pseudoinverse(J: np.ndarray) -> PinvResult:
    """Moore-Penrose pseudoinverse with a damped branch near singularity.

    Singular values >= SIGMA_MIN are inverted exactly; smaller ones are
    inverted as s/(s^2 + lambda^2), which degrades continuously to 0 for
    exactly singular directions. The result is flagged damped whenever the
    smallest singular value falls below SIGMA_MIN.
    """
    J = np.asarray(J, dtype=float)
    if not np.all(np.isfinite(J)):
        raise ValueError("non-finite Jacobian")
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    damped = bool(s.size and s[-1] < SIGMA_MIN)
    safe = np.where(s > 0.0, s, 1.0)
    inv_s = np.where(s >= SIGMA_MIN, 1.0 / safe, s / (s * s + DLS_LAMBDA * DLS_LAMBDA))
    return PinvResult((Vt.T * inv_s) @ U.T, damped)


def ik_solve(model: RobotModel, goal_pose, q_seed, *,
             pos_tol: float = 1e-3, rot_tol: float = 1e-2,
             max_iters: int = 200, restarts: int = 10,
             rng: np.random.Generator | None = None):
    """Damped-least-squares IK to a goal pose (orientation optional).

    Returns a configuration within joint limits whose FK matches the goal
    within (pos_tol, rot_tol), or None after all restarts fail.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    goal_p = np.asarray(goal_pose.position, dtype=float).reshape(3)
    goal_q = goal_pose.orientation
    if goal_q is not None:
        goal_q = quat_normalize(goal_q)
    q_seed = model.check_q(q_seed)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]

    def attempt(q0: np.ndarray):
        q = q0.copy()
        lam2 = 0.05 ** 2
        for _ in range(max_iters):
            frames = fk_frames(model, q)
            ee = model.ee
            pos = attachment_position(frames, ee)
            e_pos = goal_p - pos
            if goal_q is not None:
                e_rot = orientation_error(goal_q, quat_from_matrix(frames.rotations[ee.link_index]))
                err = np.concatenate([e_pos, e_rot])
                J = jacobian_from_frames(model, frames, ee, rotational=True)
            else:
                e_rot = None
                err = e_pos
                J = jacobian_from_frames(model, frames, ee, rotational=False)
            if np.linalg.norm(e_pos) <= pos_tol and \
                    (e_rot is None or np.linalg.norm(e_rot) <= rot_tol):
                return q
            JJt = J @ J.T
            dq = J.T @ np.linalg.solve(JJt + lam2 * np.eye(JJt.shape[0]), err)
            step = np.linalg.norm(dq)
            if step > 0.5:
                dq *= 0.5 / step
            q = np.clip(q + dq, lo, hi)
        return None

    result = attempt(np.clip(q_seed, lo, hi))
    if result is not None:
        return result
    for _ in range(restarts):
        q0 = rng.uniform(lo, hi)
        result = attempt(q0)
        if result is not None:
            return result
    return None

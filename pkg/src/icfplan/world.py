"""Point-cloud obstacles, spatial queries, and scripted rigid motion.

Obstacles keep their points, normals, and k-d tree in a fixed body frame;
a snapshot places every obstacle at a time t with a world translation and a
translational velocity. Range and clearance queries transform the query
point into each body frame, so moving obstacles never rebuild their index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .kinematics import RobotModel, attachment_position, fk_frames

MOTION_KINDS = ("static", "constant-velocity", "waypoint-loop")


@dataclass(frozen=True)
class MotionScript:
    """Translational motion law for an obstacle frame."""

    kind: str = "static"
    velocity: np.ndarray | None = None       # constant-velocity
    times: np.ndarray | None = None          # waypoint-loop, strictly increasing, times[0] = 0
    waypoints: np.ndarray | None = None      # (m, 3) absolute positions

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.kind == "constant-velocity":
            v = np.array(self.velocity, dtype=float).reshape(3)
            v.setflags(write=False)
            object.__setattr__(self, "velocity", v)
        if self.kind == "waypoint-loop":
            times = np.array(self.times, dtype=float).reshape(-1)
            wps = np.array(self.waypoints, dtype=float).reshape(-1, 3)
            if times.shape[0] != wps.shape[0] or times.shape[0] < 2:
                raise ValueError("waypoint-loop needs >= 2 timed waypoints")
            if times[0] != 0.0 or np.any(np.diff(times) <= 0.0):
                raise ValueError("waypoint times must start at 0 and strictly increase")
            times.setflags(write=False)
            wps.setflags(write=False)
            object.__setattr__(self, "times", times)
            object.__setattr__(self, "waypoints", wps)

    def locate(self, base: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(position, velocity) of the obstacle frame at time t."""
        if self.kind == "static":
            return base, np.zeros(3)
        if self.kind == "constant-velocity":
            return base + self.velocity * t, self.velocity.copy()
        period = self.times[-1]
        tau = math.fmod(t, period)
        if tau < 0.0:
            tau += period
        seg = int(np.searchsorted(self.times, tau, side="right")) - 1
        seg = min(seg, len(self.times) - 2)
        t0, t1 = self.times[seg], self.times[seg + 1]
        p0, p1 = self.waypoints[seg], self.waypoints[seg + 1]
        vel = (p1 - p0) / (t1 - t0)
        return p0 + vel * (tau - t0), vel


@dataclass(frozen=True)
class PointCloudObstacle:
    """Rigid point cloud with per-point surface normals (body frame)."""

    id: int
    points: np.ndarray      # (m, 3)
    normals: np.ndarray     # (m, 3), unit
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    motion: MotionScript = field(default_factory=MotionScript)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
        if pts.shape[0] < 1 or pts.shape != nrm.shape:
            raise ValueError("need equal, nonzero point and normal counts")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-9):
            raise ValueError("normals must be unit length")
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        base = np.array(self.base_position, dtype=float).reshape(3)
        for arr in (pts, nrm, R, base):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "base_position", base)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points)

    @cached_property
    def rotated_normals(self) -> np.ndarray:
        out = self.normals @ self.rotation.T
        out.setflags(write=False)
        return out

    @cached_property
    def rotated_points(self) -> np.ndarray:
        out = self.points @ self.rotation.T
        out.setflags(write=False)
        return out

    @property
    def size(self) -> int:
        return self.points.shape[0]


class PlacedObstacle(NamedTuple):
    obstacle: PointCloudObstacle
    position: np.ndarray   # world translation of the body frame
    velocity: np.ndarray   # rigid translational velocity


class RangeHits(NamedTuple):
    """Points within range of a query, ordered by (obstacle id, point index)."""

    obstacle_ids: np.ndarray   # (k,) int
    point_indices: np.ndarray  # (k,) int
    points: np.ndarray         # (k, 3) world frame
    normals: np.ndarray        # (k, 3) world frame
    velocities: np.ndarray     # (k, 3)

    def __len__(self) -> int:
        return self.obstacle_ids.shape[0]


def _empty_hits() -> RangeHits:
    z3 = np.zeros((0, 3))
    zi = np.zeros(0, dtype=int)
    return RangeHits(zi, zi.copy(), z3, z3.copy(), z3.copy())


@dataclass(frozen=True)
class WorldSnapshot:
    """Immutable placement of every obstacle at one instant."""

    t: float
    placed: tuple[PlacedObstacle, ...]

    @property
    def obstacle_ids(self) -> list[int]:
        return [p.obstacle.id for p in self.placed]

    @property
    def max_id(self) -> int:
        return max((p.obstacle.id for p in self.placed), default=-1)

    def world_points(self, obstacle_id: int) -> np.ndarray:
        for p in self.placed:
            if p.obstacle.id == obstacle_id:
                return p.obstacle.rotated_points + p.position
        raise KeyError(obstacle_id)


def make_snapshot(obstacles, t: float = 0.0) -> WorldSnapshot:
    placed = []
    seen = set()
    for obs in sorted(obstacles, key=lambda o: o.id):
        if obs.id in seen:
            raise ValueError(f"duplicate obstacle id {obs.id}")
        seen.add(obs.id)
        pos, vel = obs.motion.locate(obs.base_position, t)
        placed.append(PlacedObstacle(obs, pos, vel))
    return WorldSnapshot(float(t), tuple(placed))


def advance_world(snapshot: WorldSnapshot, dt: float) -> WorldSnapshot:
    """Fresh snapshot dt seconds later; the input snapshot is untouched."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return make_snapshot([p.obstacle for p in snapshot.placed], snapshot.t + dt)


def query_range(snapshot: WorldSnapshot, x, d_range: float) -> RangeHits:
    """All obstacle points within the closed ball of radius d_range around x."""
    if d_range <= 0.0:
        raise ValueError("d_range must be positive")
    x = np.asarray(x, dtype=float).reshape(3)
    ids, idxs, pts, nrms, vels = [], [], [], [], []
    for placed in snapshot.placed:
        obs = placed.obstacle
        x_body = obs.rotation.T @ (x - placed.position)
        hit = obs.tree.query_ball_point(x_body, d_range)
        if not hit:
            continue
        hit = np.sort(np.asarray(hit, dtype=int))
        ids.append(np.full(hit.shape[0], obs.id, dtype=int))
        idxs.append(hit)
        pts.append(obs.rotated_points[hit] + placed.position)
        nrms.append(obs.rotated_normals[hit])
        vels.append(np.broadcast_to(placed.velocity, (hit.shape[0], 3)))
    if not ids:
        return _empty_hits()
    return RangeHits(np.concatenate(ids), np.concatenate(idxs),
                     np.concatenate(pts), np.concatenate(nrms),
                     np.concatenate(vels))


class ClearanceWitness(NamedTuple):
    sphere_index: int
    obstacle_id: int
    point_index: int


def sphere_centers(model: RobotModel, q) -> np.ndarray:
    """World centers of the model's collision spheres at configuration q."""
    frames = fk_frames(model, q)
    return np.array([
        frames.origins[s.link_index] + frames.rotations[s.link_index] @ s.local_offset
        for s in model.collision_spheres
    ]).reshape(-1, 3)


def min_clearance(snapshot: WorldSnapshot, model: RobotModel, q):
    """Smallest (point-to-sphere-center distance - radius) over the body.

    Returns (distance, witness); distance is +inf with witness None when the
    world is empty or the model declares no spheres. Negative values mean
    penetration.
    """
    centers = sphere_centers(model, q)
    if centers.shape[0] == 0 or not snapshot.placed:
        return math.inf, None
    radii = np.array([s.radius for s in model.collision_spheres])
    best = math.inf
    witness = None
    for placed in snapshot.placed:
        obs = placed.obstacle
        centers_body = (centers - placed.position) @ obs.rotation
        dists, nearest = obs.tree.query(centers_body)
        clear = dists - radii
        k = int(np.argmin(clear))
        if clear[k] < best:
            best = float(clear[k])
            witness = ClearanceWitness(k, obs.id, int(nearest[k]))
    return best, witness


# ---------------------------------------------------------------------------
# normals from raw clouds

def estimate_normals(points, k: int, viewpoint):
    """Per-point plane-fit normals, oriented toward a viewpoint.

    Each normal is the eigenvector of the k-neighborhood covariance with the
    smallest eigenvalue, sign-flipped so normal . (viewpoint - point) >= 0.
    Neighborhoods of rank < 2 get unit(viewpoint - point) and a degenerate
    flag instead.

    Returns (normals (n, 3), degenerate flags (n,) bool).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if not 3 <= k <= n:
        raise ValueError("need |points| >= k >= 3")
    vp = np.asarray(viewpoint, dtype=float).reshape(3)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neigh = pts[idx]                                   # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    degenerate = eigvals[:, 1] <= 1e-9 * np.maximum(eigvals[:, 2], 1e-30)
    to_view = vp - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0.0
    normals[flip] *= -1.0
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norms > 0.0, norms, 1.0)
    if np.any(degenerate):
        fb = to_view[degenerate]
        fb_norm = np.linalg.norm(fb, axis=1, keepdims=True)
        fallback = np.where(fb_norm > 1e-12, fb / np.where(fb_norm > 0, fb_norm, 1.0),
                            np.array([0.0, 0.0, 1.0]))
        normals[degenerate] = fallback
    return normals, degenerate


# ---------------------------------------------------------------------------
# primitive surface sampling (scenario obstacles)

def _grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, max(2, n))


def sample_box(size, spacing: float = 0.02):
    """Surface-sample an axis-aligned box centered at the body origin."""
    sx, sy, sz = (float(v) for v in size)
    half = np.array([sx, sy, sz]) / 2.0
    counts = [max(2, int(round(s / spacing)) + 1) for s in (sx, sy, sz)]
    pts, nrms = [], []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        u = _grid(counts[u_axis]) * (2 * half[u_axis]) - half[u_axis]
        v = _grid(counts[v_axis]) * (2 * half[v_axis]) - half[v_axis]
        uu, vv = np.meshgrid(u, v, indexing="ij")
        for sign in (-1.0, 1.0):
            face = np.zeros((uu.size, 3))
            face[:, u_axis] = uu.ravel()
            face[:, v_axis] = vv.ravel()
            face[:, axis] = sign * half[axis]
            normal = np.zeros(3)
            normal[axis] = sign
            pts.append(face)
            nrms.append(np.broadcast_to(normal, face.shape))
    return np.concatenate(pts), np.concatenate(nrms).copy()


def sample_sphere(radius: float, spacing: float = 0.02):
    """Fibonacci-spiral surface sampling of a sphere; normals are radial."""
    radius = float(radius)
    n = max(8, int(round(4.0 * math.pi * radius * radius / (spacing * spacing))))
    i = np.arange(n, dtype=float)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = golden * i
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return radius * dirs, dirs.copy()


def sample_cylinder(radius: float, height: float, spacing: float = 0.02):
    """Surface-sample a z-aligned cylinder (side plus both caps)."""
    radius, height = float(radius), float(height)
    n_ring = max(8, int(round(2.0 * math.pi * radius / spacing)))
    n_h = max(2, int(round(height / spacing)) + 1)
    angles = np.linspace(0.0, 2.0 * math.pi, n_ring, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(n_ring)], axis=1)
    pts, nrms = [], []
    for z in np.linspace(-height / 2.0, height / 2.0, n_h):
        side = radius * ring + np.array([0.0, 0.0, z])
        pts.append(side)
        nrms.append(ring)
    n_rad = max(1, int(round(radius / spacing)))
    for sign in (-1.0, 1.0):
        cap_normal = np.array([0.0, 0.0, sign])
        for rr in np.linspace(0.0, radius, n_rad + 1)[1:]:
            m = max(4, int(round(2.0 * math.pi * rr / spacing)))
            a = np.linspace(0.0, 2.0 * math.pi, m, endpoint=False)
            cap = np.stack([rr * np.cos(a), rr * np.sin(a),
                            np.full(m, sign * height / 2.0)], axis=1)
            pts.append(cap)
            nrms.append(np.broadcast_to(cap_normal, cap.shape))
    return np.concatenate(pts), np.concatenate(nrms).copy()


def load_cloud_file(path, *, normals_k: int = 12, viewpoint=(0.0, 0.0, 0.0)):
    """Read a plain-text cloud: rows 'x y z [nx ny nz]'.

    Normals are estimated (and flagged rows re-oriented) when the file only
    carries positions.
    """
    rows = np.loadtxt(path, dtype=float, ndmin=2)
    if rows.shape[1] == 6:
        pts, nrms = rows[:, :3], rows[:, 3:]
        lens = np.linalg.norm(nrms, axis=1, keepdims=True)
        if np.any(lens == 0.0):
            raise ValueError(f"{path}: zero-length normal")
        return pts, nrms / lens
    if rows.shape[1] == 3:
        k = min(normals_k, rows.shape[0])
        if k < 3:
            raise ValueError(f"{path}: too few points to estimate normals")
        nrms, _ = estimate_normals(rows, k, viewpoint)
        return rows, nrms
    raise ValueError(f"{path}: expected 3 or 6 columns, got {rows.shape[1]}")

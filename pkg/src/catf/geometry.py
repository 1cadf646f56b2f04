"""Agent states, actor-centered frames, kinematics, and grid feasibility.

All operations are pure functions on small immutable value types; they are
safe for unrestricted concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AgentState:
    """2-D position at an integer step index."""

    x: float
    y: float
    t: int

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"AgentState: non-finite coordinates ({self.x}, {self.y})")


@dataclass(frozen=True)
class Trajectory:
    """Ordered agent states at a constant time step dt."""

    states: tuple[AgentState, ...]
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        if self.dt <= 0:
            raise ValueError(f"Trajectory: dt must be positive, got {self.dt}")
        for a, b in zip(self.states, self.states[1:]):
            if b.t != a.t + 1:
                raise ValueError(f"Trajectory: step indices must increase by 1 ({a.t} -> {b.t})")

    def __len__(self):
        return len(self.states)

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states], dtype=np.float64)

    def state_at(self, t: int) -> AgentState:
        first = self.states[0].t
        if not (first <= t <= self.states[-1].t):
            raise KeyError(f"Trajectory: no state at step {t}")
        return self.states[t - first]


@dataclass(frozen=True)
class Pose:
    """Reference frame anchor: origin plus heading (x-axis direction)."""

    origin: tuple[float, float]
    heading: float

    def __post_init__(self):
        if not math.isfinite(self.heading):
            raise ValueError("Pose: heading must be finite")
        if not (-math.pi < self.heading <= math.pi):
            wrapped = math.atan2(math.sin(self.heading), math.cos(self.heading))
            object.__setattr__(self, "heading", wrapped)


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if wrapped == -math.pi else wrapped


def world_to_actor(points: np.ndarray, ref: Pose) -> np.ndarray:
    """Map world (N,2) points into the actor frame of `ref` (forward = +x)."""
    points = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    rot = np.array([[c, s], [-s, c]])
    return (points - np.asarray(ref.origin)) @ rot.T


def actor_to_world(points: np.ndarray, ref: Pose) -> np.ndarray:
    """Inverse of :func:`world_to_actor`."""
    points = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ref.heading), math.sin(ref.heading)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T + np.asarray(ref.origin)


def to_actor_frame(traj: Trajectory, ref: Pose) -> Trajectory:
    """Express a trajectory in the actor-centered frame of `ref`.

    The reference origin maps to (0,0) and a point one meter ahead along the
    reference heading maps to (1,0); the transform is rigid.
    """
    if len(traj) == 0:
        raise ValueError("to_actor_frame: empty trajectory")
    local = world_to_actor(traj.positions(), ref)
    states = tuple(AgentState(float(p[0]), float(p[1]), s.t)
                   for p, s in zip(local, traj.states))
    return Trajectory(states, traj.dt)


def from_actor_frame(traj: Trajectory, ref: Pose) -> Trajectory:
    if len(traj) == 0:
        raise ValueError("from_actor_frame: empty trajectory")
    world = actor_to_world(traj.positions(), ref)
    states = tuple(AgentState(float(p[0]), float(p[1]), s.t)
                   for p, s in zip(world, traj.states))
    return Trajectory(states, traj.dt)


def derive_kinematics(traj: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Per-step heading (rad) and speed (m/s) from displacement vectors.

    The final step copies the previous value; zero displacements propagate
    the last defined heading (0 at the start by convention).
    """
    if len(traj) < 2:
        raise ValueError("derive_kinematics: need at least 2 states")
    pos = traj.positions()
    deltas = np.diff(pos, axis=0)
    speeds = np.linalg.norm(deltas, axis=1) / traj.dt
    headings = np.zeros(len(deltas))
    last = 0.0
    for i, (dx, dy) in enumerate(deltas):
        if dx == 0.0 and dy == 0.0:
            headings[i] = last
        else:
            last = math.atan2(dy, dx)
            headings[i] = last
    headings = np.append(headings, headings[-1])
    speeds = np.append(speeds, speeds[-1])
    return headings, speeds


@dataclass(frozen=True)
class GridCell:
    """Convex quadrilateral cell with corners A,B,C,D in counter-clockwise order."""

    a: tuple[float, float]
    b: tuple[float, float]
    c: tuple[float, float]
    d: tuple[float, float]

    def __post_init__(self):
        corners = np.array([self.a, self.b, self.c, self.d])
        area2 = 0.0
        for i in range(4):
            p, q = corners[i], corners[(i + 1) % 4]
            area2 += p[0] * q[1] - q[0] * p[1]
        if abs(area2) < 1e-12:
            raise ValueError("GridCell: degenerate quadrilateral")


def point_in_cell(point: tuple[float, float], cell: GridCell) -> bool:
    """Strict interior test via edge dot products; boundary points are outside.

    Returns true iff (AB.AX)(CD.CX) > 0 and (DA.DX)(BC.BX) > 0.
    """
    x = np.asarray(point, dtype=np.float64)
    a = np.asarray(cell.a)
    b = np.asarray(cell.b)
    c = np.asarray(cell.c)
    d = np.asarray(cell.d)
    first = np.dot(b - a, x - a) * np.dot(d - c, x - c)
    second = np.dot(a - d, x - d) * np.dot(c - b, x - b)
    return bool(first > 0.0 and second > 0.0)

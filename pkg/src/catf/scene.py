"""Synthetic scenes, BEV rasterization, drivable grids, and dataset files.

The generator stands in for a real driving log corpus: road templates
(straight / curve / fork / intersection) with agents moving along lane
centerlines at sampled speeds.  Everything is deterministic given
(config, seed), so generation and rasterization are safe to parallelize
across scenes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .geometry import (AgentState, GridCell, Pose, Trajectory, actor_to_world,
                       derive_kinematics, point_in_cell, world_to_actor)

TEMPLATES = ("straight", "curve", "fork", "intersection")


class DatasetError(ValueError):
    """Malformed dataset file."""


# -- core types ---------------------------------------------------------------


@dataclass
class Scene:
    scene_id: str
    drivable: list[np.ndarray]          # road polygons, (N,2) world meters
    centerlines: list[np.ndarray]       # lane centerlines, (N,2) world meters
    agents: list[tuple[str, Trajectory]]
    av_id: str
    ref_time: int
    history_len: int
    horizon: int
    dt: float

    def __post_init__(self):
        ids = [a for a, _ in self.agents]
        if self.av_id not in ids:
            raise ValueError(f"Scene {self.scene_id}: av_id {self.av_id!r} not among agents")
        need = self.history_len + self.horizon + 1
        for aid, traj in self.agents:
            if len(traj) < need:
                raise ValueError(f"Scene {self.scene_id}: agent {aid} has {len(traj)} states, "
                                 f"needs {need}")

    def agent(self, agent_id: str) -> Trajectory:
        for aid, traj in self.agents:
            if aid == agent_id:
                return traj
        raise KeyError(f"Scene {self.scene_id}: no agent {agent_id!r}")

    def target_ids(self) -> list[str]:
        return [a for a, _ in self.agents if a != self.av_id]

    def ref_pose(self, agent_id: str) -> Pose:
        traj = self.agent(agent_id)
        state = traj.state_at(self.ref_time)
        headings, _ = derive_kinematics(traj)
        return Pose((state.x, state.y), float(headings[self.ref_time - traj.states[0].t]))

    def drivable_union(self):
        if not self.drivable:
            return None
        return unary_union([Polygon(p) for p in self.drivable])


@dataclass
class RasterImage:
    pixels: np.ndarray                  # (H_px, W_px, 3) floats in [0,1], row 0 at bottom
    resolution: float                   # meters per pixel
    origin: tuple[float, float]         # actor-frame coords of the bottom-left corner

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if h < 1 or w < 1:
            raise ValueError("RasterImage: empty image")
        if not np.isfinite(self.pixels).all():
            raise ValueError("RasterImage: non-finite pixels")

    def extent_m(self) -> tuple[float, float]:
        h, w = self.pixels.shape[:2]
        return (w * self.resolution, h * self.resolution)

    def point_to_pixel(self, point) -> tuple[int, int]:
        """Actor-frame point -> (row, col), row 0 at the bottom-left origin."""
        col = int(math.floor((point[0] - self.origin[0]) / self.resolution))
        row = int(math.floor((point[1] - self.origin[1]) / self.resolution))
        return row, col


@dataclass
class RasterConfig:
    size_px: int = 224
    resolution: float = 0.25            # meters per pixel
    footprint_radius: float = 1.0       # painted agent footprint, meters
    history_fade: float = 0.8           # afterimage decay per step back
    # agent position as a fraction of the image extent; placing it toward
    # the rear keeps the whole prediction horizon inside the window
    anchor: tuple[float, float] = (0.25, 0.5)

    def extent(self) -> tuple[float, float, float, float]:
        """Actor-frame (xmin, ymin, xmax, ymax) covered by the raster."""
        size_m = self.size_px * self.resolution
        xmin = -size_m * self.anchor[0]
        ymin = -size_m * self.anchor[1]
        return (xmin, ymin, xmin + size_m, ymin + size_m)


@dataclass
class DrivableGrid:
    """Actor-frame grid; `blocked` marks cells whose center is non-drivable."""

    cell_size: float
    extent: tuple[float, float, float, float]   # xmin, ymin, xmax, ymax
    blocked: np.ndarray                          # (rows, cols) bool

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.extent
        rows = int(round((ymax - ymin) / self.cell_size))
        cols = int(round((xmax - xmin) / self.cell_size))
        if self.blocked.shape != (rows, cols):
            raise ValueError(f"DrivableGrid: blocked shape {self.blocked.shape} inconsistent "
                             f"with extent/cell_size (expected {(rows, cols)})")

    @property
    def rows(self) -> int:
        return self.blocked.shape[0]

    @property
    def cols(self) -> int:
        return self.blocked.shape[1]

    def cell(self, row: int, col: int) -> GridCell:
        xmin, ymin, _, _ = self.extent
        x0 = xmin + col * self.cell_size
        y0 = ymin + row * self.cell_size
        cs = self.cell_size
        # A upper-left, B upper-right, C bottom-right, D bottom-left
        return GridCell((x0, y0 + cs), (x0 + cs, y0 + cs), (x0 + cs, y0), (x0, y0))

    def cell_index(self, point) -> tuple[int, int] | None:
        xmin, ymin, xmax, ymax = self.extent
        x, y = float(point[0]), float(point[1])
        if not (xmin <= x < xmax and ymin <= y < ymax):
            return None
        return (int((y - ymin) // self.cell_size), int((x - xmin) // self.cell_size))

    def is_offroad(self, point) -> bool:
        """True if the point lies strictly inside a blocked cell or outside the grid."""
        idx = self.cell_index(point)
        if idx is None:
            return True
        if not self.blocked[idx]:
            return False
        return point_in_cell((float(point[0]), float(point[1])), self.cell(*idx))

    def offroad_flags(self, points) -> np.ndarray:
        """Vectorized `is_offroad` over an (..., 2) array of points.

        Grid cells are axis-aligned, so the strict interior test reduces to
        strict coordinate bounds; boundary points count as on-road, matching
        the per-point test.
        """
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.extent
        cs = self.cell_size
        x, y = flat[:, 0], flat[:, 1]
        flags = np.ones(len(flat), dtype=bool)
        inside = (xmin <= x) & (x < xmax) & (ymin <= y) & (y < ymax)
        if inside.any():
            xi, yi = x[inside], y[inside]
            cols = ((xi - xmin) // cs).astype(int)
            rows = ((yi - ymin) // cs).astype(int)
            lx = xi - (xmin + cols * cs)
            ly = yi - (ymin + rows * cs)
            interior = (lx > 0) & (lx < cs) & (ly > 0) & (ly < cs)
            flags[inside] = self.blocked[rows, cols] & interior
        return flags.reshape(pts.shape[:-1])

    def free_centers(self) -> np.ndarray:
        rows, cols = np.nonzero(~self.blocked)
        xmin, ymin, _, _ = self.extent
        xs = xmin + (cols + 0.5) * self.cell_size
        ys = ymin + (rows + 0.5) * self.cell_size
        return np.stack([xs, ys], axis=1)

    def nearest_free_center(self, point) -> np.ndarray | None:
        centers = self.free_centers()
        if len(centers) == 0:
            return None
        d2 = ((centers - np.asarray(point, dtype=np.float64)) ** 2).sum(axis=1)
        return centers[int(np.argmin(d2))]


# -- lane paths ---------------------------------------------------------------


class _Path:
    """Arc-length parameterized polyline."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.s[-1])

    def at(self, s: float) -> np.ndarray:
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        return np.array([x, y])

    def normal(self, s: float) -> np.ndarray:
        eps = max(1e-3, self.length * 1e-4)
        a = self.at(max(0.0, s - eps))
        b = self.at(min(self.length, s + eps))
        tangent = b - a
        n = np.linalg.norm(tangent)
        if n == 0:
            return np.array([0.0, 1.0])
        tangent /= n
        return np.array([-tangent[1], tangent[0]])

    def band(self, half_width: float, step: float = 1.0) -> np.ndarray:
        """Road polygon: the path swept by +/- half_width along its normal."""
        ss = np.linspace(0.0, self.length, max(8, int(self.length / step)))
        left = np.array([self.at(s) + self.normal(s) * half_width for s in ss])
        right = np.array([self.at(s) - self.normal(s) * half_width for s in ss])
        return np.concatenate([left, right[::-1]], axis=0)


def _arc(center, radius, a0, a1, n=64) -> np.ndarray:
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _offset_path(path: _Path, offset: float, step: float = 1.0) -> _Path:
    ss = np.linspace(0.0, path.length, max(8, int(path.length / step)))
    pts = np.array([path.at(s) + path.normal(s) * offset for s in ss])
    return _Path(pts)


# -- scene generation ---------------------------------------------------------


@dataclass
class GenConfig:
    template: str = "straight"
    lane_width: float = 3.5
    num_agents: int = 2                 # target agents, AV excluded
    speed_range: tuple[float, float] = (5.0, 10.0)
    noise: float = 0.1                  # lateral jitter std, meters
    fork_split: float = 0.5             # probability of the left branch
    history_len: int = 10
    horizon: int = 50
    dt: float = 0.1
    min_spacing: float = 10.0           # meters between agents on one route

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; choose from {TEMPLATES}")
        if not (0.0 <= self.fork_split <= 1.0):
            raise ValueError("fork_split must be in [0,1]")


def _extend_tangent(points: np.ndarray, length: float) -> np.ndarray:
    tang = points[-1] - points[-2]
    tang = tang / np.linalg.norm(tang)
    return np.concatenate([points, [points[-1] + tang * length]])


def _template_routes(cfg: GenConfig, rng: np.random.Generator
                     ) -> tuple[list[_Path], list[float], _Path, list[np.ndarray], list[np.ndarray], float | None]:
    """Returns (target routes, route probabilities, AV route, drivable polys,
    centerlines, anchor arc-length of the turn/branch point or None).

    Curve and fork geometry varies per scene (turn direction via mirroring,
    random arc sweep), so the road layout is only knowable from the raster,
    not from the history or the template name alone.
    """
    lw = cfg.lane_width
    half = lw  # two lanes per road
    if cfg.template == "straight":
        lane0 = _Path(np.array([[-80.0, -lw / 2], [80.0, -lw / 2]]))
        lane1 = _Path(np.array([[80.0, lw / 2], [-80.0, lw / 2]]))
        road = _Path(np.array([[-80.0, 0.0], [80.0, 0.0]]))
        return [lane0], [1.0], lane1, [road.band(half)], [lane0.points, lane1.points], None
    if cfg.template == "curve":
        sweep = rng.uniform(np.radians(50.0), np.radians(95.0))
        sign = float(rng.choice([-1.0, 1.0]))
        arc = _arc((0.0, 30.0), 30.0, -np.pi / 2, -np.pi / 2 + sweep)[1:]
        pts = _extend_tangent(np.concatenate([np.array([[-60.0, 0.0], [-1.0, 0.0]]), arc]),
                              50.0)
        mid = _Path(pts)
        lane0 = _offset_path(mid, -lw / 2)
        lane1 = _Path(_offset_path(mid, lw / 2).points[::-1])
        routes, probs, av = [lane0], [1.0], lane1
        polys, lines, anchor = [mid.band(half)], [lane0.points, lane1.points], 59.0
    elif cfg.template == "fork":
        stem = np.array([[-80.0, 0.0], [-1.0, 0.0]])
        sweep_l = rng.uniform(np.radians(35.0), np.radians(75.0))
        sweep_r = rng.uniform(np.radians(35.0), np.radians(75.0))
        sign = float(rng.choice([-1.0, 1.0]))
        left_pts = np.concatenate([stem, _arc((0.0, 25.0), 25.0,
                                              -np.pi / 2, -np.pi / 2 + sweep_l)[1:]])
        left_mid = _Path(_extend_tangent(left_pts, 45.0))
        right_pts = np.concatenate([stem, _arc((0.0, -25.0), 25.0,
                                               np.pi / 2, np.pi / 2 - sweep_r)[1:]])
        right_mid = _Path(_extend_tangent(right_pts, 45.0))
        lane_l = _offset_path(left_mid, -lw / 2)
        lane_r = _offset_path(right_mid, lw / 2)
        av_lane = _Path(_offset_path(right_mid, -lw / 2).points[::-1])
        routes = [lane_l, lane_r]
        probs = [cfg.fork_split, 1.0 - cfg.fork_split]
        av = av_lane
        polys = [left_mid.band(half), right_mid.band(half)]
        lines, anchor = [lane_l.points, lane_r.points], 79.0
    else:
        return _intersection_routes(lw, half)
    if sign < 0:
        flip = np.array([1.0, -1.0])
        routes = [_Path(r.points * flip) for r in routes]
        av = _Path(av.points * flip)
        polys = [p * flip for p in polys]
        lines = [l * flip for l in lines]
    return routes, probs, av, polys, lines, anchor


def _intersection_routes(lw, half):
    # two crossing straight roads; target goes straight east
    ew = _Path(np.array([[-80.0, -lw / 2], [80.0, -lw / 2]]))
    ns = _Path(np.array([[lw / 2, -80.0], [lw / 2, 80.0]]))
    ew_mid = _Path(np.array([[-80.0, 0.0], [80.0, 0.0]]))
    ns_mid = _Path(np.array([[0.0, -80.0], [0.0, 80.0]]))
    polys = [ew_mid.band(half), ns_mid.band(half)]
    return [ew], [1.0], ns, polys, [ew.points, ns.points], None


def generate_scene(cfg: GenConfig, seed: int) -> Scene:
    """Deterministic synthetic scene for (cfg, seed).

    Ground-truth trajectories follow lane centerlines with bounded lateral
    jitter, so every future waypoint stays inside the drivable polygons.
    """
    rng = np.random.default_rng(seed)
    routes, probs, av_route, polys, lines, anchor = _template_routes(cfg, rng)
    total = cfg.history_len + cfg.horizon + 1

    capacity = sum(max(0, int((r.length * 0.5) / cfg.min_spacing)) for r in routes)
    if cfg.num_agents > capacity:
        raise ValueError(f"infeasible config: {cfg.num_agents} agents exceed lane capacity "
                         f"{capacity} for template {cfg.template!r}")

    max_lat = min(cfg.noise * 3.0, cfg.lane_width * 0.35)

    def make_traj(route: _Path, slot: int, at_anchor: bool = False) -> Trajectory:
        speed = rng.uniform(*cfg.speed_range)
        travel = speed * cfg.dt * (total - 1)
        usable = route.length - travel - 4.0
        if usable <= 0:
            speed = (route.length - 8.0) / (cfg.dt * (total - 1))
            travel = speed * cfg.dt * (total - 1)
            usable = route.length - travel - 4.0
        if at_anchor and anchor is not None:
            # place so the turn/branch point falls inside the future horizon
            s_ref = anchor - rng.uniform(1.0, 8.0)
            s0 = s_ref - speed * cfg.dt * cfg.history_len
            s0 = float(np.clip(s0, 2.0, max(usable, 2.0)))
        else:
            s0 = 2.0 + (slot * cfg.min_spacing) % max(usable, 1e-3)
        lat = np.clip(rng.normal(0.0, cfg.noise, size=total), -max_lat, max_lat)
        states = []
        for t in range(total):
            s = s0 + speed * cfg.dt * t
            p = route.at(s) + route.normal(s) * lat[t]
            states.append(AgentState(float(p[0]), float(p[1]), t))
        return Trajectory(tuple(states), cfg.dt)

    agents: list[tuple[str, Trajectory]] = []
    for i in range(cfg.num_agents):
        # every target agent draws its route from the template split
        ridx = int(rng.choice(len(routes), p=probs))
        agents.append((f"agent{i}", make_traj(routes[ridx], slot=i, at_anchor=(i == 0))))
    agents.append(("av", make_traj(av_route, slot=0)))

    return Scene(
        scene_id=f"{cfg.template}-{seed}",
        drivable=polys,
        centerlines=lines,
        agents=agents,
        av_id="av",
        ref_time=cfg.history_len,
        history_len=cfg.history_len,
        horizon=cfg.horizon,
        dt=cfg.dt,
    )


# -- rasterization ------------------------------------------------------------


def rasterize(scene: Scene, agent_id: str, cfg: RasterConfig | None = None) -> RasterImage:
    """BEV raster in the agent's actor-centered frame.

    Channel 0: drivable-area mask.  Channel 1: other agents' history
    footprints with afterimage fading.  Channel 2: target agent history.
    """
    cfg = cfg or RasterConfig()
    try:
        traj = scene.agent(agent_id)
        traj.state_at(scene.ref_time)
    except KeyError as exc:
        raise ValueError(f"rasterize: agent {agent_id!r} missing at ref_time") from exc
    ref = scene.ref_pose(agent_id)

    n = cfg.size_px
    xmin, ymin, _, _ = cfg.extent()
    origin = (xmin, ymin)
    pixels = np.zeros((n, n, 3), dtype=np.float64)

    # channel 0: drivable mask at pixel centers
    union = scene.drivable_union()
    if union is not None:
        col_x = np.arange(n) * cfg.resolution + origin[0] + cfg.resolution / 2.0
        row_y = np.arange(n) * cfg.resolution + origin[1] + cfg.resolution / 2.0
        xs, ys = np.meshgrid(col_x, row_y)              # ys varies along rows
        centers_actor = np.stack([xs.ravel(), ys.ravel()], axis=1)
        centers_world = actor_to_world(centers_actor, ref)
        inside = shapely.contains_xy(union, centers_world[:, 0], centers_world[:, 1])
        pixels[:, :, 0] = inside.reshape(n, n)

    def paint(channel: int, traj: Trajectory):
        r_px = max(1, int(round(cfg.footprint_radius / cfg.resolution)))
        for back in range(scene.history_len + 1):
            t = scene.ref_time - back
            try:
                st = traj.state_at(t)
            except KeyError:
                continue
            p = world_to_actor(np.array([[st.x, st.y]]), ref)[0]
            row = (p[1] - origin[1]) / cfg.resolution
            col = (p[0] - origin[0]) / cfg.resolution
            intensity = cfg.history_fade ** back
            r0, r1 = int(row) - r_px, int(row) + r_px + 1
            c0, c1 = int(col) - r_px, int(col) + r_px + 1
            for rr in range(max(0, r0), min(n, r1)):
                for cc in range(max(0, c0), min(n, c1)):
                    if (rr + 0.5 - row) ** 2 + (cc + 0.5 - col) ** 2 <= r_px ** 2:
                        pixels[rr, cc, channel] = max(pixels[rr, cc, channel], intensity)

    for aid, other in scene.agents:
        if aid != agent_id:
            paint(1, other)
    paint(2, traj)

    return RasterImage(pixels=pixels, resolution=cfg.resolution, origin=origin)


def build_drivable_grid(scene: Scene, agent_id: str, cell_size: float = 0.5,
                        extent: tuple[float, float, float, float] | None = None
                        ) -> DrivableGrid:
    """Actor-frame occupancy grid; a cell is blocked iff its center is
    outside every drivable polygon.  `extent` defaults to the default
    raster window so grid and raster cover the same area."""
    if cell_size <= 0:
        raise ValueError("build_drivable_grid: cell_size must be positive")
    if extent is None:
        extent = RasterConfig().extent()
    ref = scene.ref_pose(agent_id)
    xmin, ymin, xmax, ymax = extent
    rows = int(round((ymax - ymin) / cell_size))
    cols = int(round((xmax - xmin) / cell_size))
    extent = (xmin, ymin, xmin + cols * cell_size, ymin + rows * cell_size)
    col_x = np.arange(cols) * cell_size + xmin + cell_size / 2.0
    row_y = np.arange(rows) * cell_size + ymin + cell_size / 2.0
    xs, ys = np.meshgrid(col_x, row_y)
    centers_actor = np.stack([xs.ravel(), ys.ravel()], axis=1)
    union = scene.drivable_union()
    if union is None:
        blocked = np.ones((rows, cols), dtype=bool)
    else:
        centers_world = actor_to_world(centers_actor, ref)
        inside = shapely.contains_xy(union, centers_world[:, 0], centers_world[:, 1])
        blocked = (~inside).reshape(rows, cols)
    return DrivableGrid(cell_size=cell_size, extent=extent, blocked=blocked)


# -- dataset files ------------------------------------------------------------


def _round6(x: float) -> float:
    return round(float(x), 6)


def _scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "map": {
            "drivable": [[[_round6(x), _round6(y)] for x, y in poly] for poly in scene.drivable],
            "centerlines": [[[_round6(x), _round6(y)] for x, y in line]
                            for line in scene.centerlines],
        },
        "agents": [{"id": aid, "states": [[s.t, _round6(s.x), _round6(s.y)]
                                          for s in traj.states]}
                   for aid, traj in scene.agents],
        "av_id": scene.av_id,
        "ref_time": scene.ref_time,
    }


def save_dataset(scenes: list[Scene], path) -> None:
    path = Path(path)
    if scenes:
        dt, m, horizon = scenes[0].dt, scenes[0].history_len, scenes[0].horizon
    else:
        dt, m, horizon = 0.1, 10, 50
    header = {"format": "catf-scenes", "version": 1, "dt": dt, "m": m, "H": horizon}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for scene in scenes:
            fh.write(json.dumps(_scene_to_record(scene)) + "\n")


def load_dataset(path) -> list[Scene]:
    path = Path(path)
    scenes: list[Scene] = []
    header = None
    offset = 0
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh):
            stripped = raw.strip()
            if not stripped and lineno > 0:
                offset += len(raw)
                continue
            try:
                rec = json.loads(stripped.decode("utf-8"))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise DatasetError(f"{path}: malformed record {lineno} at byte offset "
                                   f"{offset}: {exc}") from exc
            if lineno == 0:
                if not isinstance(rec, dict) or rec.get("format") != "catf-scenes":
                    raise DatasetError(f"{path}: missing catf-scenes header at byte offset 0")
                if rec.get("version") != 1:
                    raise DatasetError(f"{path}: unsupported version {rec.get('version')}")
                header = rec
            else:
                try:
                    scenes.append(_record_to_scene(rec, header))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{path}: invalid record {lineno} at byte offset "
                                       f"{offset}: {exc}") from exc
            offset += len(raw)
    if header is None:
        raise DatasetError(f"{path}: empty file, expected a header record")
    return scenes


def _record_to_scene(rec: dict, header: dict) -> Scene:
    agents = []
    for a in rec["agents"]:
        states = tuple(AgentState(float(x), float(y), int(t)) for t, x, y in a["states"])
        agents.append((a["id"], Trajectory(states, float(header["dt"]))))
    return Scene(
        scene_id=rec["scene_id"],
        drivable=[np.array(p, dtype=np.float64) for p in rec["map"]["drivable"]],
        centerlines=[np.array(p, dtype=np.float64) for p in rec["map"]["centerlines"]],
        agents=agents,
        av_id=rec["av_id"],
        ref_time=int(rec["ref_time"]),
        history_len=int(header["m"]),
        horizon=int(header["H"]),
        dt=float(header["dt"]),
    )

"""Synthetic social-navigation episodes: goal-seeking robot among discs.

A seeded episode is fully deterministic and embarrassingly parallel across
seeds. The robot steers by goal attraction plus inverse-square repulsion from
obstacle and pedestrian discs, sampled at 1 Hz; pedestrians are
constant-velocity discs that reflect off the arena bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Frame, Trajectory, V_MAX, Waypoint, heading_of

GRID_SIZE = 32
GRID_RESOLUTION = 0.5  # meters per cell
PED_RADIUS = 0.3
K_GOAL = 1.0
K_OBSTACLE = 0.8
REPULSE_FLOOR = 0.2    # clamp on (distance - radius) inside the repulsion law
GOAL_TOLERANCE = 1.0   # meters; episode ends inside this radius
MAX_STEPS = 120
CONTACT_MARGIN = 0.02  # stand-off kept between robot and obstacle boundary


@dataclass(frozen=True)
class SceneConfig:
    """Scene generation knobs; `seed` determines the episode bit-exactly."""

    bounds: float = 40.0
    n_obstacles: int = 8
    obstacle_radius_range: tuple[float, float] = (0.4, 1.2)
    n_pedestrians: int = 2
    ped_speed_range: tuple[float, float] = (0.4, 1.2)
    robot_speed: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.bounds <= 0:
            raise ValueError("bounds must be positive")
        if self.n_obstacles < 0 or self.n_pedestrians < 0:
            raise ValueError("counts must be non-negative")
        for lo, hi in (self.obstacle_radius_range, self.ped_speed_range):
            if lo > hi:
                raise ValueError("ranges must be ordered low <= high")
        if not 0 < self.robot_speed <= V_MAX:
            raise ValueError(f"robot_speed must lie in (0, {V_MAX}]")


def indoor_like(seed: int) -> SceneConfig:
    """Dense scene family: many obstacles and pedestrians at base speed."""
    return SceneConfig(n_obstacles=12, n_pedestrians=4, seed=seed)


def outdoor_like(seed: int) -> SceneConfig:
    """Sparse scene family at 1.5x speeds (the shifted-dynamics split)."""
    return SceneConfig(
        n_obstacles=3,
        n_pedestrians=1,
        robot_speed=1.5,
        ped_speed_range=(0.6, 1.8),
        seed=seed,
    )


@dataclass(eq=False)
class OccGrid:
    """32x32 ego-centric occupancy snapshot, 0 free / 255 occupied.

    The robot sits at the center of the bottom edge facing up the grid:
    row 0 is the farthest-ahead band, columns run left to right across the
    robot's view. `pose` records where the grid was rendered (metadata in the
    producing episode's frame; not part of value equality and absent on grids
    loaded from disk).
    """

    cells: np.ndarray
    resolution: float = GRID_RESOLUTION
    pose: Optional[Frame] = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.shape != (GRID_SIZE, GRID_SIZE):
            raise ValueError(f"grid must be {GRID_SIZE}x{GRID_SIZE}, got {self.cells.shape}")
        bad = ~np.isin(self.cells, (0, 255))
        if bad.any():
            raise ValueError("grid cells must be 0 or 255")

    def __eq__(self, other):
        if not isinstance(other, OccGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.cells, other.cells)

    def occupancy_fraction(self) -> float:
        return float(np.mean(self.cells == 255))


@dataclass(frozen=True)
class SceneState:
    """Disc world at one instant: static obstacles plus pedestrian positions."""

    obstacles: np.ndarray      # (N, 3): x, y, radius
    ped_positions: np.ndarray  # (M, 2)
    ped_radius: float = PED_RADIUS

    def discs(self) -> np.ndarray:
        """All discs as (K, 3) rows of x, y, radius."""
        if len(self.ped_positions) == 0:
            return self.obstacles.reshape(-1, 3)
        peds = np.concatenate(
            [self.ped_positions, np.full((len(self.ped_positions), 1), self.ped_radius)], axis=1
        )
        if len(self.obstacles) == 0:
            return peds
        return np.concatenate([self.obstacles.reshape(-1, 3), peds], axis=0)


@dataclass(frozen=True)
class Episode:
    robot_traj: Trajectory
    observations: tuple
    goal: Waypoint
    scene_id: str
    reached_goal: bool = True
    obstacles: tuple = ()  # static discs as (x, y, radius) rows, for inspection

    def __post_init__(self):
        if len(self.observations) != len(self.robot_traj):
            raise ValueError("need exactly one observation per trajectory step")


def _cell_edges():
    """Forward/left extents of every cell in the grid's ego frame."""
    ri = np.arange(GRID_SIZE)
    x0 = (GRID_SIZE - 1 - ri) * GRID_RESOLUTION   # row 0 farthest ahead
    x1 = x0 + GRID_RESOLUTION
    ci = np.arange(GRID_SIZE)
    y1 = (GRID_SIZE // 2 - ci) * GRID_RESOLUTION  # col 0 is far left
    y0 = y1 - GRID_RESOLUTION
    return x0, x1, y0, y1


_X0, _X1, _Y0, _Y1 = _cell_edges()


def render_occupancy(state: SceneState, pose: Frame) -> OccGrid:
    """Rasterize all discs intersecting the ahead-view window at `pose`."""
    occupied = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    for cx, cy, r in state.discs():
        dx, dy = cx - pose.origin.x, cy - pose.origin.y
        ex = c * dx + s * dy        # ego forward
        ey = -s * dx + c * dy       # ego left
        if ex + r < 0 or ex - r > GRID_SIZE * GRID_RESOLUTION:
            continue
        # closest point of each cell rectangle to the disc center
        px = np.clip(ex, _X0, _X1)[:, None]
        py = np.clip(ey, _Y0, _Y1)[None, :]
        occupied |= (px - ex) ** 2 + (py - ey) ** 2 < r * r
    cells = np.where(occupied, np.uint8(255), np.uint8(0))
    return OccGrid(cells=cells, pose=pose)


def _sample_free_point(rng, half: float, discs: np.ndarray, clearance: float) -> np.ndarray:
    for _ in range(500):
        p = rng.uniform(-half, half, size=2)
        if len(discs) == 0:
            return p
        d = np.hypot(discs[:, 0] - p[0], discs[:, 1] - p[1]) - discs[:, 2]
        if np.all(d > clearance):
            return p
    raise RuntimeError("could not place a free point; scene too dense")


def _first_hit(p: np.ndarray, step: np.ndarray, discs: np.ndarray) -> float:
    """Earliest s in [0, 1] where p + s*step touches an inflated disc, else 1."""
    s_min = 1.0
    for cx, cy, r in discs:
        rr = r + CONTACT_MARGIN
        f = p - np.array([cx, cy])
        a = float(step @ step)
        if a == 0.0:
            continue
        b = 2.0 * float(f @ step)
        cq = float(f @ f) - rr * rr
        if cq <= 0.0:
            if b < 0.0:
                return 0.0  # inside the stand-off shell and headed inward: stay put
            continue       # inside the shell but escaping; a straight step cannot dig deeper
        disc = b * b - 4 * a * cq
        if disc <= 0.0:
            continue
        s = (-b - math.sqrt(disc)) / (2 * a)
        if 0.0 <= s < s_min:
            s_min = s
    return s_min


def simulate_episode(cfg: SceneConfig) -> Episode:
    """Run one seeded episode until the goal is within 1 m or 120 steps pass."""
    rng = np.random.default_rng(cfg.seed)
    half = cfg.bounds / 2.0

    r_lo, r_hi = cfg.obstacle_radius_range
    obstacles = np.zeros((cfg.n_obstacles, 3))
    if cfg.n_obstacles:
        obstacles[:, :2] = rng.uniform(-half + r_hi, half - r_hi, size=(cfg.n_obstacles, 2))
        obstacles[:, 2] = rng.uniform(r_lo, r_hi, size=cfg.n_obstacles)

    pos = _sample_free_point(rng, half * 0.9, obstacles, clearance=1.0)
    goal_min = min(10.0, cfg.bounds * 0.35)
    for _ in range(500):
        goal = _sample_free_point(rng, half * 0.9, obstacles, clearance=1.0)
        if np.linalg.norm(goal - pos) >= goal_min:
            break

    ped_pos = np.zeros((cfg.n_pedestrians, 2))
    ped_vel = np.zeros((cfg.n_pedestrians, 2))
    for i in range(cfg.n_pedestrians):
        ped_pos[i] = _sample_free_point(rng, half * 0.9, obstacles, clearance=0.5)
        ang = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*cfg.ped_speed_range)
        ped_vel[i] = speed * np.array([math.cos(ang), math.sin(ang)])

    dt = 1.0
    vel = np.zeros(2)
    positions = [pos.copy()]
    ped_history = [ped_pos.copy()]
    reached = bool(np.linalg.norm(goal - pos) < GOAL_TOLERANCE)

    for _ in range(MAX_STEPS):
        if reached:
            break
        state = SceneState(obstacles=obstacles, ped_positions=ped_pos)
        acc = np.zeros(2)
        to_goal = goal - pos
        dist_goal = np.linalg.norm(to_goal)
        if dist_goal > 0:
            acc += K_GOAL * to_goal / dist_goal
        for cx, cy, r in state.discs():
            away = pos - np.array([cx, cy])
            d = np.linalg.norm(away)
            if d > 0:
                gap = max(d - r, REPULSE_FLOOR)
                acc += K_OBSTACLE * (away / d) / gap**2
        vel = vel + acc * dt
        speed = np.linalg.norm(vel)
        if speed > cfg.robot_speed:
            vel = vel * (cfg.robot_speed / speed)
        step = vel * dt
        s = _first_hit(pos, step, obstacles)
        pos = pos + s * step

        ped_pos = ped_pos + ped_vel * dt
        for i in range(cfg.n_pedestrians):
            for k in range(2):
                if ped_pos[i, k] > half:
                    ped_pos[i, k] = 2 * half - ped_pos[i, k]
                    ped_vel[i, k] = -ped_vel[i, k]
                elif ped_pos[i, k] < -half:
                    ped_pos[i, k] = -2 * half - ped_pos[i, k]
                    ped_vel[i, k] = -ped_vel[i, k]

        positions.append(pos.copy())
        ped_history.append(ped_pos.copy())
        reached = bool(np.linalg.norm(goal - pos) < GOAL_TOLERANCE)

    traj = Trajectory.from_array(np.asarray(positions))
    grids = []
    prev_heading = 0.0
    for t in range(len(positions)):
        if t == 0:
            heading = (
                heading_of(traj[0], traj[1]) if len(positions) > 1 else 0.0
            )
        else:
            heading = heading_of(traj[t - 1], traj[t])
            if traj[t - 1] == traj[t]:
                heading = prev_heading
        prev_heading = heading
        pose = Frame(origin=traj[t], heading=heading)
        grids.append(render_occupancy(SceneState(obstacles, ped_history[t]), pose))

    return Episode(
        robot_traj=traj,
        observations=tuple(grids),
        goal=Waypoint(float(goal[0]), float(goal[1])),
        scene_id=f"scene-{cfg.seed}",
        reached_goal=reached,
        obstacles=tuple(map(tuple, obstacles.tolist())),
    )


def make_samples(ep: Episode, t_min: int, t_max: int, seed: int = 0) -> list:
    """Slice an episode into ego-framed samples by sliding a 9-step window.

    Futures are drawn uniformly from [t_min, t_max] per anchor, clamped to the
    steps remaining in the episode; anchors with fewer than t_min remaining
    steps are skipped, so short episodes yield an empty list.
    """
    from .geometry import HISTORY_LEN, Sample, to_ego_frame

    if t_min < 1 or t_max < t_min:
        raise ValueError("need 1 <= t_min <= t_max")
    rng = np.random.default_rng(seed)
    n = len(ep.robot_traj)
    samples = []
    for t in range(HISTORY_LEN - 1, n):
        remaining = n - 1 - t
        if remaining < t_min:
            continue
        length = min(int(rng.integers(t_min, t_max + 1)), remaining)
        raw = Sample(
            history=Trajectory(ep.robot_traj.points[t - 8 : t + 1]),
            observations=ep.observations[t - 8 : t + 1],
            goal=ep.goal,
            future=Trajectory(ep.robot_traj.points[t + 1 : t + 1 + length]),
            scene_id=ep.scene_id,
            sample_id=f"{ep.scene_id}:t{t}",
        )
        samples.append(to_ego_frame(raw))
    return samples

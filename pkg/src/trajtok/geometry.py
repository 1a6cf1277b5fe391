"""Trajectory domain types, ego-frame normalization, and displacement metrics.

All types are immutable after construction and all operations are pure, so
values can be shared freely across threads. Coordinates are meters in a
right-handed 2-D frame: scene frame (x east, y north) or ego frame
(x forward, y left) at a fixed 1 s timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

COORD_BOUND = 1000.0   # scene sanity bound on |x|, |y|
V_MAX = 3.0            # m/s, simulator speed bound
HISTORY_LEN = 9        # history positions per sample (indices t-8 .. t)


@dataclass(frozen=True)
class Waypoint:
    """A single 2-D position in meters."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"waypoint coordinates must be finite, got ({self.x}, {self.y})")
        if abs(self.x) > COORD_BOUND or abs(self.y) > COORD_BOUND:
            raise ValueError(f"waypoint outside scene bound {COORD_BOUND}: ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class Trajectory:
    """Ordered waypoints at a fixed timestep.

    Consecutive displacements are bounded by V_MAX * dt; use
    `Trajectory.unchecked` for model outputs that may violate the bound.
    """

    points: tuple[Waypoint, ...]
    dt: float = 1.0
    _skip_bound_check: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.points) < 1:
            raise ValueError("trajectory needs at least one waypoint")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self._skip_bound_check:
            limit = V_MAX * self.dt + 1e-9
            for i in range(1, len(self.points)):
                d = _dist(self.points[i - 1], self.points[i])
                if d > limit:
                    raise ValueError(
                        f"displacement {d:.3f} m between steps {i-1} and {i} exceeds "
                        f"v_max*dt = {V_MAX * self.dt:.3f} m"
                    )

    @classmethod
    def unchecked(cls, points: Sequence[Waypoint], dt: float = 1.0) -> "Trajectory":
        """Build without the displacement bound (generated trajectories)."""
        return cls(tuple(points), dt, _skip_bound_check=True)

    @classmethod
    def from_array(cls, arr, dt: float = 1.0, checked: bool = True) -> "Trajectory":
        pts = tuple(Waypoint(float(p[0]), float(p[1])) for p in arr)
        return cls(pts, dt) if checked else cls.unchecked(pts, dt)

    def as_array(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.points], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i) -> Waypoint:
        return self.points[i]


@dataclass(frozen=True)
class Frame:
    """A pose: origin plus heading in radians, heading in (-pi, pi]."""

    origin: Waypoint
    heading: float

    def __post_init__(self):
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"heading must lie in (-pi, pi], got {self.heading}")


@dataclass(frozen=True)
class Sample:
    """One training/eval instance: 9-step history with observations, goal, future."""

    history: Trajectory
    observations: tuple
    goal: Waypoint
    future: Trajectory
    scene_id: str = ""
    sample_id: str = ""
    cot_text: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.history) != HISTORY_LEN:
            raise ValueError(f"history must hold {HISTORY_LEN} waypoints, got {len(self.history)}")
        if len(self.observations) != HISTORY_LEN:
            raise ValueError(
                f"need one observation per history step ({HISTORY_LEN}), got {len(self.observations)}"
            )
        if len(self.future) < 1:
            raise ValueError("future must be non-empty")


def _dist(a: Waypoint, b: Waypoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def heading_of(prev: Waypoint, cur: Waypoint) -> float:
    """Heading of the displacement prev->cur; 0 for a degenerate (zero) step."""
    dx, dy = cur.x - prev.x, cur.y - prev.y
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return _wrap_angle(math.atan2(dy, dx))


def ego_frame_of(sample: Sample) -> Frame:
    """The frame anchored at the last history pose, heading along the last step."""
    pts = sample.history.points
    return Frame(origin=pts[-1], heading=heading_of(pts[-2], pts[-1]))


def transform_point(frame: Frame, p: Waypoint) -> Waypoint:
    """World -> frame coordinates (rotate by -heading after translating)."""
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    dx, dy = p.x - frame.origin.x, p.y - frame.origin.y
    return Waypoint(c * dx + s * dy, -s * dx + c * dy)


def untransform_point(frame: Frame, p: Waypoint) -> Waypoint:
    """Frame -> world coordinates; inverse of transform_point."""
    c, s = math.cos(frame.heading), math.sin(frame.heading)
    return Waypoint(frame.origin.x + c * p.x - s * p.y, frame.origin.y + s * p.x + c * p.y)


def _map_trajectory(traj: Trajectory, fn) -> Trajectory:
    return Trajectory.unchecked(tuple(fn(p) for p in traj.points), traj.dt)


def to_ego_frame(sample: Sample) -> Sample:
    """Express a sample in the ego frame of its current (last-history) pose.

    The last history point maps to (0, 0) and the last history displacement
    to the +x axis; a stationary history keeps heading 0 by convention.
    """
    frame = ego_frame_of(sample)
    fn = lambda p: transform_point(frame, p)
    return Sample(
        history=_map_trajectory(sample.history, fn),
        observations=sample.observations,
        goal=fn(sample.goal),
        future=_map_trajectory(sample.future, fn),
        scene_id=sample.scene_id,
        sample_id=sample.sample_id,
        cot_text=sample.cot_text,
    )


def from_ego_frame(sample: Sample, frame: Frame) -> Sample:
    """Undo to_ego_frame given the original frame returned by ego_frame_of."""
    fn = lambda p: untransform_point(frame, p)
    return Sample(
        history=_map_trajectory(sample.history, fn),
        observations=sample.observations,
        goal=fn(sample.goal),
        future=_map_trajectory(sample.future, fn),
        scene_id=sample.scene_id,
        sample_id=sample.sample_id,
        cot_text=sample.cot_text,
    )


def l2_metric(pred: Trajectory, gt: Trajectory) -> float:
    """Mean per-step Euclidean displacement error, in meters."""
    _check_paired(pred, gt)
    diff = pred.as_array() - gt.as_array()
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def l1_metric(pred: Trajectory, gt: Trajectory) -> float:
    """Mean per-step absolute error |dx| + |dy|, in meters."""
    _check_paired(pred, gt)
    diff = pred.as_array() - gt.as_array()
    return float(np.mean(np.sum(np.abs(diff), axis=1)))


def _check_paired(pred: Trajectory, gt: Trajectory) -> None:
    if len(pred) != len(gt):
        raise ValueError(
            f"trajectory lengths differ ({len(pred)} vs {len(gt)}); truncate explicitly first"
        )


def truncate(traj: Trajectory, k: int) -> Trajectory:
    """First k waypoints, 1 <= k <= len(traj)."""
    if not 1 <= k <= len(traj):
        raise ValueError(f"truncation length {k} out of range [1, {len(traj)}]")
    return Trajectory.unchecked(traj.points[:k], traj.dt)

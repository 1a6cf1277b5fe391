"""JSONL dataset files: one sample per line, occupancy grids as base64.

The line schema is a stable external interface: scene_id, sample_id, history
(9 [x, y] pairs), goal, future, obs (9 base64 strings, each decoding to 1024
raw grid bytes), cot (string or null). Coordinates are ego-frame floats and
survive a write/read cycle exactly.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .geometry import HISTORY_LEN, Sample, Trajectory, Waypoint
from .simulator import GRID_SIZE, OccGrid

_KEYS = ("scene_id", "sample_id", "history", "goal", "future", "obs", "cot")


class DatasetFormatError(ValueError):
    """A dataset line that does not match the schema; carries the line number."""


def _pairs(traj: Trajectory) -> list:
    return [[p.x, p.y] for p in traj.points]


def _encode_grid(grid: OccGrid) -> str:
    return base64.b64encode(grid.cells.tobytes()).decode("ascii")


def _decode_grid(text: str, lineno: int) -> OccGrid:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception as exc:
        raise DatasetFormatError(f"line {lineno}: obs entry is not valid base64") from exc
    if len(raw) != GRID_SIZE * GRID_SIZE:
        raise DatasetFormatError(
            f"line {lineno}: obs entry decodes to {len(raw)} bytes, expected {GRID_SIZE * GRID_SIZE}"
        )
    cells = np.frombuffer(raw, dtype=np.uint8).reshape(GRID_SIZE, GRID_SIZE)
    try:
        return OccGrid(cells=cells.copy())
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc


def sample_to_record(sample: Sample) -> dict:
    return {
        "scene_id": sample.scene_id,
        "sample_id": sample.sample_id,
        "history": _pairs(sample.history),
        "goal": [sample.goal.x, sample.goal.y],
        "future": _pairs(sample.future),
        "obs": [_encode_grid(g) for g in sample.observations],
        "cot": sample.cot_text,
    }


def _traj_from_pairs(pairs, what: str, lineno: int) -> Trajectory:
    try:
        pts = tuple(Waypoint(float(x), float(y)) for x, y in pairs)
        return Trajectory(pts)
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: bad {what}: {exc}") from exc


def record_to_sample(rec: dict, lineno: int = 0) -> Sample:
    missing = [k for k in _KEYS if k not in rec]
    if missing:
        raise DatasetFormatError(f"line {lineno}: missing keys {missing}")
    if not isinstance(rec["obs"], list) or len(rec["obs"]) != HISTORY_LEN:
        raise DatasetFormatError(f"line {lineno}: obs must hold {HISTORY_LEN} grids")
    cot = rec["cot"]
    if cot is not None and not isinstance(cot, str):
        raise DatasetFormatError(f"line {lineno}: cot must be a string or null")
    try:
        gx, gy = rec["goal"]
        goal = Waypoint(float(gx), float(gy))
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: bad goal: {exc}") from exc
    try:
        return Sample(
            history=_traj_from_pairs(rec["history"], "history", lineno),
            observations=tuple(_decode_grid(t, lineno) for t in rec["obs"]),
            goal=goal,
            future=_traj_from_pairs(rec["future"], "future", lineno),
            scene_id=str(rec["scene_id"]),
            sample_id=str(rec["sample_id"]),
            cot_text=cot,
        )
    except DatasetFormatError:
        raise
    except ValueError as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from exc


def write_dataset(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: expected a JSON object")
            samples.append(record_to_sample(rec, lineno))
    return samples

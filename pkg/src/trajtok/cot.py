"""Reasoning annotations: curvature meta-actions and observation/plan text.

A trajectory is decomposed into straight / turn-left / turn-right spans by
windowed signed turning angles; the template provider renders those spans,
plus a summary of the latest occupancy grid, as a short two-part sentence a
word-level tokenizer can digest. A remote provider can substitute richer text
and degrades to the template on any transport or schema failure.
"""

from __future__ import annotations

import base64
import json
import math
import re
from dataclasses import replace

import numpy as np

from .geometry import Sample, Trajectory, Waypoint
from .simulator import GRID_RESOLUTION, GRID_SIZE

WINDOW = 3            # turning angles per labeled chunk
THETA_S_DEG = 5.0     # mean |turn| below this reads as straight
STRAIGHT, LEFT, RIGHT = "S", "L", "R"

_PLAN_PHRASE = {
    STRAIGHT: "proceed straight for {} steps",
    LEFT: "turn left for {} steps",
    RIGHT: "turn right for {} steps",
}
_PHRASE_RE = re.compile(
    r"(proceed straight|turn left|turn right) for (\d+) steps"
)
_PHRASE_LABEL = {"proceed straight": STRAIGHT, "turn left": LEFT, "turn right": RIGHT}


def turning_angles(traj: Trajectory) -> np.ndarray:
    """Signed turn at each interior point: +ccw, in radians, zero when degenerate."""
    pts = traj.as_array()
    if len(pts) < 3:
        return np.zeros(0)
    a = np.diff(pts, axis=0)
    prev, nxt = a[:-1], a[1:]
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    dot = np.einsum("ij,ij->i", prev, nxt)
    out = np.arctan2(cross, dot)
    out[(cross == 0.0) & (dot == 0.0)] = 0.0
    return out


def decompose(traj: Trajectory, window: int = WINDOW, theta_s_deg: float = THETA_S_DEG) -> list:
    """Split point indices 0..n-1 into labeled (label, start, end) spans.

    Chunks of `window` consecutive turning angles vote S/L/R by mean; adjacent
    equal labels merge. Fewer than three points cannot turn and give one
    straight span.
    """
    if window < 1:
        raise ValueError("window must be positive")
    n = len(traj)
    angles = turning_angles(traj)
    if len(angles) == 0:
        return [(STRAIGHT, 0, n - 1)]
    theta_s = math.radians(theta_s_deg)
    labels = []
    for lo in range(0, len(angles), window):
        chunk = angles[lo : lo + window]
        if float(np.mean(np.abs(chunk))) < theta_s:
            labels.append(STRAIGHT)
        else:
            labels.append(LEFT if float(np.mean(chunk)) > 0 else RIGHT)

    # chunk j covers points [j*window, (j+1)*window - 1]; first span is pulled
    # back to 0 and the last pushed to n-1 so the spans partition the points
    spans = []
    for j, label in enumerate(labels):
        start = 0 if j == 0 else j * window
        end = (j + 1) * window - 1
        if j == len(labels) - 1:
            end = n - 1
        if spans and spans[-1][0] == label:
            spans[-1] = (label, spans[-1][1], end)
        else:
            spans.append((label, start, end))
    return spans


def span_step_counts(spans: list) -> list:
    """Steps attributed to each span: a step belongs to the span of its endpoint."""
    counts = []
    for i, (_, start, end) in enumerate(spans):
        counts.append(end - start if i == 0 else end - start + 1)
    return counts


def plan_text(spans: list) -> str:
    phrases = [
        _PLAN_PHRASE[label].format(max(count, 1))
        for (label, _, _), count in zip(spans, span_step_counts(spans))
    ]
    return " , then ".join(phrases)


def parse_plan(text: str) -> list:
    """Recover (label, steps) pairs from a plan clause; raises if none found."""
    pairs = [(_PHRASE_LABEL[verb], int(k)) for verb, k in _PHRASE_RE.findall(text)]
    if not pairs:
        raise ValueError("no plan phrases found")
    return pairs


_SECTOR_NAMES = ("ahead", "left", "right")


def _sector_of(col: int) -> str:
    if col < 11:
        return "left"
    if col < 21:
        return "ahead"
    return "right"


def observation_text(grid) -> str:
    """Nearest occupied distance per view sector, or a no-obstacle note."""
    occupied = np.argwhere(grid.cells == 255)
    if len(occupied) == 0:
        return "no obstacles detected"
    nearest = {}
    for ri, ci in occupied:
        x = (GRID_SIZE - 1 - ri) * GRID_RESOLUTION + GRID_RESOLUTION / 2
        y = (GRID_SIZE // 2 - ci) * GRID_RESOLUTION - GRID_RESOLUTION / 2
        d = math.hypot(x, y)
        sector = _sector_of(int(ci))
        if sector not in nearest or d < nearest[sector]:
            nearest[sector] = d
    parts = [
        f"nearest obstacle {name} at {max(1, round(nearest[name]))} m"
        for name in _SECTOR_NAMES
        if name in nearest
    ]
    return " , ".join(parts)


def trajectory_with_anchor(sample: Sample) -> Trajectory:
    """Future prefixed by the current pose, so step counts equal len(future)."""
    return Trajectory.unchecked((sample.history[-1],) + sample.future.points)


def template_cot(sample: Sample) -> str:
    spans = decompose(trajectory_with_anchor(sample))
    return (
        f"observation : {observation_text(sample.observations[-1])} . "
        f"plan : {plan_text(spans)} ."
    )


def meta_actions(sample: Sample) -> list:
    """Label sequence of the sample's future, e.g. ['S', 'L', 'S']."""
    return [label for label, _, _ in decompose(trajectory_with_anchor(sample))]


def remote_cot(sample: Sample, endpoint: str, timeout: float = 10.0) -> str:
    """Ask an external service for reasoning text; fall back to the template.

    Any transport error, non-200 status, or missing/empty `reasoning` field
    silently degrades to `template_cot`.
    """
    import requests

    payload = {
        "history": [[p.x, p.y] for p in sample.history.points],
        "future": [[p.x, p.y] for p in sample.future.points],
        "actions": meta_actions(sample),
        "obs_b64": [
            base64.b64encode(g.cells.tobytes()).decode("ascii") for g in sample.observations
        ],
    }
    try:
        resp = requests.post(endpoint, json=payload, timeout=timeout)
        resp.raise_for_status()
        reasoning = resp.json().get("reasoning")
        if isinstance(reasoning, str) and reasoning.strip():
            return reasoning
    except (requests.RequestException, ValueError):
        pass
    return template_cot(sample)


def annotate(sample: Sample, provider: str = "template", endpoint=None, timeout: float = 10.0) -> Sample:
    """Attach cot text to one sample; existing annotations are left alone."""
    if sample.cot_text is not None:
        return sample
    if provider == "template":
        text = template_cot(sample)
    elif provider == "remote":
        if not endpoint:
            raise ValueError("remote provider needs an endpoint")
        text = remote_cot(sample, endpoint, timeout=timeout)
    else:
        raise ValueError(f"unknown cot provider: {provider}")
    return replace(sample, cot_text=text)


def annotate_dataset(in_path, out_path, provider: str = "template", endpoint=None, timeout: float = 10.0) -> int:
    """Annotate a dataset file sample by sample; returns how many gained text."""
    from .dataset_io import read_dataset, write_dataset

    samples = read_dataset(in_path)
    out, added = [], 0
    for s in samples:
        t = annotate(s, provider=provider, endpoint=endpoint, timeout=timeout)
        added += t.cot_text is not None and s.cot_text is None
        out.append(t)
    write_dataset(out, out_path)
    return added

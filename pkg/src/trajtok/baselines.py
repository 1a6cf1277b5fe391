"""Comparator predictors: constant velocity and textualized coordinates.

The text baseline serializes every waypoint as fixed-width digit tokens and
trains the decoder on those strings, with the same prompts, history points,
and visual context as the point-token model; only the target serialization
differs. One waypoint costs 14 tokens (two signed 2+2-digit coordinates, a
comma, a semicolon) against a single `<point>` token.
"""

import dataclasses

import numpy as np
import torch

from .generation import GenResult, prefix_of
from .geometry import Trajectory, Waypoint
from .tokens import EOS, TokenStream, assemble, build_vocab, render_prompt

COORD_LIMIT = 99.99  # serialization clamp; two integer digits by construction
TOKENS_PER_WAYPOINT = 14


def baseline_const_velocity(sample, T: int) -> Trajectory:
    """Extrapolate the last history displacement T steps forward."""
    if T < 1:
        raise ValueError("T must be positive")
    h = sample.history.as_array()
    d = h[-1] - h[-2]
    pts = [Waypoint(float(h[-1][0] + k * d[0]), float(h[-1][1] + k * d[1]))
           for k in range(1, T + 1)]
    return Trajectory(pts, dt=sample.history.dt)


def serialize_coord(v: float) -> list:
    """One coordinate as sign, two integer digits, '.', two fraction digits."""
    v = max(-COORD_LIMIT, min(COORD_LIMIT, float(v)))
    cents = int(round(abs(v) * 100))
    sign = "-" if v < 0 and cents > 0 else "+"
    text = f"{cents:04d}"
    return [sign, text[0], text[1], ".", text[2], text[3]]


def serialize_waypoint(p) -> list:
    return serialize_coord(p.x) + [","] + serialize_coord(p.y) + [";"]


def serialize_trajectory(traj: Trajectory) -> list:
    out = []
    for p in traj.points:
        out.extend(serialize_waypoint(p))
    return out


def parse_serialized(tokens) -> tuple:
    """Waypoints back out of a digit-token stream.

    Returns (waypoints, clean): `clean` is False when any chunk deviates from
    the fixed 14-token shape; well-formed chunks before the first bad one are
    still returned for inspection.
    """
    pts = []
    chunk = []
    clean = True
    for t in tokens:
        chunk.append(t)
        if t != ";":
            continue
        if (len(chunk) != TOKENS_PER_WAYPOINT or chunk[6] != ","
                or chunk[3] != "." or chunk[10] != "."):
            return pts, False
        try:
            x = float("".join(chunk[0:3]) + "." + "".join(chunk[4:6]))
            y = float("".join(chunk[7:10]) + "." + "".join(chunk[11:13]))
        except ValueError:
            return pts, False
        pts.append(Waypoint(x, y))
        chunk = []
    if chunk:
        clean = False
    return pts, clean


def text_vocab_from_samples(samples, cap: int = 2048):
    """Shared vocabulary covering prompts, reasoning, and digit serialization."""
    texts = []
    for s in samples:
        texts.append(render_prompt(s.goal, max(len(s.future), 1), "forecast"))
        texts.append(render_prompt(s.goal, max(len(s.future), 1), "cot"))
        if s.cot_text is not None:
            texts.append(s.cot_text)
    # the sole serialization token outside the always-present base set
    texts.append("+")
    return build_vocab(texts, cap=cap)


def text_target_stream(sample, vocab, requested_horizon=None) -> TokenStream:
    """A forecast stream whose future is digit text instead of point tokens."""
    prefix = assemble(sample, vocab, mode="forecast",
                      requested_horizon=requested_horizon, include_targets=False)
    target_tokens = serialize_trajectory(sample.future)
    target_ids = [vocab.id_of(t) for t in target_tokens] + [EOS]
    if vocab.id_of("+") == 1:  # <unk>
        raise ValueError("vocabulary lacks '+'; build it with text_vocab_from_samples")
    ids = np.concatenate([prefix.ids, np.asarray(target_ids, dtype=np.int64)])
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prefix):] = True
    return dataclasses.replace(prefix, ids=ids, loss_mask=mask)


def generate_text(model, sample, vocab, requested_T=None, max_tokens=None) -> GenResult:
    """Greedy rollout of the text baseline; every token is a plain table row."""
    T = int(requested_T) if requested_T is not None else len(sample.future)
    if max_tokens is None:
        max_tokens = TOKENS_PER_WAYPOINT * T + 8
    if max_tokens < TOKENS_PER_WAYPOINT * T + 1:
        raise ValueError(f"max_tokens {max_tokens} cannot fit {T} serialized waypoints")
    prefix = assemble(sample, vocab, mode="forecast", requested_horizon=T,
                      include_targets=False)
    with torch.no_grad():
        emb, _ = model.embed_stream([prefix])
        h, cache = model.forward(emb, use_cache=True)
        h_prev = h[0, -1]
        pos = len(prefix)
        ids = []
        stop_reason = "max_tokens"
        while len(ids) < max_tokens and pos < model.cfg.context:
            tok = int(torch.argmax(model.text_logits(h_prev)))
            ids.append(tok)
            if tok == EOS:
                stop_reason = "eos"
                break
            if len(ids) == max_tokens:
                break
            h_step, cache = model.forward(model.embed_step(tok, pos),
                                          cache=cache, use_cache=True)
            h_prev = h_step[0, -1]
            pos += 1
    body = ids[:-1] if stop_reason == "eos" else ids
    pts, clean = parse_serialized([vocab.token_of(i) for i in body])
    traj = Trajectory.unchecked(pts) if pts else None
    return GenResult(
        waypoints=traj,
        token_ids=tuple(ids),
        emitted_tokens=len(ids),
        requested_T=T,
        compliant=stop_reason == "eos" and clean and len(pts) == T,
        stop_reason=stop_reason,
    )

"""Greedy decoding with waypoint feedback, plus a fixed-length one-pass variant.

Decoding is deterministic: argmax over text logits at every step. When the
chosen token is `<point>` the hidden state that produced it is decoded to an
(x, y) waypoint, and the embedding fed back for that position is the point
encoding of the decoded value rather than the `<point>` table row. The cached
incremental path and the full-recompute path share one loop body so they can
be compared bit-for-bit.
"""

import dataclasses
from typing import Optional

import numpy as np
import torch

from .geometry import (
    COORD_BOUND,
    Trajectory,
    Waypoint,
    l1_metric,
    l2_metric,
    truncate,
)
from .tokens import EOS, PT, TokenStream, assemble


@dataclasses.dataclass(frozen=True)
class GenResult:
    """One decoded rollout. Counts cover generated tokens only, prompt excluded."""

    waypoints: Optional[Trajectory]
    token_ids: tuple
    emitted_tokens: int
    requested_T: int
    compliant: bool
    stop_reason: str

    def __post_init__(self):
        if self.stop_reason not in ("eos", "max_tokens"):
            raise ValueError(f"unknown stop_reason: {self.stop_reason}")
        n = 0 if self.waypoints is None else len(self.waypoints)
        if self.compliant and n != self.requested_T:
            raise ValueError("a compliant result must carry requested_T waypoints")


def prefix_of(stream: TokenStream) -> TokenStream:
    """The prompt portion of a stream, with target positions stripped."""
    p = stream.prefix_length
    keep = stream.point_positions < p
    return dataclasses.replace(
        stream,
        ids=stream.ids[:p],
        loss_mask=np.zeros(p, dtype=bool),
        point_positions=stream.point_positions[keep],
        point_values=stream.point_values[keep],
        point_supervised=stream.point_supervised[keep],
    )


def _clip(v: float) -> float:
    # the point head can wander on untrained weights; keep waypoints constructible
    return float(min(max(v, -COORD_BOUND), COORD_BOUND))


def generate_from_prefix(
    model,
    prefix: TokenStream,
    max_tokens: int,
    use_cache: bool = True,
    trace: Optional[dict] = None,
) -> GenResult:
    """Greedy rollout from an assembled forecast prompt."""
    if prefix.loss_mask.any():
        prefix = prefix_of(prefix)
    T = prefix.requested_horizon
    if max_tokens < T + 3:
        raise ValueError(f"max_tokens {max_tokens} cannot fit {T} waypoints plus framing")
    with torch.no_grad():
        emb, _ = model.embed_stream([prefix])
        if use_cache:
            h, cache = model.forward(emb, use_cache=True)
        else:
            rows = [emb]
            h = model.forward(emb)
        h_prev = h[0, -1]
        pos = len(prefix)
        ids: list = []
        points: list = []
        stop_reason = "max_tokens"
        while len(ids) < max_tokens and pos < model.cfg.context:
            tok = int(torch.argmax(model.text_logits(h_prev)))
            ids.append(tok)
            if tok == EOS:
                stop_reason = "eos"
                break
            if tok == PT:
                xy = model.decode_points(h_prev)
                point = (_clip(float(xy[0])), _clip(float(xy[1])))
                points.append(point)
                step = model.embed_step(PT, pos, point=point)
                if trace is not None:
                    trace.setdefault("point_hiddens", []).append(h_prev.clone())
                    trace.setdefault("injected", []).append(step.clone())
            else:
                step = model.embed_step(tok, pos)
            if len(ids) == max_tokens:
                break
            if use_cache:
                h_step, cache = model.forward(step, cache=cache, use_cache=True)
                h_prev = h_step[0, -1]
            else:
                rows.append(step)
                h_prev = model.forward(torch.cat(rows, dim=1))[0, -1]
            pos += 1
    traj = None
    if points:
        traj = Trajectory.unchecked([Waypoint(x, y) for x, y in points])
    return GenResult(
        waypoints=traj,
        token_ids=tuple(ids),
        emitted_tokens=len(ids),
        requested_T=T,
        compliant=stop_reason == "eos" and len(points) == T,
        stop_reason=stop_reason,
    )


def generate(
    model,
    sample,
    vocab,
    requested_T=None,
    max_tokens=None,
    use_cache: bool = True,
    trace: Optional[dict] = None,
) -> GenResult:
    """Decode a forecast for one sample; the prompt asks for requested_T steps."""
    T = int(requested_T) if requested_T is not None else len(sample.future)
    if max_tokens is None:
        max_tokens = T + 16
    prefix = assemble(sample, vocab, mode="forecast", requested_horizon=T,
                      include_targets=False)
    return generate_from_prefix(model, prefix, max_tokens, use_cache=use_cache,
                                trace=trace)


def generate_batch(model, samples, vocab, requested_T=None, max_tokens=None,
                   use_cache: bool = True):
    """Decode many samples and fold the compliance accounting.

    Returns (results, metrics). `l2` and `l1` average per-sample errors over
    compliant results only and are None when nothing complied; `ieacc` is the
    compliant fraction and `tpr` the mean generated-token count over all runs.
    """
    if not samples:
        raise ValueError("generate_batch needs at least one sample")
    results = [
        generate(model, s, vocab, requested_T=requested_T, max_tokens=max_tokens,
                 use_cache=use_cache)
        for s in samples
    ]
    l2s, l1s = [], []
    for r, s in zip(results, samples):
        if not r.compliant:
            continue
        k = min(len(r.waypoints), len(s.future))
        l2s.append(l2_metric(truncate(r.waypoints, k), truncate(s.future, k)))
        l1s.append(l1_metric(truncate(r.waypoints, k), truncate(s.future, k)))
    metrics = {
        "n": len(results),
        "ieacc": sum(r.compliant for r in results) / len(results),
        "tpr": float(np.mean([r.emitted_tokens for r in results])),
        "l2": float(np.mean(l2s)) if l2s else None,
        "l1": float(np.mean(l1s)) if l1s else None,
    }
    return results, metrics


def replay_stream(prefix: TokenStream, result: GenResult) -> TokenStream:
    """The generated rollout written back as one teacher-forced stream.

    Feeding this through a single forward pass must reproduce the rollout's
    waypoints; any gap would mean the incremental path and the batch path
    disagree about embeddings or position alignment.
    """
    if result.waypoints is None:
        raise ValueError("cannot replay a rollout with no waypoints")
    p = len(prefix)
    ids = np.concatenate([prefix.ids, np.asarray(result.token_ids, dtype=np.int64)])
    gen_pts = [p + i for i, t in enumerate(result.token_ids) if t == PT]
    positions = np.concatenate([prefix.point_positions,
                                np.asarray(gen_pts, dtype=np.int64)])
    values = np.concatenate([prefix.point_values, result.waypoints.as_array()])
    supervised = np.concatenate([prefix.point_supervised,
                                 np.ones(len(gen_pts), dtype=bool)])
    return dataclasses.replace(
        prefix,
        ids=ids,
        loss_mask=np.zeros(len(ids), dtype=bool),
        point_positions=positions,
        point_values=values,
        point_supervised=supervised,
    )


def queries_embedding(model, start: int, count: int) -> torch.Tensor:
    """Learned query rows placed at absolute positions start..start+count-1."""
    if getattr(model, "query_emb", None) is None:
        raise ValueError("model was built without query slots")
    if count != model.cfg.query_slots:
        raise ValueError(
            f"this variant decodes exactly {model.cfg.query_slots} waypoints, not {count}"
        )
    q = model.query_emb + model.pos_emb.weight[start : start + count]
    return q.unsqueeze(0)


def single_pass_decode(model, sample, vocab, T_fixed: int, requested_T=None) -> Trajectory:
    """Decode all waypoints from one forward pass over appended query slots.

    The prompt may ask for any horizon; the output length is pinned to the
    model's query-slot count by construction.
    """
    T_prompt = int(requested_T) if requested_T is not None else len(sample.future)
    prefix = assemble(sample, vocab, mode="forecast", requested_horizon=T_prompt,
                      include_targets=False)
    with torch.no_grad():
        emb, _ = model.embed_stream([prefix])
        q = queries_embedding(model, len(prefix), T_fixed)
        h = model.forward(torch.cat([emb, q], dim=1))
        xy = model.decode_points(h[0, len(prefix):])
    pts = [Waypoint(_clip(float(x)), _clip(float(y))) for x, y in xy.tolist()]
    return Trajectory.unchecked(pts)


def single_pass_losses(model, streams):
    """Query-slot training losses; mirrors batch_losses' (ce, point) shape.

    Each stream's own hidden at query slot k decodes waypoint k directly, so
    there is no shift and no text target; ce is a connected zero to keep the
    training loop's loss identity intact.
    """
    if not streams:
        raise ValueError("single_pass_losses needs at least one stream")
    preds, gts = [], []
    for st in streams:
        gt = st.point_values[st.point_supervised]
        if len(gt) != model.cfg.query_slots:
            raise ValueError(
                f"stream supervises {len(gt)} waypoints, variant expects "
                f"{model.cfg.query_slots}"
            )
        pre = prefix_of(st)
        emb, _ = model.embed_stream([pre])
        q = queries_embedding(model, len(pre), model.cfg.query_slots)
        h = model.forward(torch.cat([emb, q], dim=1))
        preds.append(model.decode_points(h[0, len(pre):]))
        gts.append(torch.from_numpy(gt))
    pred = torch.cat(preds)
    gt = torch.cat(gts)
    pt = (pred - gt).abs().sum(dim=-1).mean()
    return pred.sum() * 0.0, pt

"""Losses, optimizer plumbing, gradient checking, and the stage training loop.

The combined objective is the plain unweighted sum of the text cross-entropy
and the mean L1 waypoint error; stage 1 trains on reasoning-text streams and
stage 2 on forecast streams, each updating only its own parameter group.
"""

import dataclasses
import math
import sys

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_model

LOG_HEADER = "step,stage,lr,ce,point,total"


class NonFiniteGradient(RuntimeError):
    """Backward produced a NaN or infinite gradient; the message names the tensor."""


@dataclasses.dataclass(frozen=True)
class StageConfig:
    """Hyperparameters for one training stage.

    `trainable` overrides the parameter group when a variant (one-pass
    decoder, text-serialization baseline) reuses the loop; by default stage 1
    maps to the "cot" group and stage 2 to "forecast".
    """

    stage: int
    epochs: int
    lr: float
    batch_size: int = 4
    warmup_frac: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    trainable: str = None
    point_jitter: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        # lr == 0 is allowed so a frozen run can serve as a control
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")
        if self.point_jitter < 0:
            raise ValueError("point_jitter must be nonnegative")

    @property
    def trainable_set(self) -> str:
        return self.trainable or ("cot" if self.stage == 1 else "forecast")

    @property
    def stream_mode(self) -> str:
        return "cot" if self.stage == 1 else "forecast"


def stage1_config(**overrides) -> StageConfig:
    base = dict(stage=1, epochs=2, lr=2e-5, batch_size=4)
    base.update(overrides)
    return StageConfig(**base)


def stage2_config(**overrides) -> StageConfig:
    base = dict(stage=2, epochs=10, lr=2e-4, batch_size=4)
    base.update(overrides)
    return StageConfig(**base)


def ce_loss(logits, target_ids, mask) -> torch.Tensor:
    """Mean negative log-likelihood over masked positions.

    An empty mask yields a zero that stays on the graph, so downstream
    backward calls see exactly-zero gradients rather than missing ones.
    """
    flat = logits.reshape(-1, logits.shape[-1])
    m = mask.reshape(-1).to(torch.bool)
    if not bool(m.any()):
        return flat.sum() * 0.0
    return F.cross_entropy(flat[m], target_ids.reshape(-1)[m])


def point_loss(pred, gt) -> torch.Tensor:
    """Mean over waypoints of |dx| + |dy|."""
    if tuple(pred.shape) != tuple(gt.shape):
        raise ValueError(f"waypoint count mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.numel() == 0:
        raise ValueError("point loss needs at least one waypoint")
    return (pred - gt).abs().sum(dim=-1).mean()


def total_loss(ce, pt) -> torch.Tensor:
    """Unweighted sum of the text and waypoint terms."""
    return ce + pt


def batch_losses(model, streams) -> tuple:
    """One teacher-forced pass over a batch of token streams -> (ce, point).

    The hidden state one position before each supervised token predicts it,
    so text targets come from `loss_mask` shifted back by one and waypoint
    targets from the supervised entries of `point_positions`. Streams without
    supervised points (reasoning-text mode, prefix-only) contribute a
    graph-connected zero for the point term.
    """
    if not streams:
        raise ValueError("empty batch")
    emb, ids = model.embed_stream(streams)
    h = model.forward(emb)

    rows, cols = [], []
    for b, st in enumerate(streams):
        pos = np.flatnonzero(st.loss_mask)
        rows.append(np.full(len(pos), b))
        cols.append(pos)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    if len(rows):
        logits = model.text_logits(h[rows, cols - 1])
        targets = ids[rows, cols]
        ce = ce_loss(logits, targets, torch.ones(len(targets), dtype=torch.bool))
    else:
        ce = h.sum() * 0.0

    prows, pcols, vals = [], [], []
    for b, st in enumerate(streams):
        sel = st.point_supervised
        if sel.any():
            pos = st.point_positions[sel]
            prows.append(np.full(len(pos), b))
            pcols.append(pos)
            vals.append(st.point_values[sel])
    if vals:
        pred = model.decode_points(h[np.concatenate(prows), np.concatenate(pcols) - 1])
        pt = point_loss(pred, torch.from_numpy(np.concatenate(vals)))
    else:
        pt = h.sum() * 0.0
    return ce, pt


def cosine_lr(step, total_steps, peak_lr, warmup_frac) -> float:
    """Linear ramp over the warmup steps, then a half cosine hitting zero at
    `total_steps`. Continuous in `step`, which may be fractional."""
    warmup = max(1.0, round(warmup_frac * total_steps))
    s = min(max(float(step), 0.0), float(total_steps))
    if s <= warmup:
        return peak_lr * s / warmup
    if total_steps <= warmup:
        return peak_lr
    t = (s - warmup) / (total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def select_trainable(model, group: str) -> dict:
    """Freeze everything except the named parameter group; returns it by name."""
    named = model.trainable_parameters(group)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in named.values():
        p.requires_grad_(True)
    return named


def make_optimizer(params, cfg: StageConfig) -> torch.optim.AdamW:
    # foreach=False keeps the update order fixed for bit-reproducibility
    return torch.optim.AdamW(
        params,
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def optimizer_moments(opt, named: dict) -> dict:
    """Adam first/second moments keyed by parameter name, for checkpoints."""
    by_param = {id(p): name for name, p in named.items()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p)
            if state:
                name = by_param[id(p)]
                out[f"{name}.m"] = state["exp_avg"].detach()
                out[f"{name}.v"] = state["exp_avg_sq"].detach()
    return out


def _require_finite_grads(named: dict):
    for name, p in named.items():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(f"non-finite gradient in {name}")


def train_stage(model, streams, cfg: StageConfig, csv_path=None, checkpoint_path=None,
                extra: dict = None) -> dict:
    """Run one stage over assembled token streams; the model updates in place.

    Batches follow a seeded per-epoch shuffle, so two single-threaded runs
    from the same initialization produce identical logs. A non-finite loss or
    gradient aborts the stage before the poisoning optimizer step, leaving
    the parameters at their last finite values.
    """
    if not streams:
        raise ValueError("no training streams")
    loss_fn = batch_losses
    if cfg.trainable_set == "single_pass":
        from .generation import single_pass_losses

        loss_fn = single_pass_losses
    named = select_trainable(model, cfg.trainable_set)
    opt = make_optimizer(named.values(), cfg)
    n = len(streams)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * cfg.epochs
    rng = np.random.default_rng(cfg.seed)
    rows = [LOG_HEADER]
    epoch_means = []
    step = 0
    aborted = False
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [streams[j] for j in order[lo : lo + cfg.batch_size]]
            if cfg.point_jitter > 0:
                # zero-mean coordinate noise on point inputs; the L1 optimum
                # stays at the clean value while the rollout grammar learns to
                # tolerate imperfect fed-back waypoints
                batch = [
                    dataclasses.replace(
                        st,
                        point_values=st.point_values
                        + rng.normal(0.0, cfg.point_jitter, st.point_values.shape),
                    )
                    for st in batch
                ]
            step += 1
            # half-step offset keeps the first and last step off the zero ends
            lr = cosine_lr(step - 0.5, total_steps, cfg.lr, cfg.warmup_frac)
            for group in opt.param_groups:
                group["lr"] = lr
            ce, pt = loss_fn(model, batch)
            total = total_loss(ce, pt)
            ce_v, pt_v, total_v = float(ce.detach()), float(pt.detach()), float(total.detach())
            rows.append(f"{step},{cfg.stage},{lr!r},{ce_v!r},{pt_v!r},{total_v!r}")
            if not math.isfinite(total_v):
                aborted = True
                break
            assert total_v == ce_v + pt_v  # the objective is the plain sum
            opt.zero_grad(set_to_none=True)
            total.backward()
            try:
                _require_finite_grads(named)
            except NonFiniteGradient as err:
                print(f"stage {cfg.stage}: {err} at step {step}", file=sys.stderr)
                aborted = True
                break
            opt.step()
            epoch_losses.append(total_v)
        if epoch_losses:
            epoch_means.append(sum(epoch_losses) / len(epoch_losses))
        if aborted:
            print(
                f"stage {cfg.stage}: aborted at step {step}; "
                "keeping the last finite parameters",
                file=sys.stderr,
            )
            break
    if csv_path:
        with open(csv_path, "w") as f:
            f.write("\n".join(rows) + "\n")
    if checkpoint_path:
        meta = dict(extra or {})
        meta.update({"stage": cfg.stage, "aborted": aborted})
        save_model(checkpoint_path, model, step=step, extra=meta,
                   moments=optimizer_moments(opt, named))
    return {
        "steps": step,
        "total_steps": total_steps,
        "aborted": aborted,
        "epoch_means": epoch_means,
        "log_rows": rows,
    }


def teacher_forced_points(model, stream) -> np.ndarray:
    """Decode the supervised waypoints of one stream from a single full pass."""
    sel = stream.point_supervised
    if not sel.any():
        raise ValueError("stream has no supervised waypoints")
    with torch.no_grad():
        emb, _ = model.embed_stream([stream])
        h = model.forward(emb)
        pred = model.decode_points(h[0, stream.point_positions[sel] - 1])
    return pred.numpy()


def directional_gradcheck(model, streams, stage: str, n_directions: int = 5,
                          step_size: float = 1e-4, seed: int = 0) -> float:
    """Worst relative error of <grad, u> against a central difference.

    Randomly samples unit directions u over the stage's trainable group and
    compares the analytic directional derivative of the combined loss with
    (L(theta + h u) - L(theta - h u)) / 2h. Parameters are restored exactly.
    """
    named = select_trainable(model, stage)
    ce, pt = batch_losses(model, streams)
    model.zero_grad(set_to_none=True)
    total_loss(ce, pt).backward()
    grads = {
        n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for n, p in named.items()
    }
    originals = {n: p.detach().clone() for n, p in named.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_directions):
            u = {n: torch.from_numpy(rng.standard_normal(tuple(p.shape))) for n, p in named.items()}
            norm = math.sqrt(sum(float((v * v).sum()) for v in u.values()))
            analytic = sum(float((grads[n] * u[n]).sum()) for n in named) / norm
            endpoints = []
            for sign in (1.0, -1.0):
                for n, p in named.items():
                    p.copy_(originals[n] + (sign * step_size / norm) * u[n])
                ce2, pt2 = batch_losses(model, streams)
                endpoints.append(float(total_loss(ce2, pt2)))
            numeric = (endpoints[0] - endpoints[1]) / (2.0 * step_size)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
        for n, p in named.items():
            p.copy_(originals[n])
    return worst

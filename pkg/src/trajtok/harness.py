"""Experiment harness: datasets through rollouts to report rows and plots.

Reports are plain rows keyed (method, benchmark, horizon). Generation is
greedy and the row order is fixed, so re-running a configuration reproduces
every CSV byte for byte. SVG charts are written by a small deterministic
emitter rather than a plotting library.
"""

import dataclasses
import os
import sys
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from .baselines import baseline_const_velocity, generate_text
from .checkpoint import load_model
from .dataset_io import read_dataset
from .generation import GenResult, generate_batch, single_pass_decode
from .geometry import l1_metric, l2_metric, truncate
from .tokens import Vocabulary

CSV_HEADER = "method,benchmark,horizon,l2,l1,ieacc,tpr,n"
TRUNC_SOURCE_T = 10  # the fixed-length protocol decodes this horizon once


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one eval or ablation run needs, JSON-round-trippable."""

    test_paths: dict
    horizons: tuple = (5, 8, 10)
    checkpoint: Optional[str] = None
    variant_checkpoints: dict = dataclasses.field(default_factory=dict)
    no_cot: bool = True
    single_pass: bool = True
    text_baseline: bool = True
    out_dir: str = "runs"
    seed: int = 0
    train_path: Optional[str] = None

    def __post_init__(self):
        if not self.test_paths:
            raise ValueError("at least one test dataset is required")
        hs = tuple(int(h) for h in self.horizons)
        if not hs or any(h < 1 for h in hs):
            raise ValueError("horizons must be positive")
        if list(hs) != sorted(hs):
            raise ValueError("horizons must be sorted ascending")
        object.__setattr__(self, "horizons", hs)
        object.__setattr__(self, "test_paths", dict(self.test_paths))
        object.__setattr__(self, "variant_checkpoints", dict(self.variant_checkpoints))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        stray = sorted(set(d) - known)
        if stray:
            raise ValueError(f"unknown config keys: {stray}")
        return cls(**d)


@dataclasses.dataclass(frozen=True)
class ReportRow:
    method: str
    benchmark: str
    horizon: int
    l2: Optional[float]
    l1: Optional[float]
    ieacc: Optional[float]
    tpr: Optional[float]
    n: int

    def __post_init__(self):
        for name in ("l2", "l1", "ieacc", "tpr"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"{name} must be finite or None, got {v}")


def load_forecaster(path):
    """A checkpointed model plus the vocabulary stored alongside it."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, step, extra, _ = load_model(path)
    tokens = (extra or {}).get("vocab")
    if not tokens:
        raise ValueError(f"checkpoint {path} carries no vocabulary")
    model.eval()
    return model, Vocabulary(tuple(tokens)), extra


def _pair_errors(pred_traj, gt_traj, horizon: int):
    k = min(horizon, len(pred_traj), len(gt_traj))
    p, g = truncate(pred_traj, k), truncate(gt_traj, k)
    return l2_metric(p, g), l1_metric(p, g)


def rows_from_results(method, benchmark, horizon, results, samples) -> ReportRow:
    """Fold rollout results into one report row; @S metrics cover compliant only."""
    l2s, l1s = [], []
    for r, s in zip(results, samples):
        if not r.compliant or r.waypoints is None:
            continue
        l2, l1 = _pair_errors(r.waypoints, s.future, horizon)
        l2s.append(l2)
        l1s.append(l1)
    return ReportRow(
        method=method,
        benchmark=benchmark,
        horizon=horizon,
        l2=float(np.mean(l2s)) if l2s else None,
        l1=float(np.mean(l1s)) if l1s else None,
        ieacc=sum(r.compliant for r in results) / len(results),
        tpr=float(np.mean([r.emitted_tokens for r in results])),
        n=len(results),
    )


def _oracle_results(samples, horizon: int) -> list:
    out = []
    for s in samples:
        k = min(horizon, len(s.future))
        out.append(GenResult(waypoints=truncate(s.future, k), token_ids=(),
                             emitted_tokens=0, requested_T=k, compliant=True,
                             stop_reason="eos"))
    return out


def _const_velocity_results(samples, horizon: int) -> list:
    return [
        GenResult(waypoints=baseline_const_velocity(s, horizon), token_ids=(),
                  emitted_tokens=0, requested_T=horizon, compliant=True,
                  stop_reason="eos")
        for s in samples
    ]


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def _load_benchmarks(cfg: ExperimentConfig) -> list:
    out = []
    for name in sorted(cfg.test_paths):
        out.append((name, read_dataset(cfg.test_paths[name])))
    return out


def run_eval(cfg: ExperimentConfig, oracle: bool = False) -> list:
    """Tabulate the model, the fixed-length protocol, and the baselines.

    `model` requests each horizon directly; `model_trunc10` decodes once at
    T=10 per benchmark and truncates, covering length-flexible and
    fixed-length readings of the same checkpoint. Missing the main
    checkpoint is an error; the text baseline is skipped with a warning
    when its checkpoint is absent.
    """
    if cfg.checkpoint is None:
        raise FileNotFoundError("eval requires a model checkpoint")
    model, vocab, _ = load_forecaster(cfg.checkpoint)
    benchmarks = _load_benchmarks(cfg)

    text_ckpt = cfg.variant_checkpoints.get("text_baseline")
    text_model = None
    if cfg.text_baseline:
        if text_ckpt and os.path.exists(text_ckpt):
            text_model, text_vocab, _ = load_forecaster(text_ckpt)
        else:
            _warn("text_baseline checkpoint missing; its rows are skipped")

    rows = []
    for bench, samples in benchmarks:
        for h in cfg.horizons:
            results, _m = generate_batch(model, samples, vocab, requested_T=h)
            rows.append(rows_from_results("model", bench, h, results, samples))
        trunc_results, _m = generate_batch(model, samples, vocab,
                                           requested_T=TRUNC_SOURCE_T)
        for h in cfg.horizons:
            if h <= TRUNC_SOURCE_T:
                rows.append(rows_from_results("model_trunc10", bench, h,
                                              trunc_results, samples))
            else:
                rows.append(ReportRow("model_trunc10", bench, h, None, None,
                                      None, None, len(samples)))
        for h in cfg.horizons:
            rows.append(rows_from_results("const_velocity", bench, h,
                                          _const_velocity_results(samples, h),
                                          samples))
        if text_model is not None:
            for h in cfg.horizons:
                results = [generate_text(text_model, s, text_vocab, requested_T=h)
                           for s in samples]
                rows.append(rows_from_results("text_baseline", bench, h,
                                              results, samples))
        if oracle:
            for h in cfg.horizons:
                rows.append(rows_from_results("oracle", bench, h,
                                              _oracle_results(samples, h),
                                              samples))

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_report_csv(rows, os.path.join(cfg.out_dir, "eval.csv"))
    with open(os.path.join(cfg.out_dir, "eval.txt"), "w") as fh:
        fh.write(format_table(rows) + "\n")
    return rows


def run_ablations(cfg: ExperimentConfig) -> tuple:
    """Error-vs-horizon per variant, and autoregressive vs one-pass per split.

    Returns (fig4_rows, fig5_rows) and writes fig4/fig5 CSVs plus SVG line
    charts under the output dir. Variants without a checkpoint are skipped,
    each with a warning.
    """
    benchmarks = _load_benchmarks(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)

    fig4_rows = []
    variants = [("full", cfg.checkpoint)]
    if cfg.no_cot:
        variants.append(("no_cot", cfg.variant_checkpoints.get("no_cot")))
    if cfg.text_baseline:
        variants.append(("text_baseline", cfg.variant_checkpoints.get("text_baseline")))
    for name, path in variants:
        if not path or not os.path.exists(path):
            _warn(f"{name} checkpoint missing; its rows are skipped")
            continue
        vmodel, vvocab, _ = load_forecaster(path)
        for bench, samples in benchmarks:
            for h in cfg.horizons:
                if name == "text_baseline":
                    results = [generate_text(vmodel, s, vvocab, requested_T=h)
                               for s in samples]
                else:
                    results, _m = generate_batch(vmodel, samples, vvocab,
                                                 requested_T=h)
                fig4_rows.append(rows_from_results(name, bench, h, results, samples))

    fig5_rows = []
    sp_path = cfg.variant_checkpoints.get("single_pass")
    if not cfg.single_pass:
        pass
    elif not sp_path or not os.path.exists(sp_path) or not cfg.checkpoint \
            or not os.path.exists(cfg.checkpoint):
        _warn("single_pass comparison needs both the full and the single_pass "
              "checkpoints; its rows are skipped")
    else:
        sp_model, sp_vocab, _ = load_forecaster(sp_path)
        ar_model, ar_vocab, _ = load_forecaster(cfg.checkpoint)
        t_fix = sp_model.cfg.query_slots
        if t_fix < 1:
            raise ValueError("single_pass checkpoint has no query slots")
        for bench, samples in benchmarks:
            ar_results, _m = generate_batch(ar_model, samples, ar_vocab,
                                            requested_T=t_fix)
            fig5_rows.append(rows_from_results("autoregressive", bench, t_fix,
                                               ar_results, samples))
            sp_results = [
                GenResult(waypoints=single_pass_decode(sp_model, s, sp_vocab,
                                                       T_fixed=t_fix),
                          token_ids=(), emitted_tokens=0, requested_T=t_fix,
                          compliant=True, stop_reason="eos")
                for s in samples
            ]
            fig5_rows.append(rows_from_results("single_pass", bench, t_fix,
                                               sp_results, samples))

    write_report_csv(fig4_rows, os.path.join(cfg.out_dir, "fig4.csv"))
    write_report_csv(fig5_rows, os.path.join(cfg.out_dir, "fig5.csv"))
    _fig4_svg(fig4_rows, cfg, os.path.join(cfg.out_dir, "fig4.svg"))
    _fig5_svg(fig5_rows, os.path.join(cfg.out_dir, "fig5.svg"))
    return fig4_rows, fig5_rows


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}"


def row_to_csv(r: ReportRow) -> str:
    return ",".join([r.method, r.benchmark, str(r.horizon), _fmt(r.l2),
                     _fmt(r.l1), _fmt(r.ieacc), _fmt(r.tpr), str(r.n)])


def write_report_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(row_to_csv(r) + "\n")


def format_table(rows) -> str:
    """The CSV content as an aligned text table."""
    header = CSV_HEADER.split(",")
    cells = [header] + [row_to_csv(r).split(",") for r in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(header))]
    lines = []
    for line in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
    return "\n".join(lines)


# -- svg emission ------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_chart_svg(path, title, x_label, y_label, series, x_ticks=None) -> None:
    """A fixed-size line chart; `series` maps name -> [(x, y), ...].

    Output is deterministic: no timestamps, ids, or library versions. Points
    with a None y are dropped from their polyline.
    """
    w, h = 640, 400
    ml, mr, mt, mb = 64, 24, 40, 48
    pts_all = [(x, y) for pts in series.values() for x, y in pts if y is not None]
    xs = [p[0] for p in pts_all] or [0.0, 1.0]
    ys = [p[1] for p in pts_all] or [0.0, 1.0]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = 0.0, max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_hi *= 1.08

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (w - ml - mr)

    def sy(y):
        return h - mb - (y - y_lo) / (y_hi - y_lo) * (h - mt - mb)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2:.1f}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="black"/>',
        f'<text x="{(ml + w - mr) / 2:.1f}" y="{h - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{escape(x_label)}</text>',
        f'<text x="16" y="{(mt + h - mb) / 2:.1f}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif" '
        f'transform="rotate(-90 16 {(mt + h - mb) / 2:.1f})">{escape(y_label)}</text>',
    ]
    ticks = x_ticks if x_ticks is not None else sorted({x for x in xs})
    for tx, label in (ticks if ticks and isinstance(ticks[0], tuple)
                      else [(t, f"{t:g}") for t in ticks]):
        out.append(f'<line x1="{sx(tx):.1f}" y1="{h - mb}" x2="{sx(tx):.1f}" '
                   f'y2="{h - mb + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(tx):.1f}" y="{h - mb + 18}" text-anchor="middle" '
                   f'font-size="11" font-family="sans-serif">{escape(str(label))}</text>')
    for k in range(5):
        ty = y_lo + (y_hi - y_lo) * k / 4
        out.append(f'<line x1="{ml - 5}" y1="{sy(ty):.1f}" x2="{ml}" '
                   f'y2="{sy(ty):.1f}" stroke="black"/>')
        out.append(f'<text x="{ml - 8}" y="{sy(ty) + 4:.1f}" text-anchor="end" '
                   f'font-size="11" font-family="sans-serif">{ty:.2f}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        keep = [(x, y) for x, y in pts if y is not None]
        if keep:
            coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in keep)
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                       'stroke-width="2"/>')
            for x, y in keep:
                out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" '
                           f'fill="{color}"/>')
        ly = mt + 16 * i
        out.append(f'<rect x="{w - mr - 150}" y="{ly - 9}" width="10" height="10" '
                   f'fill="{color}"/>')
        out.append(f'<text x="{w - mr - 136}" y="{ly}" font-size="11" '
                   f'font-family="sans-serif">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def _fig4_svg(rows, cfg: ExperimentConfig, path) -> None:
    benches = sorted({r.benchmark for r in rows}) or ["none"]
    bench = "indoor" if "indoor" in benches else benches[0]
    series = {}
    for r in rows:
        if r.benchmark == bench:
            series.setdefault(r.method, []).append((r.horizon, r.l2))
    for pts in series.values():
        pts.sort()
    line_chart_svg(path, f"L2 vs horizon ({bench})", "horizon (steps)",
                   "L2 (m)", series)


def _fig5_svg(rows, path) -> None:
    benches = sorted({r.benchmark for r in rows})
    series = {}
    for r in rows:
        x = benches.index(r.benchmark)
        series.setdefault(r.method, []).append((x, r.l2))
    for pts in series.values():
        pts.sort()
    ticks = [(i, b) for i, b in enumerate(benches)]
    line_chart_svg(path, "autoregressive vs single-pass", "dataset", "L2 (m)",
                   series, x_ticks=ticks)

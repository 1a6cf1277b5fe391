"""Command-line entry point: dataset, cot, train, generate, eval, ablate.

Every subcommand reads an optional JSON config file and lets flags override
individual keys, so experiment recipes live in version-controlled files while
one-off tweaks stay on the command line. Any error exits nonzero with a
one-line message on stderr.
"""

import argparse
import json
import sys

import torch


def _load_config(path, allowed: set) -> dict:
    with open(path) as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    stray = sorted(set(loaded) - allowed)
    if stray:
        raise ValueError(f"unknown config keys in {path}: {stray}")
    return loaded


def merged(args, defaults: dict) -> dict:
    """Defaults, then the config file, then explicitly passed flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        cfg.update(_load_config(args.config, set(defaults)))
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _require(cfg: dict, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValueError(f"missing required option(s): {', '.join(missing)}")


# -- dataset -----------------------------------------------------------------

DATASET_DEFAULTS = dict(family="indoor", episodes=10, t_min=5, t_max=10,
                        out=None, seed=0)


def cmd_dataset(args) -> int:
    from .dataset_io import write_dataset
    from .simulator import indoor_like, outdoor_like, make_samples, simulate_episode

    cfg = merged(args, DATASET_DEFAULTS)
    _require(cfg, "out")
    families = {"indoor": indoor_like, "outdoor": outdoor_like}
    if cfg["family"] not in families:
        raise ValueError(f"family must be one of {sorted(families)}")
    make_scene = families[cfg["family"]]
    samples = []
    # scene seeds run seed .. seed+episodes-1; keep ranges disjoint across splits
    for e in range(int(cfg["episodes"])):
        scene_seed = int(cfg["seed"]) + e
        ep = simulate_episode(make_scene(scene_seed))
        samples.extend(make_samples(ep, int(cfg["t_min"]), int(cfg["t_max"]),
                                    seed=scene_seed))
    if not samples:
        raise ValueError("no samples produced; episodes may be too short")
    write_dataset(samples, cfg["out"])
    print(f"wrote {len(samples)} samples from {cfg['episodes']} episodes "
          f"to {cfg['out']}")
    return 0


# -- cot ---------------------------------------------------------------------

COT_DEFAULTS = dict(in_path=None, out=None, provider="template", endpoint=None,
                    timeout=10.0, seed=0)


def cmd_cot(args) -> int:
    from .cot import annotate_dataset

    cfg = merged(args, COT_DEFAULTS)
    _require(cfg, "in_path", "out")
    added = annotate_dataset(cfg["in_path"], cfg["out"],
                             provider=cfg["provider"], endpoint=cfg["endpoint"],
                             timeout=float(cfg["timeout"]))
    print(f"annotated {added} samples into {cfg['out']}")
    return 0


# -- train -------------------------------------------------------------------

TRAIN_DEFAULTS = dict(
    data=None, stage=2, out=None, init=None, from_scratch=None, csv=None,
    target="points", trainable=None, model=None,
    epochs=None, lr=None, batch_size=4, warmup_frac=0.01,
    betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, point_jitter=0.0, seed=0,
)
_STAGE_LR = {1: 2e-5, 2: 2e-4}
_STAGE_EPOCHS = {1: 2, 2: 10}


def _build_or_load_model(cfg, samples):
    from .baselines import text_vocab_from_samples
    from .checkpoint import load_model
    from .model import ModelConfig, TinyVLM
    from .tokens import Vocabulary, build_vocab_from_samples

    if cfg["init"] and cfg["from_scratch"]:
        raise ValueError("pass either --init or --from-scratch, not both")
    if cfg["init"]:
        model, _, extra, _ = load_model(cfg["init"])
        tokens = (extra or {}).get("vocab")
        if not tokens:
            raise ValueError(f"checkpoint {cfg['init']} carries no vocabulary")
        return model, Vocabulary(tuple(tokens))
    if not cfg["from_scratch"]:
        raise ValueError("train needs --init CKPT or --from-scratch")
    if cfg["target"] == "text":
        vocab = text_vocab_from_samples(samples)
    else:
        vocab = build_vocab_from_samples(samples)
    overrides = dict(cfg["model"] or {})
    overrides.pop("vocab_size", None)  # sized by the corpus, not the config
    mc = ModelConfig(vocab_size=len(vocab.tokens), **overrides)
    return TinyVLM(mc), vocab


def _build_streams(cfg, samples, vocab, stage_cfg):
    from .baselines import text_target_stream
    from .tokens import assemble

    if cfg["target"] == "text":
        return [text_target_stream(s, vocab) for s in samples]
    if cfg["target"] != "points":
        raise ValueError("target must be 'points' or 'text'")
    mode = stage_cfg.stream_mode
    if mode == "cot":
        missing = sum(s.cot_text is None for s in samples)
        if missing:
            raise ValueError(
                f"{missing} samples lack reasoning text; run the cot "
                "subcommand over the dataset first")
    return [assemble(s, vocab, mode=mode) for s in samples]


def cmd_train(args) -> int:
    from .dataset_io import read_dataset
    from .training import StageConfig, train_stage

    cfg = merged(args, TRAIN_DEFAULTS)
    _require(cfg, "data", "out")
    stage = int(cfg["stage"])
    if cfg["target"] == "text" and cfg["trainable"] is None:
        cfg["trainable"] = "cot"  # text serialization trains the text pathway
    samples = read_dataset(cfg["data"])
    model, vocab = _build_or_load_model(cfg, samples)
    stage_cfg = StageConfig(
        stage=stage,
        epochs=int(cfg["epochs"] if cfg["epochs"] is not None else _STAGE_EPOCHS[stage]),
        lr=float(cfg["lr"] if cfg["lr"] is not None else _STAGE_LR[stage]),
        batch_size=int(cfg["batch_size"]),
        warmup_frac=float(cfg["warmup_frac"]),
        betas=tuple(cfg["betas"]),
        eps=float(cfg["eps"]),
        weight_decay=float(cfg["weight_decay"]),
        seed=int(cfg["seed"]),
        trainable=cfg["trainable"],
        point_jitter=float(cfg["point_jitter"]),
    )
    streams = _build_streams(cfg, samples, vocab, stage_cfg)
    result = train_stage(model, streams, stage_cfg, csv_path=cfg["csv"],
                         checkpoint_path=cfg["out"],
                         extra={"vocab": list(vocab.tokens),
                                "target": cfg["target"]})
    means = result["epoch_means"]
    print(f"stage {stage}: {result['steps']}/{result['total_steps']} steps, "
          f"first epoch {means[0]:.6f}, last epoch {means[-1]:.6f}" if means
          else f"stage {stage}: no finished epochs")
    if result["aborted"]:
        raise RuntimeError("training aborted on a non-finite loss or gradient")
    print(f"saved checkpoint to {cfg['out']}")
    return 0


# -- generate ----------------------------------------------------------------

GENERATE_DEFAULTS = dict(ckpt=None, data=None, out=None, horizon=None,
                         max_tokens=None, seed=0)


def cmd_generate(args) -> int:
    from .dataset_io import read_dataset
    from .generation import generate_batch
    from .harness import load_forecaster

    cfg = merged(args, GENERATE_DEFAULTS)
    _require(cfg, "ckpt", "data", "out")
    model, vocab, _ = load_forecaster(cfg["ckpt"])
    samples = read_dataset(cfg["data"])
    horizon = None if cfg["horizon"] is None else int(cfg["horizon"])
    max_tokens = None if cfg["max_tokens"] is None else int(cfg["max_tokens"])
    results, metrics = generate_batch(model, samples, vocab,
                                      requested_T=horizon,
                                      max_tokens=max_tokens)
    with open(cfg["out"], "w") as fh:
        for s, r in zip(samples, results):
            rec = {
                "sample_id": s.sample_id,
                "requested_T": r.requested_T,
                "compliant": r.compliant,
                "stop_reason": r.stop_reason,
                "emitted_tokens": r.emitted_tokens,
                "waypoints": None if r.waypoints is None
                else [[p.x, p.y] for p in r.waypoints.points],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    parts = [f"{k}={metrics[k]:.6f}" if metrics[k] is not None else f"{k}=n/a"
             for k in ("ieacc", "tpr", "l2", "l1")]
    print(f"decoded {metrics['n']} rollouts to {cfg['out']}; " + " ".join(parts))
    return 0


# -- eval / ablate -----------------------------------------------------------

def _experiment_config(args):
    from .harness import ExperimentConfig

    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    if args.checkpoint is not None:
        d["checkpoint"] = args.checkpoint
    if args.out is not None:
        d["out_dir"] = args.out
    if args.seed is not None:
        d["seed"] = args.seed
    if args.horizons is not None:
        d["horizons"] = [int(h) for h in args.horizons.split(",")]
    for spec in args.data or []:
        name, _, path = spec.partition("=")
        if not name or not path:
            raise ValueError(f"--data expects NAME=PATH, got {spec!r}")
        d.setdefault("test_paths", {})[name] = path
    for spec in args.variant or []:
        name, _, path = spec.partition("=")
        if name not in ("no_cot", "single_pass", "text_baseline") or not path:
            raise ValueError(f"--variant expects no_cot|single_pass|"
                             f"text_baseline=PATH, got {spec!r}")
        d.setdefault("variant_checkpoints", {})[name] = path
    for flag in ("no_cot", "single_pass", "text_baseline"):
        if getattr(args, f"skip_{flag}"):
            d[flag] = False
    return ExperimentConfig.from_dict(d)


def cmd_eval(args) -> int:
    from .harness import format_table, run_eval

    cfg = _experiment_config(args)
    rows = run_eval(cfg)
    print(format_table(rows))
    print(f"wrote eval.csv and eval.txt under {cfg.out_dir}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import run_ablations

    cfg = _experiment_config(args)
    fig4, fig5 = run_ablations(cfg)
    print(f"wrote fig4.csv ({len(fig4)} rows), fig5.csv ({len(fig5)} rows), "
          f"and SVG charts under {cfg.out_dir}")
    return 0


# -- parser ------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", help="JSON config file; flags override its keys")
    sp.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajtok",
                                description="point-token trajectory forecasting")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="simulate scenes into a JSONL dataset")
    _add_common(d)
    d.add_argument("--family", choices=("indoor", "outdoor"))
    d.add_argument("--episodes", type=int)
    d.add_argument("--t-min", dest="t_min", type=int)
    d.add_argument("--t-max", dest="t_max", type=int)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_dataset)

    c = sub.add_parser("cot", help="attach reasoning text to a dataset")
    _add_common(c)
    c.add_argument("--in", dest="in_path")
    c.add_argument("--out")
    c.add_argument("--provider", choices=("template", "remote"))
    c.add_argument("--endpoint")
    c.add_argument("--timeout", type=float)
    c.set_defaults(fn=cmd_cot)

    t = sub.add_parser("train", help="run one training stage")
    _add_common(t)
    t.add_argument("--data")
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--out")
    t.add_argument("--init", help="checkpoint to continue from")
    t.add_argument("--from-scratch", dest="from_scratch", action="store_const",
                   const=True, default=None)
    t.add_argument("--csv", help="write the per-step loss log here")
    t.add_argument("--target", choices=("points", "text"))
    t.add_argument("--trainable",
                   choices=("cot", "forecast", "single_pass", "all"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--warmup-frac", dest="warmup_frac", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--point-jitter", dest="point_jitter", type=float)
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="decode rollouts to a JSONL report")
    _add_common(g)
    g.add_argument("--ckpt")
    g.add_argument("--data")
    g.add_argument("--out")
    g.add_argument("--horizon", type=int)
    g.add_argument("--max-tokens", dest="max_tokens", type=int)
    g.set_defaults(fn=cmd_generate)

    for name, fn, blurb in (("eval", cmd_eval, "tabulate metrics on benchmarks"),
                            ("ablate", cmd_ablate, "emit ablation CSVs and charts")):
        e = sub.add_parser(name, help=blurb)
        _add_common(e)
        e.add_argument("--checkpoint")
        e.add_argument("--out", help="output directory for reports")
        e.add_argument("--horizons", help="comma-separated, ascending")
        e.add_argument("--data", action="append", metavar="NAME=PATH",
                       help="benchmark dataset; repeatable")
        e.add_argument("--variant", action="append", metavar="NAME=PATH",
                       help="variant checkpoint; repeatable")
        e.add_argument("--skip-no-cot", dest="skip_no_cot", action="store_true")
        e.add_argument("--skip-single-pass", dest="skip_single_pass",
                       action="store_true")
        e.add_argument("--skip-text-baseline", dest="skip_text_baseline",
                       action="store_true")
        e.set_defaults(fn=fn)

    return p


def main(argv=None) -> int:
    torch.set_num_threads(1)  # single-threaded keeps every artifact bit-exact
    args = build_parser().parse_args(argv)
    try:
        return int(args.fn(args) or 0)
    except (ValueError, OSError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``bwcp {train,prune,analyze,gradcheck,eval}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import analyze_probabilities, correlation_score
from .config import load_config, parse_override
from .data import load_dataset
from .errors import BWCPError, CheckpointError, DivergenceError
from .experiment import load_any, load_training_checkpoint, model_from_config, reg_config, save_pruned, train
from .export import export_pruned, recount
from .trainer import evaluate, grad_check

log = logging.getLogger("bwcp")

PROB_COLUMNS = ["rank", "channel", "gamma", "beta", "gamma_hat", "beta_hat", "p_bn", "p_bw"]


def _config(args):
    overrides = dict(parse_override(o) for o in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_train(args):
    cfg = _config(args)
    out = args.out or cfg.out_dir
    _, rows = train(cfg, out, resume=args.resume)
    if rows:
        last = rows[-1]
        print(f"trained {cfg.epochs} epochs: test accuracy {float(last[4]):.4f}, "
              f"active channels {float(last[6]):.3f}; outputs in {out}")
    else:
        print(f"wrote initial checkpoint and empty metrics to {out}")
    return 0


def cmd_prune(args):
    model, _, cfg, _, _, _ = load_training_checkpoint(args.checkpoint)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    pruned, report = export_pruned(model, threshold)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    save_pruned(out / "pruned.bwcp", pruned, cfg, report)
    (out / "prune_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    again = recount(pruned)
    print(f"threshold {threshold}: params {report.params_before} -> {report.params_after} "
          f"({report.params_reduction:.2f}% less), FLOPs {report.flops_before} -> "
          f"{report.flops_after} ({report.flops_reduction:.2f}% less)")
    print(f"kept channels {report.channel_fraction_kept:.3f} of the original; "
          f"equivalence residual {report.residual:.3e} ({'ok' if report.verified else 'FAILED'})")
    if again.params_before != report.params_after or again.macs_before != report.macs_after:
        print("recount of the exported network disagrees with the report", file=sys.stderr)
        return 1
    return 0 if report.verified else 1


def _data_for(args, cfg):
    if args.config:
        cfg = load_config(args.config)
    return load_dataset(cfg)


def cmd_analyze(args):
    model, cfg, kind = load_any(args.checkpoint)
    if kind != "bwcp":
        raise CheckpointError("analysis needs an unpruned checkpoint")
    out = Path(args.out or Path(args.checkpoint).parent / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "prob":
        table = analyze_probabilities(model)
        for name, rows in table.items():
            path = out / f"prob_{name}.csv"
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, PROB_COLUMNS, lineterminator="\n")
                w.writeheader()
                w.writerows(rows)
        print(f"wrote {len(table)} probability tables to {out}")
        return 0
    data = _data_for(args, cfg)
    scores = correlation_score(model, data.x_test)
    baseline = None
    if args.baseline:
        bmodel, _, _ = load_any(args.baseline)
        baseline = correlation_score(bmodel, data.x_test)
    path = out / "correlation.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "pre_whitening", "post_whitening"] + (["baseline"] if baseline else []))
        for name, s in scores.items():
            extra = [repr(baseline[name]["post"])] if baseline and name in baseline else ([""] if baseline else [])
            w.writerow([name, repr(s["pre"]), repr(s["post"])] + extra)
    for name, s in scores.items():
        print(f"{name}: pre {s['pre']:.4f} post {s['post']:.4f}")
    return 0


def cmd_gradcheck(args):
    cfg = _config(args)
    rng = np.random.default_rng(cfg.seed)
    model = model_from_config(cfg, rng)
    x = rng.standard_normal((cfg.batch_size,) + cfg.input_shape)
    y = rng.integers(0, cfg.num_classes, cfg.batch_size)
    # perturb the affine parameters away from their symmetric initial values
    for layer in model.bw_layers():
        layer.gamma[:] = rng.uniform(0.5, 1.5, layer.channels) * rng.choice([-1.0, 1.0], layer.channels)
        layer.beta[:] = rng.uniform(-0.5, 0.5, layer.channels)
    report = grad_check(model, (x, y), tolerance=args.tolerance, reg=reg_config(cfg))
    for name, err in report.per_layer().items():
        print(f"{name}: max relative error {err:.3e}")
    for name, idx in report.skipped_kinks.items():
        print(f"{name}: skipped {len(idx)} components at the |gamma| kink")
    print(f"overall {report.max_rel_error:.3e} over {report.checked} components: "
          f"{'PASS' if report.passed else 'FAIL'} (tolerance {report.tolerance:g})")
    return 0 if report.passed else 1


def cmd_eval(args):
    model, cfg, kind = load_any(args.checkpoint)
    data = _data_for(args, cfg)
    if kind == "bwcp" and args.threshold is not None:
        for layer in model.bw_layers():
            layer.threshold = args.threshold
    acc, ce = evaluate(model, data.x_test, data.y_test)
    print(f"{kind} model: test accuracy {acc:.4f}, cross-entropy {ce:.4f} on {len(data.x_test)} samples")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bwcp", description="Batch-whitening channel pruning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="flat JSON experiment file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    t = sub.add_parser("train", help="train a model, writing metrics.csv and checkpoints")
    with_config(t)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: out_dir from the config)")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("prune", help="hard-prune a checkpoint and export the slim network")
    pr.add_argument("checkpoint")
    pr.add_argument("--threshold", type=float)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_prune)

    a = sub.add_parser("analyze", help="activation-probability or correlation CSVs")
    a.add_argument("checkpoint")
    a.add_argument("--mode", choices=("prob", "corr"), default="prob")
    a.add_argument("--config", help="config naming the data to use (default: the checkpoint's)")
    a.add_argument("--baseline", help="BN-baseline checkpoint for a corr comparison column")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference check of the whole backward pass")
    with_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="test accuracy of a full or pruned checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--threshold", type=float)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        for k, v in e.diagnostics.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return 3
    except BWCPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

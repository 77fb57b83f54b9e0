"""Command line interface: ``densedrop <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from densedrop import ablation, plotting
from densedrop.config import ConfigError, describe_keys, load_config, parse_config
from densedrop.data import AugmentPolicy, load_cifar, synthetic_cifar, write_cifar
from densedrop.maskstats import mask_report
from densedrop.models import build_model, count_params, format_plan, load_checkpoint, mask_attachment_plan
from densedrop.train import evaluate, run_experiment

log = logging.getLogger("densedrop")


def _config(args, **overrides):
    extra = {k: v for k, v in overrides.items() if v is not None}
    if args.config is None:
        return parse_config("", extra)
    return load_config(args.config, extra)


def cmd_train(args) -> int:
    cfg = _config(args, **{"run.seed": args.seed, "run.out": args.out})
    res = run_experiment(cfg)
    last = res.records[-1]
    print(f"run={res.out} epochs={last.epoch} train_err={last.train_err:.2f} test_err={last.test_err:.2f}")
    print(f"checkpoint={res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    variant = "c10" if model.config.num_classes == 10 else "c100"
    test = load_cifar(args.data, variant, "test")
    policy = AugmentPolicy(tuple(meta["mean"]), tuple(meta["std"]))
    err, loss = evaluate(model, test, policy)
    print(f"checkpoint={args.checkpoint} images={len(test)} test_err={err:.2f} test_loss={loss:.4f}")
    return 0


def cmd_count_params(args) -> int:
    cfg = _config(args)
    m = cfg.model
    n = count_params(build_model(m))
    print(f"variant={m.variant} depth={m.depth} k={m.growth_rate} classes={m.num_classes} params={n} ({n / 1e6:.2f}M)")
    return 0


def cmd_plan(args) -> int:
    m = _config(args).model
    print(format_plan(m, mask_attachment_plan(m)))
    return 0


def cmd_mask_stats(args) -> int:
    m = _config(args).model
    lines = mask_report(m, args.draws, args.seed)
    print("\n".join(lines))
    return 1 if any(line.endswith("FAIL") for line in lines) else 0


def cmd_ablate(args) -> int:
    base = _config(args, **{"run.out": args.out})
    out = Path(base.out) / args.suite
    rows = ablation.ablation_suite(args.suite, base, out=out, jobs=args.jobs)
    print(ablation.format_table(rows))
    plotting.plot_table([r.label for r in rows], [r.train_err for r in rows], [r.test_err for r in rows],
                        out / "table.png", title=f"{args.suite} suite")
    plotting.plot_curves({r.label + f" ({r.depth})": out / r.slug for r in rows}, out / "curves.png")
    print(f"table={out / 'table.csv'} figure={out / 'table.png'} curves={out / 'curves.png'}")
    return 0


def cmd_plot_data(args) -> int:
    runs = [Path(r) for r in args.run]
    for run in runs:
        csv_path = plotting.write_curve_csv(run, run / "curves.csv")
        fig = plotting.plot_curves({run.name: run}, run / "curves.png")
        print(f"csv={csv_path} figure={fig}")
    if len(runs) > 1 and args.out:
        fig = plotting.plot_curves({r.name: r for r in runs}, args.out)
        print(f"figure={fig}")
    return 0


def cmd_synth(args) -> int:
    train, test = synthetic_cifar(args.seed, args.variant)
    path = write_cifar(args.out, train, test, args.variant)
    print(f"wrote synthetic {args.variant} archives to {path}")
    return 0


def cmd_keys(args) -> int:
    print(describe_keys())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densedrop", description="DenseNet training with pre-dropout, channel-wise masks and survival schedules.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="test error of a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("count-params", help="trainable parameter count of the configured model")
    s.add_argument("--config", type=Path)
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("plan", help="list every mask site the configured model samples")
    s.add_argument("--config", type=Path)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("mask-stats", help="Monte-Carlo survival and independence estimates")
    s.add_argument("--config", type=Path)
    s.add_argument("--draws", type=int, default=100000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_mask_stats)

    s = sub.add_parser("ablate", help="run an ablation suite and tabulate it")
    s.add_argument("--suite", choices=ablation.SUITES, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot-data", help="per-epoch CSV and figure for run directories")
    s.add_argument("--run", action="append", required=True)
    s.add_argument("--out", type=Path, help="combined figure when several runs are given")
    s.set_defaults(func=cmd_plot_data)

    s = sub.add_parser("synth-cifar", help="write class-structured stand-in archives in CIFAR binary format")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--variant", choices=("c10", "c100"), default="c10")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("config-keys", help="list every config key with its default")
    s.set_defaults(func=cmd_keys)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""``cmsoftmax`` command line: train, eval, plot, bounds, gradcheck.

Exit codes: 0 success, 1 usage/config, 2 data/format, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .config import ExperimentConfig, dump_config, load_config
from .errors import CMError, ConfigError, FormatError
from .gradcheck import loss_grad_error
from .losses import ADDITIVE_ANGLE, LOSS_KINDS, LossSpec, lower_bound, upper_bound
from .training import evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cmsoftmax")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.cmnc"
HISTORY_NAME = "loss_history.csv"
FROZEN_CONFIG_NAME = "config.resolved.cfg"


class UsageError(CMError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    level = os.environ.get("CM_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def run_training(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / FROZEN_CONFIG_NAME).write_text(dump_config(cfg))
    dataset = cfg.data.load("train")
    state = train(dataset, cfg.backbone, cfg.loss, cfg.optimizer)
    save_checkpoint(state, out / CHECKPOINT_NAME)
    with open(out / HISTORY_NAME, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for epoch, value in enumerate(state.loss_history, 1):
            w.writerow([epoch, repr(value)])
    log.info("wrote %s", out)
    return out


def _train_one(cfg: ExperimentConfig) -> str:
    _configure_logging()
    return str(run_training(cfg))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.with_out(args.out)
    if not args.seeds:
        run_training(cfg)
        return EXIT_OK
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    runs = [cfg.with_seed(s).with_out(Path(cfg.out) / f"seed_{s}") for s in seeds]
    with ProcessPoolExecutor(max_workers=args.jobs or None) as pool:
        for path in pool.map(_train_one, runs):
            print(path)
    return EXIT_OK


# --------------------------------------------------------------------------
# eval / plot
# --------------------------------------------------------------------------


def run_eval(checkpoint, cfg: ExperimentConfig, out, fraction: float, split: str = "test"):
    state = load_checkpoint(checkpoint)
    dataset = cfg.data.load(split)
    accuracy, records = evaluate(state, dataset)
    partition = analysis.partition_by_norm(records, fraction)
    rows = analysis.subset_report(partition)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_records_csv(records, out / "records.csv")
    analysis.write_report_csv(rows, out / "report.csv")
    return accuracy, rows


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    else:
        frozen = checkpoint.parent / FROZEN_CONFIG_NAME
        if not frozen.exists():
            raise UsageError("eval needs --config (no frozen config next to the checkpoint)")
        cfg = load_config(frozen)
    fraction = args.fraction if args.fraction is not None else cfg.fraction
    out = args.out or checkpoint.parent / "eval"
    _, rows = run_eval(checkpoint, cfg, out, fraction, args.split)
    print("subset,count,accuracy,mean_norm")
    for row in rows:
        print(f"{row.subset},{row.count},{row.accuracy:.6f},{row.mean_norm:.6f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    records = analysis.read_records_csv(args.records)
    analysis.scatter_svg(records, args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# bounds / gradcheck
# --------------------------------------------------------------------------


def cmd_bounds(args) -> int:
    lo = lower_bound(args.p, args.c)
    print(f"s_lower = {lo:.6f}")
    print(f"s_upper = {upper_bound(lo):.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    if min(args.m, args.d, args.c) < 1:
        raise UsageError("sizes must be positive")
    spec = LossSpec(args.loss, s=args.s, p=args.p, gamma=args.gamma, variant=args.variant, m=args.margin)
    worst = loss_grad_error(spec, args.trials, args.m, args.d, args.c, args.seed, args.h)
    ok = worst < args.threshold
    print(f"{spec.kind}: max relative error {worst:.3e} over {args.trials} trials ({'ok' if ok else 'FAIL'} at {args.threshold:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmsoftmax", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seed sweep; runs go to OUT/seed_N")
    p.add_argument("--jobs", type=int, default=0, help="parallel workers for --seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-sample records and good/low/overall report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="dataset config (defaults to the frozen config of the run)")
    p.add_argument("--out")
    p.add_argument("--fraction", type=float)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="scatter plot of 2-D features from a records CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bounds", help="print s_lower and s_upper")
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--c", type=int, default=10)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("gradcheck", help="finite-difference check of a loss")
    p.add_argument("--loss", default="cm_softmax", choices=LOSS_KINDS)
    p.add_argument("--m", type=int, default=8, help="batch size")
    p.add_argument("--d", type=int, default=16, help="feature dimension")
    p.add_argument("--c", type=int, default=5, help="class count")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s", type=float, default=10.0)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--variant", default=ADDITIVE_ANGLE)
    p.add_argument("--margin", type=float, default=0.5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

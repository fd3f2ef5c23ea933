"""``privit`` command line.

Exit codes: 0 success, 2 config error, 3 non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, experiment
from .experiment import ConfigError
from .latency import (NonlinearityCensus, builtin_cost_table, latency_breakdown, load_cost_overrides,
                      read_points_csv, write_pareto_csv)
from .train import NonConvergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_IO = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--teacher", help="teacher checkpoint (.pvit)")
    p.add_argument("--budget-gelu", type=int)
    p.add_argument("--budget-softmax", type=int)
    p.add_argument("--variant", choices=["squared", "scale", "uniform"])
    p.add_argument("--no-kd", action="store_true")
    p.add_argument("--strategy", type=int, choices=[1, 2, 3, 4, 5])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _run_args(sub.add_parser("pretrain", help="train the fully nonlinear teacher"))
    _run_args(sub.add_parser("search", help="switch search, binarize and finetune"))

    p = sub.add_parser("sweep", help="grid of (GELU, softmax) budgets with Pareto output")
    _run_args(p)
    p.add_argument("--grid-gelu", type=_int_list, required=True)
    p.add_argument("--grid-softmax", type=_int_list, required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("ablate-attn", help="compare Taylor attention variants at fixed budgets")
    _run_args(p)
    p.add_argument("--variants", default="squared,scale,uniform")

    p = sub.add_parser("baseline", help="layer-wise GELU removal vs fine-grained search")
    _run_args(p)
    p.add_argument("--layers", type=_int_list, required=True, help="comma-separated k values")

    p = sub.add_parser("report-dist", help="per-layer nonlinearity distribution of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("degrade-stats", help="per-class accuracy degradation a - b")
    p.add_argument("per_class_a")
    p.add_argument("per_class_b")

    p = sub.add_parser("latency", help="census CSV -> ReLUOps")
    p.add_argument("census")
    p.add_argument("--cost-table", help="override CSV with header tag,n,reluops")

    p = sub.add_parser("pareto", help="points CSV -> frontier CSV")
    p.add_argument("input", help="CSV with label,latency_reluops,accuracy")
    p.add_argument("--out", required=True)
    return parser


def _load_run(args) -> experiment.RunConfig:
    cfg = experiment.load_config(
        args.config, strategy=args.strategy, seed=args.seed, out=args.out,
        gelu_budget=args.budget_gelu, softmax_budget=args.budget_softmax,
        variant=args.variant, no_kd=args.no_kd)
    if args.teacher:
        cfg.teacher = args.teacher
    return cfg


def _print_rows(rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    print(",".join(keys))
    for r in rows:
        print(",".join(str(r[k]) for k in keys))


def run(args) -> int:
    cmd = args.command
    if cmd == "pretrain":
        cfg = _load_run(args)
        experiment.cmd_pretrain(cfg)
        print(Path(cfg.out) / "teacher.pvit")
    elif cmd == "search":
        cfg = _load_run(args)
        res = experiment.cmd_search(cfg)
        print(f"gelu {res['gelu_count']}/{cfg.search.gelu_budget}  softmax "
              f"{res['softmax_count']}/{cfg.search.softmax_budget}  latency "
              f"{res['latency_reluops'] / 1e6:.4f}M ReLUOps  test acc {res['test_accuracy']:.4f}")
    elif cmd == "sweep":
        cfg = _load_run(args)
        rows, frontier = experiment.cmd_sweep(cfg, args.grid_gelu, args.grid_softmax,
                                              workers=args.workers)
        print(f"{len(rows)} cells, {len(frontier)} on frontier -> {Path(cfg.out) / 'pareto.csv'}")
    elif cmd == "ablate-attn":
        cfg = _load_run(args)
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        _print_rows(experiment.cmd_ablate_attention(cfg, variants))
    elif cmd == "baseline":
        cfg = _load_run(args)
        _print_rows(experiment.cmd_baseline(cfg, args.layers))
    elif cmd == "report-dist":
        model = checkpoint.load(args.checkpoint)
        rows = experiment.report_distribution(model, args.out)
        if not args.out:
            _print_rows(rows)
    elif cmd == "degrade-stats":
        a = experiment.read_per_class(args.per_class_a)
        b = experiment.read_per_class(args.per_class_b)
        mx, mean, var = experiment.degradation_stats(a, b)
        print("max_diff,mean_diff,variance")
        print(f"{mx!r},{mean!r},{var!r}")
    elif cmd == "latency":
        table = builtin_cost_table()
        if args.cost_table:
            table = table.with_overrides(load_cost_overrides(args.cost_table))
        parts = latency_breakdown(NonlinearityCensus.from_csv(args.census), table)
        print("category,reluops")
        for tag in sorted(parts):
            print(f"{tag},{parts[tag]!r}")
        print(f"total,{sum(parts.values())!r}")
    elif cmd == "pareto":
        frontier = write_pareto_csv(read_points_csv(args.input), args.out)
        print(f"{len(frontier)} points on frontier -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:  # malformed input files, cost-table refusals
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc} (history kept, {len(exc.history)} epochs)", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

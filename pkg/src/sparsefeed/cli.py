"""Command-line entry point: ``run``, ``sweep``, ``validate`` and ``compare``.

Exit codes: 0 success, 1 a validation check failed, 2 configuration error, 3 I/O or data error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .config import ConfigError, fingerprint, parse_config
from .datasets import DataFormatError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "SPARSEFEED_SEED"

log = logging.getLogger("sparsefeed")


class _Abort(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise _Abort(EXIT_IO, f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = replace(cfg, seed=int(env))
        except ValueError:
            raise ConfigError(SEED_ENV, f"expected an integer, got {env!r}") from None
    return cfg


def _announce(cfg, seed, label=""):
    prefix = f"{label}: " if label else ""
    print(f"{prefix}config fingerprint {fingerprint(cfg)} seed {seed}")


def _run_repeats(cfg, out_base, label=""):
    from .reports import repeat_seeds, write_metrics
    from .simulator import run_experiment

    traces = []
    stem, ext = os.path.splitext(out_base)
    for r, seed in enumerate(repeat_seeds(cfg)):
        _announce(cfg, seed, label)
        trace = run_experiment(cfg, seed=seed)
        path = out_base if cfg.repeats == 1 else f"{stem}.rep{r}{ext or '.csv'}"
        write_metrics(trace, path)
        final = trace.final
        print(f"  rounds {final.t}  loss {final.loss:.6g}  |grad|^2 {final.grad_norm_sq:.4g}  "
              f"comm {final.comm_raw_cum} raw / {final.comm_capped_cum} capped  -> {path}")
        traces.append(trace)
    return traces


def cmd_run(args):
    cfg = load_config(args.config)
    _run_repeats(cfg, args.out)
    return EXIT_OK


def cmd_sweep(args):
    from .reports import parse_grid, sweep

    cfg = load_config(args.config)
    try:
        with open(args.grid, encoding="utf-8") as fh:
            grid = parse_grid(fh.read())
    except OSError as exc:
        raise _Abort(EXIT_IO, f"cannot read grid {args.grid}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(args.grid, str(exc)) from None
    _announce(cfg, cfg.seed, "template")
    rows = sweep(cfg, grid, args.out_dir, jobs=args.jobs)
    for row in rows:
        cell = ", ".join(f"{k}={row[k]}" for k in grid)
        print(f"  cell {row['cell']:3d} [{cell}] fingerprint {row['fingerprint']} "
              f"final loss {row['final_loss_mean']:.6g} +- {row['final_loss_std']:.3g}")
    print(f"summary -> {os.path.join(args.out_dir, 'summary.csv')}")
    return EXIT_OK


def cmd_validate(args):
    from .diagnostics import run_suite

    seed = int(os.environ.get(SEED_ENV, args.seed))
    print(f"validate suite {args.suite} seed {seed}")
    results = run_suite(args.suite, seed=seed)
    ok = True
    width = max(len(r.name) for r, _ in results)
    print(f"{'check':<{width}}  {'expect':>6}  {'result':>6}  {'statistic':>11}  {'threshold':>10}")
    for report, expect in results:
        match = report.passed == expect
        ok &= match
        flag = "" if match else "  <-- unexpected"
        print(f"{report.name:<{width}}  {'pass' if expect else 'fail':>6}  {'pass' if report.passed else 'fail':>6}  "
              f"{report.statistic:11.4g}  {report.threshold:10.4g}{flag}")
        if not match:
            print(f"    {report.details}")
    print("all checks behaved as expected" if ok else "validation FAILED")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_compare(args):
    from .plotting import render
    from .reports import emit_plot_data

    os.makedirs(args.emit_plots, exist_ok=True)
    runs = {}
    for path in args.configs:
        cfg = load_config(path)
        label = cfg.method
        if label in runs:
            label = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.emit_plots, f"{label}.csv")
        runs[label] = _run_repeats(cfg, out, label)
    for metric in args.metric:
        paths = emit_plot_data(metric, runs, args.emit_plots)
        png = render(paths, os.path.join(args.emit_plots, f"{metric}.png"), metric)
        print(f"{metric}: " + " ".join(paths.values()) + f" -> {png}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsefeed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration and write its metrics CSV")
    p.add_argument("config")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV path (default: metrics.csv)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of configurations with repeats")
    p.add_argument("config")
    p.add_argument("--grid", required=True, help="file of 'key = v1, v2, ...' lines")
    p.add_argument("--out-dir", default="sweep", help="output directory (default: sweep)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="run the diagnostic checks, negative controls included")
    p.add_argument("--suite", choices=("fast", "full"), default="fast")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compare", help="run several configurations and emit plot data and figures")
    p.add_argument("configs", nargs="+")
    p.add_argument("--emit-plots", required=True, metavar="DIR")
    p.add_argument("--metric", action="append", default=None,
                   help="metric to plot (repeatable; default: loss and grad_norm_sq)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "metric", "unset") is None:
        args.metric = ["loss", "grad_norm_sq"]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except _Abort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Serialization of traces: metrics CSV, sweeps over hyperparameter grids, plot-data files."""
from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import fingerprint, with_overrides

METRIC_COLUMNS = ("iter", "loss", "grad_norm_sq", "mem_norm_sq", "comm_raw_cum", "comm_capped_cum")
_RECORD_FIELDS = ("t", "loss", "grad_norm_sq", "mem_norm_sq", "comm_raw_cum", "comm_capped_cum")


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_metrics(trace, path) -> None:
    """One CSV row per logged record; floats carry 17 significant digits.

    Extra per-record metrics (e.g. accuracy) follow the fixed columns, sorted by name.
    """
    extras = sorted(trace.records[0].extras) if trace.records else []
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(METRIC_COLUMNS + tuple(extras)) + "\n")
        for r in trace.records:
            cells = [_num(getattr(r, f)) for f in _RECORD_FIELDS]
            cells += [_num(r.extras[k]) for k in extras]
            fh.write(",".join(cells) + "\n")


def read_metrics(path):
    """Inverse of :func:`write_metrics`: ``{column: array}``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def parse_grid(text: str) -> dict:
    """Grid file: one ``key = v1, v2, ...`` line per swept key."""
    grid = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"grid line {lineno}: expected key = v1, v2, ...")
        key, values = (s.strip() for s in line.split("=", 1))
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not grid[key]:
            raise ValueError(f"grid line {lineno}: no values for {key!r}")
    return grid


def grid_cells(template, grid: dict):
    """Cross product of the grid applied to the template, in row-major key order."""
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, values))
        yield overrides, with_overrides(template, overrides)


def repeat_seeds(cfg):
    """Seeds of the ``repeats`` runs of one cell: base seed, base seed + 1, ..."""
    return [cfg.seed + r for r in range(cfg.repeats)]


def _run_cell(args):
    from .simulator import run_experiment

    cfg, seed, path = args
    trace = run_experiment(cfg, seed=seed)
    write_metrics(trace, path)
    return trace.final.loss


def sample_std(values) -> float:
    """Sample standard deviation (n - 1 denominator); 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def sweep(template, grid: dict, out_dir, jobs=1):
    """Run every grid cell ``template.repeats`` times; write per-run metrics and ``summary.csv``.

    Returns the summary rows as dicts. ``jobs > 1`` runs cells in worker processes;
    outputs do not depend on ``jobs``.
    """
    os.makedirs(out_dir, exist_ok=True)
    cells = list(grid_cells(template, grid))
    tasks, owners = [], []
    for c, (overrides, cfg) in enumerate(cells):
        for r, seed in enumerate(repeat_seeds(cfg)):
            tasks.append((cfg, seed, os.path.join(out_dir, f"cell{c:03d}_rep{r}.csv")))
            owners.append(c)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            finals = list(pool.map(_run_cell, tasks))
    else:
        finals = [_run_cell(t) for t in tasks]
    rows = []
    keys = list(grid)
    for c, (overrides, cfg) in enumerate(cells):
        losses = [f for f, o in zip(finals, owners) if o == c]
        rows.append({
            "cell": c, **{k: overrides[k] for k in keys}, "repeats": len(losses),
            "final_loss_mean": float(np.mean(losses)), "final_loss_std": sample_std(losses),
            "fingerprint": fingerprint(cfg),
        })
    header = ["cell", *keys, "repeats", "final_loss_mean", "final_loss_std", "fingerprint"]
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_num(row[h]) if isinstance(row[h], float) else str(row[h]) for h in header) + "\n")
    return rows


def _series(trace, metric):
    x = np.array([r.t for r in trace.records], dtype=np.float64)
    if metric in ("loss", "grad_norm_sq", "mem_norm_sq", "comm_raw_cum", "comm_capped_cum"):
        y = np.array([getattr(r, metric) for r in trace.records], dtype=np.float64)
    else:
        try:
            y = np.array([r.extras[metric] for r in trace.records], dtype=np.float64)
        except KeyError:
            raise KeyError(f"metric {metric!r} not recorded") from None
    return x, y


def aggregate_runs(metric, traces):
    """(x, mean, std) over repeats, all runs resampled onto the coarsest logging grid.

    The coarsest grid is the one with the fewest records; runs that logged at
    other rounds are linearly interpolated onto it.
    """
    series = [_series(t, metric) for t in traces]
    grid = min((s[0] for s in series), key=len)
    ys = np.array([y if len(x) == len(grid) and np.array_equal(x, grid) else np.interp(grid, x, y)
                   for x, y in series])
    std = np.std(ys, axis=0, ddof=1) if len(ys) > 1 else np.zeros(len(grid))
    return grid, ys.mean(axis=0), std


def emit_plot_data(metric, runs: dict, out_dir) -> dict:
    """One whitespace-delimited ``x mean std`` file per series (``runs``: name -> list of traces).

    Returns ``{name: path}``.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, traces in runs.items():
        x, mean, std = aggregate_runs(metric, traces)
        path = os.path.join(out_dir, f"{name}.{metric}.dat")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# {name} {metric}: iteration mean std over {len(traces)} run(s)\n")
            for xi, m, s in zip(x, mean, std):
                fh.write(f"{int(xi)} {_num(m)} {_num(s)}\n")
        paths[name] = path
    return paths


def read_plot_data(path):
    """Inverse of one :func:`emit_plot_data` file: arrays (x, mean, std)."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]

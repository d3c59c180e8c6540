"""PNG rendering of plot-data files (non-interactive Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .reports import read_plot_data  # noqa: E402


def render(paths: dict, out_png, metric, logy=True):
    """Mean curve with a one-std band for each series in ``{label: dat_path}``."""
    series = {label: read_plot_data(path) for label, path in paths.items()}
    # a log axis needs strictly positive means
    logy = logy and all((s[1] > 0).all() for s in series.values())
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (x, mean, std) in series.items():
        (line,) = ax.plot(x, mean, label=label, lw=1.5)
        lo = mean - std
        if logy:
            lo = lo.clip(min=mean * 1e-3)
        ax.fill_between(x, lo, mean + std, color=line.get_color(), alpha=0.2, lw=0)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png

"""Report figures (PNG, headless backend)."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_LABELS = {
    "rel_y0": "relative error on Y0",
    "rel_z0": "relative error on Z0",
    "int_y": "integral error on Y",
    "int_z": "integral error on Z",
    "final_test_loss": "final test loss",
}


def _numeric(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def plot_report(results, summary_rows, out_dir):
    """Metric-vs-axis panels with 5-95% bands, plus test-loss curves."""
    from .harness import METRICS

    paths = []
    if summary_rows:
        axis = summary_rows[0][0] or "run"
        xs = [_numeric(r[1]) for r in summary_rows]
        categorical = any(x is None for x in xs) or not summary_rows[0][0]
        xpos = list(range(len(summary_rows))) if categorical else xs
        fig, axes = plt.subplots(1, len(METRICS), figsize=(3.2 * len(METRICS), 3.0))
        for k, (m, ax) in enumerate(zip(METRICS, axes)):
            mean = [r[3 + 3 * k] for r in summary_rows]
            lo = [r[4 + 3 * k] for r in summary_rows]
            hi = [r[5 + 3 * k] for r in summary_rows]
            ax.plot(xpos, mean, "o-", lw=1.2)
            ax.fill_between(xpos, lo, hi, alpha=0.25)
            if all(v is not None and v > 0 and not math.isnan(v) for v in mean):
                ax.set_yscale("log")
            ax.set_title(_LABELS[m], fontsize=9)
            ax.set_xlabel(axis)
            if categorical:
                ax.set_xticks(xpos)
                ax.set_xticklabels([str(r[1]) for r in summary_rows], fontsize=7)
        fig.tight_layout()
        p = os.path.join(out_dir, "summary.png")
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)
    curves = [r for r in results if r.history]
    if curves:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for r in curves:
            it = [h[0] for h in r.history]
            test = [h[2] for h in r.history]
            lab = f"{r.axis}={r.axis_value} #{r.run_index}" if r.axis else f"#{r.run_index}"
            ax.plot(it, test, lw=0.9, label=lab)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("test loss")
        if len(curves) <= 12:
            ax.legend(fontsize=6)
        fig.tight_layout()
        p = os.path.join(out_dir, "test_loss.png")
        fig.savefig(p, dpi=110)
        plt.close(fig)
        paths.append(p)
    return paths

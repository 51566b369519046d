"""Learning-curve figures: an SVG line chart plus the tab-separated table behind it."""

from __future__ import annotations

import csv
import io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "lines.markersize": 3,
    "svg.hashsalt": "milab",
    "svg.fonttype": "path",
}

METRICS = {"inst_auc": "instance AUC", "inst_max_f1": "instance max F1", "bag_auc": "bag AUC"}


def read_curves(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k in ("round", "epoch"):
                r[k] = int(v)
            elif k != "split":
                r[k] = float(v) if v != "" else float("nan")
    return rows


def curve_table(runs, split="train", metrics=tuple(METRICS)):
    """Long table: run, metric, epoch, value (rows with a missing value are dropped)."""
    out = []
    for label, rows in runs:
        for metric in metrics:
            for r in rows:
                if r["split"] == split and not math.isnan(r[metric]):
                    out.append((label, metric, r["epoch"], r[metric]))
    return out


def table_tsv(table):
    buf = io.StringIO()
    buf.write("run\tmetric\tepoch\tvalue\n")
    for label, metric, epoch, value in table:
        buf.write(f"{label}\t{metric}\t{epoch}\t{value!r}\n")
    return buf.getvalue()


def plot_curves(runs, svg_path, tsv_path, split="train", metrics=tuple(METRICS)):
    """One polyline per (run, metric) against finetuning epoch; y fixed to [0, 1]."""
    table = curve_table(runs, split, metrics)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for label, _ in runs:
            for metric in metrics:
                pts = [(e, v) for lab, m, e, v in table if lab == label and m == metric]
                if not pts:
                    continue
                xs, ys = zip(*pts)
                name = METRICS.get(metric, metric)
                ax.plot(xs, ys, marker="o", label=name if len(runs) == 1 else f"{label}: {name}")
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("finetuning epoch")
        ax.set_ylabel(f"{split} split")
        ax.grid(alpha=0.3)
        ax.legend(frameon=False, fontsize=7)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    with open(tsv_path, "w") as fh:
        fh.write(table_tsv(table))
    return table

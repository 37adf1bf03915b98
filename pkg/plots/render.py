#!/usr/bin/env python3
"""Render figures from simulator CSV output.

Reads the experiment runner's ``metrics.csv``/``to_root.csv``/``sweep.csv``
files and produces the standard comparison figures.  Pure consumer of the
CSV contract: no simulation logic lives here.

Usage::

    python plots/render.py --kind KIND --in CSV [CSV ...] --out IMAGE

Kinds:
    timeseries  max/avg global error over time (metrics.csv, one per run)
    density     probability density of max local and global error, log-x
    bars        mean and standard-deviation error bars per run
    hops        error-to-root vs hop distance with std bars (to_root.csv)
    compare     grid-style comparison, log-y error over time (metrics.csv)
    sweep       error/cost tradeoff over synchronization period (sweep.csv)

Rendering is deterministic: fixed figure geometry, no timestamps in the
image metadata.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (8.0, 4.8)
DPI = 120
STEADY_SKIP_S = 600.0


class RenderError(Exception):
    pass


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise RenderError(f"{path}: no data rows")
    return rows


def column(rows, name, path):
    if name not in rows[0]:
        raise RenderError(f"{path}: missing column {name!r}")
    return [float(r[name]) for r in rows]


def run_label(path):
    parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return parent or os.path.basename(path)


def steady(times, values):
    duration = times[-1] if times else 0.0
    start = min(STEADY_SKIP_S, duration / 2.0)
    kept = [v for t, v in zip(times, values) if t >= start]
    if not kept:
        raise RenderError("empty steady-state window")
    return kept


def new_axes():
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.grid(True, alpha=0.3)
    return fig, ax


def render_timeseries(paths, ax):
    for path in paths:
        rows = read_csv(path)
        t = column(rows, "time_s", path)
        g = column(rows, "global_max_us", path)
        ax.plot(t, g, linewidth=1.0, label=run_label(path))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("max global error (us)")
    ax.set_title("Global synchronization error over time")
    ax.legend()


def render_density(paths, ax):
    for path in paths:
        rows = read_csv(path)
        t = column(rows, "time_s", path)
        vals = steady(t, column(rows, "global_max_us", path))
        lo = max(min(vals), 0.1)
        hi = max(vals) + 1.0
        bins = [lo * (hi / lo) ** (k / 40.0) for k in range(41)]
        ax.hist(vals, bins=bins, density=True, histtype="step",
                label=run_label(path))
    ax.set_xscale("log")
    ax.set_xlabel("max global error (us, log scale)")
    ax.set_ylabel("probability density")
    ax.set_title("Density of max global synchronization error")
    ax.legend()


def render_bars(paths, ax):
    labels, means, stds = [], [], []
    for path in paths:
        rows = read_csv(path)
        t = column(rows, "time_s", path)
        for col, suffix in (("local_max_us", "local"), ("global_max_us", "global")):
            vals = steady(t, column(rows, col, path))
            n = len(vals)
            mean = sum(vals) / n
            var = sum((v - mean) ** 2 for v in vals) / (n - 1) if n > 1 else 0.0
            labels.append(f"{run_label(path)}\n{suffix}")
            means.append(mean)
            stds.append(math.sqrt(var))
    xs = range(len(labels))
    ax.bar(xs, means, yerr=stds, capsize=4, color="#6699cc", edgecolor="black")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("error (us)")
    ax.set_title("Mean and standard deviation of max errors")


def render_hops(paths, ax):
    for path in paths:
        rows = read_csv(path)
        hops = column(rows, "hop", path)
        mean = column(rows, "mean_max_to_root_us", path)
        std = column(rows, "std_us", path)
        ax.errorbar(hops, mean, yerr=std, marker="o", markersize=3,
                    capsize=3, linewidth=1.0, label=run_label(path))
    ax.set_xlabel("hop distance from reference")
    ax.set_ylabel("time-averaged max error to reference (us)")
    ax.set_title("By-hop error accumulation (bars: std over time)")
    ax.legend()


def render_compare(paths, ax):
    for path in paths:
        rows = read_csv(path)
        t = column(rows, "time_s", path)
        g = column(rows, "global_max_us", path)
        ax.plot(t, [max(v, 0.1) for v in g], linewidth=1.0, label=run_label(path))
    ax.set_yscale("log")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("max global error (us, log scale)")
    ax.set_title("Protocol comparison")
    ax.legend()


def render_sweep(paths, ax):
    for path in paths:
        rows = read_csv(path)
        by_proto: dict[str, list] = {}
        for r in rows:
            if "protocol" not in r or "period_s" not in r:
                raise RenderError(f"{path}: missing column 'protocol'/'period_s'")
            by_proto.setdefault(r["protocol"], []).append(r)
        for proto, entries in sorted(by_proto.items()):
            entries.sort(key=lambda r: float(r["period_s"]))
            periods = [float(r["period_s"]) for r in entries]
            means = [float(r["mean_max_global_us"]) for r in entries]
            stds = [float(r["std_us"]) for r in entries]
            ax.errorbar(periods, means, yerr=stds, marker="s", markersize=4,
                        capsize=3, linewidth=1.0, label=proto)
    ax.set_xlabel("synchronization period (s)")
    ax.set_ylabel("mean max global error (us)")
    ax.set_title("Accuracy vs synchronization period")
    ax.legend()


KINDS = {
    "timeseries": render_timeseries,
    "density": render_density,
    "bars": render_bars,
    "hops": render_hops,
    "compare": render_compare,
    "sweep": render_sweep,
}


def render(kind, paths, out):
    try:
        renderer = KINDS[kind]
    except KeyError:
        raise RenderError(
            f"unknown kind {kind!r} (choose from {', '.join(sorted(KINDS))})"
        ) from None
    for path in paths:
        if not os.path.exists(path):
            raise RenderError(f"input not found: {path}")
    fig, ax = new_axes()
    try:
        renderer(paths, ax)
        fig.tight_layout()
        fig.savefig(out, dpi=DPI, metadata={"Software": None})
    finally:
        plt.close(fig)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", required=True, choices=sorted(KINDS))
    parser.add_argument("--in", dest="inputs", required=True, nargs="+",
                        metavar="CSV")
    parser.add_argument("--out", required=True, metavar="IMAGE")
    args = parser.parse_args(argv)
    try:
        render(args.kind, args.inputs, args.out)
    except RenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

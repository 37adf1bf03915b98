"""Experiment runner CLI.

Subcommands::

    sim run <config> [--seed S] [--out DIR] [--force] [--set sect.key=val ...]
    sim sweep <config> [--out DIR] [--force] [--jobs N]
    sim compare <dir> <dir> [...]
    sim presets

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.
``SIM_OUT`` sets the default output root (default ``./sim_out``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from floodsync.channel import PRESETS
from floodsync.config import ConfigError, ExperimentConfig, load_config
from floodsync.engine import (
    MetricsRecord,
    SimResult,
    Simulation,
    convergence_time,
    steady_records,
)

Z95 = 1.96  # normal-approximation 95% confidence interval


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # config/usage problems exit 1, not argparse's 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# running experiments
# ---------------------------------------------------------------------------


def simulate(cfg: ExperimentConfig) -> SimResult:
    topo = cfg.topology.build()
    sim = Simulation(
        topology=topo,
        protocol_name=cfg.protocol,
        proto_cfg=cfg.proto,
        delay_profile=cfg.delay,
        duration_s=cfg.duration_s,
        seed=cfg.seed,
        probe_interval_s=cfg.probe_interval_s,
        drift_ppm_range=(cfg.drift.ppm_min, cfg.drift.ppm_max),
        initial_offset_max_us=cfg.drift.offset_max_us,
        node_drift_ppm=cfg.drift.node_ppm,
        node_offset_us=cfg.drift.node_offset_us,
        wander_ppm_per_min=cfg.drift.wander_ppm_per_min,
        wander_bound_ppm=cfg.drift.wander_bound_ppm,
        granularity_us=cfg.granularity_us,
        faults=cfg.faults,
        collect_trace=cfg.trace,
    )
    return sim.run()


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def write_metrics_csv(path: str, records: list[MetricsRecord], n: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ["time_s"] + [f"node_{i}" for i in range(n)] + [
            "local_max_us", "local_avg_us", "global_max_us", "global_avg_us",
        ]
        fh.write(",".join(cols) + "\n")
        for r in records:
            vals = ["" if v is None else str(int(v)) for v in r.values]
            fh.write(
                ",".join(
                    [_fmt(r.t_s), *vals, _fmt(r.local_max), _fmt(r.local_avg),
                     _fmt(r.global_max), _fmt(r.global_avg)]
                )
                + "\n"
            )


def write_to_root_csv(
    path: str, records: list[MetricsRecord], hops: dict[int, int],
    steady_skip_s: float, duration_s: float,
) -> None:
    window = steady_records(records, steady_skip_s, duration_s)
    by_hop: dict[int, list[float]] = {}
    for r in window:
        per_hop: dict[int, float] = {}
        for node, err in enumerate(r.to_root):
            if err is None:
                continue
            h = hops[node]
            per_hop[h] = max(per_hop.get(h, 0.0), err)
        for h, worst in per_hop.items():
            by_hop.setdefault(h, []).append(worst)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("hop,mean_max_to_root_us,std_us\n")
        for h in sorted(by_hop):
            arr = np.asarray(by_hop[h])
            std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
            fh.write(f"{h},{_fmt(float(arr.mean()))},{_fmt(std)}\n")


def _stats(samples: list[float]) -> tuple[float, float, float, float]:
    arr = np.asarray(samples, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    half = Z95 * std / math.sqrt(arr.size) if arr.size > 0 else 0.0
    return mean, std, mean - half, mean + half


def write_summary(
    path: str, cfg: ExperimentConfig, result: SimResult,
) -> dict:
    records = result.records
    window = steady_records(records, cfg.steady_skip_s, cfg.duration_s)
    if not window:
        window = records
    lmean, lstd, llo, lhi = _stats([r.local_max for r in window])
    gmean, gstd, glo, ghi = _stats([r.global_max for r in window])
    conv_s, conv_rounds = convergence_time(records, cfg.proto.t_b_s, cfg.duration_s)
    total = sum(result.broadcasts.values())
    hours = cfg.duration_s / 3600.0
    per_node_hour = total / result.topology.n / hours if hours > 0 else 0.0
    lines = {
        "protocol": cfg.protocol,
        "topology": f"{cfg.topology.describe()} root={cfg.topology.root}",
        "t_b_s": _fmt(cfg.proto.t_b_s),
        "duration_s": _fmt(cfg.duration_s),
        "seed": str(cfg.seed),
        "probes": str(len(records)),
        "steady_window_start_s": _fmt(min(cfg.steady_skip_s, cfg.duration_s / 2.0)),
        "steady_probes": str(len(window)),
        "max_local_mean_us": _fmt(lmean),
        "max_local_std_us": _fmt(lstd),
        "max_local_ci95_lo_us": _fmt(llo),
        "max_local_ci95_hi_us": _fmt(lhi),
        "max_global_mean_us": _fmt(gmean),
        "max_global_std_us": _fmt(gstd),
        "max_global_ci95_lo_us": _fmt(glo),
        "max_global_ci95_hi_us": _fmt(ghi),
        "convergence_time_s": _fmt(conv_s) if conv_s is not None else "did not converge",
        "convergence_rounds": str(conv_rounds) if conv_rounds is not None else "did not converge",
        "broadcasts_total": str(total),
        "broadcasts_per_node_per_hour": _fmt(per_node_hour),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in lines.items():
            fh.write(f"{key}: {value}\n")
    return lines


def run_experiment(cfg: ExperimentConfig, outdir: str, force: bool = False) -> dict:
    """Run one experiment and write its output files. Returns summary dict."""
    if os.path.exists(outdir) and os.listdir(outdir) and not force:
        raise ConfigError(
            f"output directory {outdir} exists and is not empty (use --force)"
        )
    os.makedirs(outdir, exist_ok=True)
    result = simulate(cfg)
    n = result.topology.n
    write_metrics_csv(os.path.join(outdir, "metrics.csv"), result.records, n)
    write_to_root_csv(
        os.path.join(outdir, "to_root.csv"),
        result.records,
        result.topology.hops,
        cfg.steady_skip_s,
        cfg.duration_s,
    )
    summary = write_summary(os.path.join(outdir, "summary.txt"), cfg, result)
    with open(os.path.join(outdir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.trace is not None:
        with open(os.path.join(outdir, "trace.log"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.trace) + "\n")
    return summary


def _out_root(explicit: str | None) -> str:
    if explicit:
        return explicit
    return os.environ.get("SIM_OUT", "sim_out")


def _run_sweep_entry(args) -> tuple[str, dict]:
    cfg, outdir = args
    summary = run_experiment(cfg, outdir, force=True)
    return outdir, summary


def run_sweep(cfg: ExperimentConfig, outroot: str, force: bool, jobs: int) -> list[dict]:
    periods = cfg.sweep_t_b_s or [cfg.proto.t_b_s]
    protocols = cfg.sweep_protocols or [cfg.protocol]
    entries = []
    for proto in protocols:
        for t_b in periods:
            sub = dataclasses.replace(cfg)
            sub.protocol = proto
            sub.proto = dataclasses.replace(cfg.proto, t_b_s=t_b)
            sub.sweep_t_b_s = []
            sub.sweep_protocols = []
            sub.validate()
            outdir = os.path.join(outroot, f"{proto}_tb{t_b:g}")
            entries.append((sub, outdir))
    if os.path.exists(outroot) and os.listdir(outroot) and not force:
        raise ConfigError(
            f"output directory {outroot} exists and is not empty (use --force)"
        )
    os.makedirs(outroot, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_sweep_entry, entries))
    else:
        results = [_run_sweep_entry(e) for e in entries]
    rows = []
    for (sub, outdir), (_, summary) in zip(entries, results):
        rows.append(
            {
                "protocol": sub.protocol,
                "period_s": sub.proto.t_b_s,
                "mean_max_global_us": summary["max_global_mean_us"],
                "std_us": summary["max_global_std_us"],
                "broadcasts_per_node_per_hour": summary["broadcasts_per_node_per_hour"],
            }
        )
    with open(os.path.join(outroot, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("protocol,period_s,mean_max_global_us,std_us,broadcasts_per_node_per_hour\n")
        for row in rows:
            fh.write(
                f"{row['protocol']},{row['period_s']:g},{row['mean_max_global_us']},"
                f"{row['std_us']},{row['broadcasts_per_node_per_hour']}\n"
            )
    return rows


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _read_summary(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if ":" in line:
                key, value = line.split(":", 1)
                out[key.strip()] = value.strip()
    return out


def compare_runs(dirs: list[str]) -> str:
    if len(dirs) < 2:
        raise UsageError("compare needs at least two run directories")
    rows = []
    shape = None
    for d in dirs:
        summary_path = os.path.join(d, "summary.txt")
        if not os.path.exists(summary_path):
            raise ConfigError(f"{d}: missing summary.txt (not a completed run?)")
        s = _read_summary(summary_path)
        key = (s.get("topology"), s.get("duration_s"))
        if shape is None:
            shape = key
        elif key != shape:
            raise ConfigError(
                f"{d}: topology/duration {key} does not match {shape}; "
                "compare needs runs of the same experiment"
            )
        rows.append(
            (
                os.path.basename(os.path.normpath(d)),
                s.get("protocol", "?"),
                float(s["max_global_mean_us"]),
                float(s["max_global_std_us"]),
                s["max_global_ci95_lo_us"],
                s["max_global_ci95_hi_us"],
                s.get("convergence_rounds", "?"),
                s.get("broadcasts_per_node_per_hour", "?"),
            )
        )
    rows.sort(key=lambda r: r[2])
    header = (
        f"{'run':<24} {'protocol':<12} {'mean_us':>10} {'std_us':>10} "
        f"{'ci95_lo':>10} {'ci95_hi':>10} {'conv_rounds':>12} {'bc/node/h':>10}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r[0]:<24} {r[1]:<12} {r[2]:>10.3f} {r[3]:>10.3f} "
            f"{r[4]:>10} {r[5]:>10} {r[6]:>12} {r[7]:>10}"
        )
    return "\n".join(lines)


def format_presets() -> str:
    lines = [
        f"{'preset':<10} {'d_fixed_us':>10} {'sigma2_us2':>10} {'p_unc':>8} "
        f"{'unc_min_us':>10} {'unc_max_us':>10}"
    ]
    for name, p in PRESETS.items():
        lines.append(
            f"{name:<10} {p.d_fixed:>10.3f} {p.d_sigma2:>10.4f} {p.p_unc:>8.4f} "
            f"{p.unc_min:>10.1f} {p.unc_max:>10.1f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="SECT.KEY=VAL", help="override a config value")

    p_sweep = sub.add_parser("sweep", help="run the sweep defined in a config file")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--force", action="store_true")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--set", dest="sets", action="append", default=[],
                         metavar="SECT.KEY=VAL")

    p_cmp = sub.add_parser("compare", help="tabulate completed runs side by side")
    p_cmp.add_argument("dirs", nargs="+")

    sub.add_parser("presets", help="print the delay model presets")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            overrides = list(args.sets)
            if args.seed is not None:
                overrides.append(f"experiment.seed={args.seed}")
            cfg = load_config(args.config, overrides)
            stem = os.path.splitext(os.path.basename(args.config))[0]
            outdir = args.out or cfg.out or os.path.join(_out_root(None), stem)
            summary = run_experiment(cfg, outdir, force=args.force)
            print(f"wrote {outdir}")
            print(
                f"max_global_mean_us={summary['max_global_mean_us']} "
                f"convergence_rounds={summary['convergence_rounds']}"
            )
        elif args.command == "sweep":
            cfg = load_config(args.config, list(args.sets))
            stem = os.path.splitext(os.path.basename(args.config))[0]
            outroot = args.out or cfg.out or os.path.join(_out_root(None), stem)
            rows = run_sweep(cfg, outroot, force=args.force, jobs=args.jobs)
            print(f"wrote {outroot} ({len(rows)} runs)")
        elif args.command == "compare":
            print(compare_runs(args.dirs))
        elif args.command == "presets":
            print(format_presets())
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

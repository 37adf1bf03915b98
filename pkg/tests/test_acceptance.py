"""Acceptance suite: one test per criterion, pass/fail printed per line.

The simulator reproduces delay-model-predicted structure and protocol
ordering at desk scale, not the hardware testbed's exact microsecond
values.  Statistical criteria run at pinned seeds: runs are deterministic,
so each assertion is exact and reproducible.
"""

import math
import os
import time

import numpy as np
import pytest

from floodsync.channel import preset, sample_delay_array
from floodsync.clock import NodeClock
from floodsync.cli import main
from floodsync.engine import (
    FaultEvent,
    Simulation,
    analytic_error,
    build_topology,
    convergence_time,
)
from floodsync.estimators import (
    ObservationWindow,
    RegressionTable,
    linreg_fit,
    mle_offset_increment,
    mle_skew,
)
from floodsync.protocols import ProtocolConfig

LINE24 = build_topology("line", n=25)
GRID = build_topology("grid", width=5, height=5)
SIGMA = 0.0049**0.5
D_FIXED = 3.322


def report(criterion, ok, detail):
    print(f"{criterion} {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


def run(topo, proto, duration, seed, *, p_unc=None, wander=0.0, faults=None,
        cfg=None):
    profile = preset("equal") if p_unc is None else preset("equal", p_unc=p_unc)
    sim = Simulation(
        topology=topo,
        protocol_name=proto,
        proto_cfg=cfg or ProtocolConfig(),
        delay_profile=profile,
        duration_s=duration,
        seed=seed,
        wander_ppm_per_min=wander,
        faults=faults,
    )
    return sim, sim.run()


def steady_mean_gmax(records, skip):
    return float(np.mean([r.global_max for r in records if r.t_s >= skip]))


def to_root_profile(records, n, skip):
    window = [r for r in records if r.t_s >= skip]
    return np.array([[r.to_root[i] for i in range(n)] for r in window]).mean(axis=0)


def test_a1_ftsp_per_hop_accumulation():
    # line-24, equal preset with p_unc = 0: steady mean max global error
    # within +-25% of 24 * d_fixed; wall-clock under two minutes
    t0 = time.time()
    _, res = run(LINE24, "ftsp", 7200.0, seed=1, p_unc=0.0)
    elapsed = time.time() - t0
    mean = steady_mean_gmax(res.records, 3600.0)
    target = 24 * D_FIXED
    ok = abs(mean - target) <= 0.25 * target and elapsed < 120.0
    report("A1", ok, f"mean={mean:.2f} us vs 24*D_fixed={target:.1f} "
                     f"(+-25%), runtime={elapsed:.1f} s")


def test_a2_protocol_ordering_full_preset():
    # full equal preset (p_unc = 0.1175): strict ordering
    # RMTS < {PulsePISync ~ PulseSync} < FCSA < FTSP on mean max global
    means = {}
    for proto in ("rmts", "pulsesync", "pulsepisync", "fcsa", "ftsp"):
        _, res = run(LINE24, proto, 14400.0, seed=2, wander=0.5)
        means[proto] = steady_mean_gmax(res.records, 3600.0)
    ok = (
        means["rmts"] < means["pulsepisync"]
        and means["rmts"] < means["pulsesync"]
        and means["pulsepisync"] < means["fcsa"]
        and means["pulsesync"] < means["fcsa"]
        and means["fcsa"] < means["ftsp"]
    )
    detail = " ".join(f"{p}={means[p]:.1f}" for p in
                      ("rmts", "pulsepisync", "pulsesync", "fcsa", "ftsp"))
    report("A2", ok, f"mean max global error (us): {detail}")


def test_a3_convergence_rounds():
    windows = {"rmts": (0, 3), "pulsesync": (8, 12), "ftsp": (10, 30)}
    durations = {"rmts": 1800.0, "pulsesync": 1800.0, "ftsp": 7200.0}
    got = {}
    ok = True
    for proto, (lo, hi) in windows.items():
        _, res = run(LINE24, proto, durations[proto], seed=10, p_unc=0.0)
        rounds = convergence_time(res.records, 30.0, durations[proto])[1]
        got[proto] = rounds
        ok = ok and rounds is not None and lo <= rounds <= hi
    report("A3", ok, f"convergence rounds: rmts={got['rmts']} (<=3), "
                     f"pulsesync={got['pulsesync']} (8-12), ftsp={got['ftsp']} (10-30)")


def test_a4_min_filter_contamination():
    # fraction of min-filtered offset estimates contaminated by an
    # uncertain delay equals p_unc^N within 3 binomial SD
    rng = np.random.default_rng(404)
    n_est, n = 200_000, 5
    profile = preset("equal")
    delays = sample_delay_array(profile, rng, n_est * n).reshape(n_est, n)
    err = delays.min(axis=1) - 3.0
    frac = float((np.abs(err) > 10 * SIGMA).mean())
    p_expect = profile.p_unc**n
    sd = (p_expect * (1 - p_expect) / n_est) ** 0.5
    ok = abs(frac - p_expect) <= 3 * sd
    report("A4", ok, f"contaminated fraction={frac:.2e} vs p^5={p_expect:.2e} "
                     f"(3 SD = {3*sd:.2e}, {n_est} estimates)")


def test_a5_fault_injection():
    # one forced 900 us uncertain delay on the 8th hop of the line
    fault = [FaultEvent(t_s=1800.0, action="force_unc", sender=7, receiver=8,
                        magnitude_us=900.0, count=1)]
    results = {}
    for proto in ("pulsesync", "rmts"):
        _, res = run(LINE24, proto, 3600.0, seed=1, p_unc=0.0, faults=fault)
        pre = [r.global_max for r in res.records if 600.0 <= r.t_s < 1800.0]
        during = [r for r in res.records if 1800.0 <= r.t_s <= 1890.0]
        results[proto] = (float(np.median(pre)), during)
    med_ps, during_ps = results["pulsesync"]
    # every node at hops >= 9 off by > 100 us for at least one round
    poisoned = [r for r in during_ps
                if all(r.to_root[h] > 100.0 for h in range(9, 25))]
    ps_ok = len(poisoned) >= 3  # one 30 s round at 10 s probes
    med_rm, during_rm = results["rmts"]
    worst_rm = max(r.global_max for r in during_rm)
    rm_ok = worst_rm <= 2.0 * med_rm
    report("A5", ps_ok and rm_ok,
           f"pulsesync: {len(poisoned)} probes with hops>=9 over 100 us; "
           f"rmts worst={worst_rm:.1f} us vs 2x steady median={2*med_rm:.1f} us")


def test_a6_estimator_oracles():
    # (i) closed-form offset increment equals grid-search likelihood arg-max
    rng = np.random.default_rng(606)
    step = 1e-4
    grid_ok = True
    for _ in range(100):
        m = int(rng.integers(1, 6))
        p = rng.normal(0.0, 3.0, m)
        est = mle_offset_increment([(0.0, 0.0)] * m, [(v, 0.0) for v in p])
        grid = np.arange(p.min() - 0.5, p.max() + 0.5, step)
        loglik = -((p[None, :] - grid[:, None]) ** 2).sum(axis=1)
        best = grid[int(np.argmax(loglik))]
        grid_ok = grid_ok and abs(est - best) <= step / 2 + 1e-9

    # (ii) skew MLE recovers a 40 ppm rate difference to < 2e-8 in >= 95%
    # of trials, through quantized clocks and Gaussian delays
    rng = np.random.default_rng(424)
    t_b_ns, gap_ns, n = 30 * 10**9, 20 * 10**6, 5
    hits = 0
    trials = 1000
    for _ in range(trials):
        local = NodeClock(node_id=0, drift_ppm=0.0)
        remote = NodeClock(node_id=1, drift_ppm=40.0)
        t0 = int(rng.integers(0, 10**9))
        win = []
        for base in (t0, t0 + t_b_ns):
            pairs = []
            for k in range(n):
                t_send = base + k * gap_ns
                d_ns = round((D_FIXED + rng.normal(0, SIGMA)) * 1000)
                pairs.append((local.hardware_read(t_send + d_ns),
                              remote.hardware_read(t_send)))
            win.append(pairs)
        est = mle_skew(ObservationWindow(old_pairs=win[0], new_pairs=win[1]))
        if est.valid and abs(est.phi - 1.0000400) < 2e-8:
            hits += 1
    skew_ok = hits >= 0.95 * trials

    # (iii) OLS slope variance against the closed-form oracle, within 10%
    rng = np.random.default_rng(321)
    n_pts, dx, sigma = 8, 30e6, 0.07
    slopes = []
    for _ in range(4000):
        table = RegressionTable()
        for k in range(n_pts):
            table.add(k * dx, k * dx + rng.normal(0, sigma))
        slopes.append(linreg_fit(table)[0])
    var_expect = sigma**2 * 12 / (n_pts * (n_pts**2 - 1) * dx**2)
    ols_ok = abs(np.var(slopes) / var_expect - 1.0) <= 0.10

    report("A6", grid_ok and skew_ok and ols_ok,
           f"grid-search match={grid_ok}, skew 40ppm hits={hits}/1000 (>=950), "
           f"OLS var ratio={np.var(slopes)/var_expect:.3f} (within 10%)")


def test_a7_error_to_root_slope():
    # full preset, 8 h: time-averaged error to root monotone in hop for
    # RMTS/PulseSync/FTSP; RMTS's hop-24 value < 60% of PulseSync's
    profiles = {}
    for proto in ("rmts", "pulsesync", "ftsp"):
        _, res = run(LINE24, proto, 28800.0, seed=2)
        profiles[proto] = to_root_profile(res.records, 25, 3600.0)
    violations = {
        p: sum(1 for i in range(24) if prof[i + 1] < prof[i])
        for p, prof in profiles.items()
    }
    ratio = profiles["rmts"][24] / profiles["pulsesync"][24]
    ok = all(v == 0 for v in violations.values()) and ratio < 0.60
    report("A7", ok, f"monotonicity violations={violations}, "
                     f"rmts@24/pulsesync@24={ratio:.4f} (< 0.6)")


def test_a8_grid_experiment():
    means = {}
    for proto in ("rmts", "pulsesync", "fcsa"):
        _, res = run(GRID, proto, 14400.0, seed=1, wander=0.5)
        means[proto] = steady_mean_gmax(res.records, 3600.0)
    ok = means["rmts"] < means["pulsesync"] < means["fcsa"]
    report("A8", ok, "grid mean max global (us): "
           + " ".join(f"{p}={means[p]:.1f}" for p in ("rmts", "pulsesync", "fcsa")))


def test_a9_period_sweep_and_cost():
    periods = [30.0, 150.0, 300.0, 500.0]
    mono_ok = True
    detail = []
    for proto in ("rmts", "pulsesync", "pulsepisync", "fcsa", "ftsp"):
        means = []
        for t_b in periods:
            cfg = ProtocolConfig(t_b_s=t_b)
            _, res = run(LINE24, proto, 28800.0, seed=1, p_unc=0.0,
                         wander=0.5, cfg=cfg)
            skip = max(3600.0, 35 * t_b)
            means.append(steady_mean_gmax(res.records, skip))
        grows = all(a < b for a, b in zip(means, means[1:]))
        mono_ok = mono_ok and grows
        detail.append(f"{proto}:{'+' if grows else 'x'}")

    # communication cost accounting over one simulated hour
    sim_r, _ = run(LINE24, "rmts", 3600.0, seed=1, p_unc=0.0,
                   cfg=ProtocolConfig(t_b_s=360.0))
    rmts_per_node = [sim_r.broadcasts[i] for i in range(25)]
    sim_p, _ = run(LINE24, "pulsesync", 3600.0, seed=1, p_unc=0.0)
    ps_per_node = [sim_p.broadcasts[i] for i in range(25)]
    cost_ok = all(b == 50 for b in rmts_per_node) and all(
        b == 120 for b in ps_per_node
    )
    report("A9", mono_ok and cost_ok,
           f"monotone-in-period: {' '.join(detail)}; "
           f"rmts@360s={rmts_per_node[0]}/node/h (=5x10), "
           f"pulsesync@30s={ps_per_node[0]}/node/h (=120)")


def test_a10_root_election():
    t_kill, t_b = 600.0, 30.0
    fault = [FaultEvent(t_s=t_kill, action="kill", node=0)]
    sim, res = run(LINE24, "rmts", 3600.0, seed=1, p_unc=0.0, faults=fault)
    pre_median = float(np.median(
        [r.global_max for r in res.records if 300.0 <= r.t_s < t_kill]
    ))
    elect = [r.t_s for r in res.records if r.t_s > t_kill and r.n_roots == 1]
    elected_ok = bool(elect) and elect[0] <= t_kill + 7 * t_b
    # no split brain persists beyond one round after the first new flood
    after = [r for r in res.records if elect and r.t_s >= elect[0] + t_b]
    unique_ok = all(r.n_roots == 1 for r in after)
    # re-converged sync within 7 rounds of the kill
    tail = [r.global_max for r in res.records if r.t_s >= t_kill + 7 * t_b]
    resync_ok = max(tail) <= 2.0 * pre_median
    new_roots = [i for i in range(1, 25)
                 if sim.alive[i] and sim.protocols[i].is_root]
    ok = elected_ok and unique_ok and resync_ok and len(new_roots) == 1
    report("A10", ok,
           f"new root={new_roots} at t={elect[0] if elect else None:.0f} s "
           f"(kill+{(elect[0]-t_kill)/t_b:.0f} rounds), split-brain-free={unique_ok}, "
           f"post-election worst={max(tail):.1f} us vs 2x pre median={2*pre_median:.1f}")


def test_a11_determinism(tmp_path):
    cfg_text = """
[experiment]
protocol = rmts
duration_s = 600
seed = 7
trace = true

[topology]
kind = grid
width = 3
height = 3

[delay]
preset = equal

[drift]
wander_ppm_per_min = 0.2
"""
    cfg_path = tmp_path / "det.ini"
    cfg_path.write_text(cfg_text, encoding="utf-8")
    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(["run", str(cfg_path), "--out", out1]) == 0
    assert main(["run", str(cfg_path), "--out", out2]) == 0
    identical = True
    for name in ("metrics.csv", "to_root.csv", "summary.txt", "trace.log"):
        a = open(os.path.join(out1, name), "rb").read()
        b = open(os.path.join(out2, name), "rb").read()
        identical = identical and a == b
    report("A11", identical, "same config + seed twice: byte-identical outputs")

"""Deterministic discrete-event simulation core.

Single-threaded event loop over a (time, insertion-sequence) ordered heap;
identical configuration and seed replay the exact same event sequence.  The
engine owns all node clocks, the broadcast channel, probe-based measurement
and fault injection; protocol handlers interact with it only through the
:class:`NodeApi` surface.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from floodsync import rng as rngmod
from floodsync.channel import Channel, DelayProfile, ForcedUnc
from floodsync.clock import NodeClock, SimTime
from floodsync.protocols import (
    NodeApi,
    Protocol,
    ProtocolConfig,
    SyncMessage,
    make_protocol,
)


class TopologyError(ValueError):
    pass


@dataclass
class Topology:
    """Connected communication graph with a designated reference node."""

    kind: str
    n: int
    adjacency: dict[int, list[int]]
    root: int
    hops: dict[int, int] = field(init=False)
    edges: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        if self.root not in self.adjacency:
            raise TopologyError(f"root {self.root} not in topology")
        self.hops = self._bfs(self.root)
        if len(self.hops) != self.n:
            raise TopologyError("topology is not connected")
        self.edges = sorted(
            (u, v) for u, nbrs in self.adjacency.items() for v in nbrs if u < v
        )

    def _bfs(self, start: int) -> dict[int, int]:
        dist = {start: 0}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in self.adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    @property
    def diameter_from_root(self) -> int:
        return max(self.hops.values())


def build_topology(kind: str, root: int = 0, **params) -> Topology:
    """Construct a named topology with deterministic node numbering.

    Kinds: ``line`` (n), ``ring`` (n), ``grid`` (width, height, row-major
    numbering, default root at the upper-left corner), ``tree`` (arity,
    depth), ``edgelist`` (path to a whitespace ``u v`` pair file).
    """
    adj: dict[int, list[int]] = {}

    def link(u, v):
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)

    if kind == "line":
        n = int(params["n"])
        if n < 2:
            raise TopologyError("line needs at least 2 nodes")
        for i in range(n - 1):
            link(i, i + 1)
    elif kind == "ring":
        n = int(params["n"])
        if n < 3:
            raise TopologyError("ring needs at least 3 nodes (2 would be a multi-edge)")
        for i in range(n):
            link(i, (i + 1) % n)
    elif kind == "grid":
        w, h = int(params["width"]), int(params["height"])
        if w < 1 or h < 1 or w * h < 2:
            raise TopologyError("grid needs at least 2 nodes")
        n = w * h
        for r in range(h):
            for c in range(w):
                i = r * w + c
                if c + 1 < w:
                    link(i, i + 1)
                if r + 1 < h:
                    link(i, i + w)
    elif kind == "tree":
        arity, depth = int(params["arity"]), int(params["depth"])
        if arity < 1 or depth < 1:
            raise TopologyError("tree needs arity >= 1 and depth >= 1")
        n = sum(arity**d for d in range(depth + 1))
        next_id = 1
        frontier = [0]
        for _ in range(depth):
            new_frontier = []
            for parent in frontier:
                for _ in range(arity):
                    link(parent, next_id)
                    new_frontier.append(next_id)
                    next_id += 1
            frontier = new_frontier
    elif kind == "edgelist":
        path = params["path"]
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                u, v = (int(tok) for tok in line.split())
                if u == v:
                    raise TopologyError(f"self-loop {u}-{v} in edge list")
                if v not in adj.get(u, ()):
                    link(u, v)
        if not adj:
            raise TopologyError("empty edge list")
        n = len(adj)
        ids = sorted(adj)
        if ids != list(range(n)):
            raise TopologyError("edge-list node ids must be 0..n-1")
    else:
        raise TopologyError(f"unknown topology kind {kind!r}")

    for u in adj:
        adj[u] = sorted(set(adj[u]))
    return Topology(kind=kind, n=n, adjacency=adj, root=root)


# ---------------------------------------------------------------------------
# events and metrics
# ---------------------------------------------------------------------------

K_TIMER = 0
K_ARRIVAL = 1
K_FAULT = 2
K_WANDER = 3
K_PROBE = 4


@dataclass
class MetricsRecord:
    """Per-probe snapshot: clock readings and derived error metrics (us)."""

    t_s: float
    values: list  # logical reading per node, None while dead
    local_max: float
    local_avg: float
    global_max: float
    global_avg: float
    to_root: list  # |L_i - L_ref| per node, None while dead
    n_roots: int
    broadcasts_total: int


@dataclass
class FaultEvent:
    t_s: float
    action: str  # kill | revive | force_unc
    node: int = -1
    sender: int = -1
    receiver: int = -1
    magnitude_us: float = 0.0
    count: int = 1


@dataclass
class SimResult:
    records: list[MetricsRecord]
    broadcasts: dict[int, int]
    topology: Topology
    trace: list[str] | None


def _mean_pairwise_abs(sorted_vals: np.ndarray) -> float:
    """Mean |x_i - x_j| over all pairs of an ascending array."""
    n = sorted_vals.size
    if n < 2:
        return 0.0
    idx = np.arange(n)
    total = float(np.sum((2 * idx - n + 1) * sorted_vals))
    return total / (n * (n - 1) / 2)


class _EngineApi(NodeApi):
    """Per-node handler surface bound to the engine."""

    __slots__ = ("_sim", "node_id", "now")

    def __init__(self, sim: "Simulation", node_id: int):
        self._sim = sim
        self.node_id = node_id
        self.now = 0

    def hw(self) -> int:
        return self._sim.clocks[self.node_id].hardware_read(self.now)

    def logical(self) -> int:
        return self._sim.clocks[self.node_id].logical_read(self.now)

    def compensate(self, theta_us: float, phi: float) -> None:
        self._sim.clocks[self.node_id].compensate(theta_us, phi, self.now)

    def anchor_to_ideal(self) -> None:
        self._sim.clocks[self.node_id].anchor_logical_to(self.now / 1000.0, self.now)

    def send(self, msg: SyncMessage) -> None:
        self._sim._send(self.node_id, msg, self.now)

    def set_timer(self, delay_ns: int, tag: str, data=None) -> None:
        self._sim._schedule(self.now + delay_ns, K_TIMER, self.node_id, (tag, data))

    def uniform(self, lo: float, hi: float) -> float:
        return float(self._sim.node_streams[self.node_id].uniform(lo, hi))

    def trace(self, text: str) -> None:
        if self._sim.trace is not None:
            self._sim.trace.append(f"{self.now} node={self.node_id} {text}")


class Simulation:
    """One deterministic run of a protocol over a topology."""

    def __init__(
        self,
        topology: Topology,
        protocol_name: str,
        proto_cfg: ProtocolConfig,
        delay_profile: DelayProfile,
        duration_s: float,
        seed: int,
        probe_interval_s: float = 10.0,
        drift_ppm_range: tuple[float, float] = (-40.0, 40.0),
        initial_offset_max_us: int = 100_000,
        node_drift_ppm: dict[int, float] | None = None,
        node_offset_us: dict[int, int] | None = None,
        wander_ppm_per_min: float = 0.0,
        wander_bound_ppm: float = 2.0,
        granularity_us: int = 1,
        faults: list[FaultEvent] | None = None,
        collect_trace: bool = False,
    ):
        self.topology = topology
        self.protocol_name = protocol_name
        self.proto_cfg = proto_cfg
        self.duration_ns = round(duration_s * 1e9)
        self.seed = seed
        self.trace: list[str] | None = [] if collect_trace else None

        self.channel = Channel(topology.adjacency, delay_profile, seed)
        self.clocks: dict[int, NodeClock] = {}
        self.protocols: dict[int, Protocol] = {}
        self.apis: dict[int, _EngineApi] = {}
        self.alive: dict[int, bool] = {}
        self.broadcasts: dict[int, int] = {}
        self.node_streams = {
            i: rngmod.node_rng(seed, rngmod.HOLDOFF, i) for i in range(topology.n)
        }
        self._wander_rngs = {}
        self._wander_sigma = wander_ppm_per_min
        self._wander_bound = wander_bound_ppm
        self._base_drift: dict[int, float] = {}

        node_drift_ppm = node_drift_ppm or {}
        node_offset_us = node_offset_us or {}
        for i in range(topology.n):
            if i in node_drift_ppm:
                drift = float(node_drift_ppm[i])
            else:
                lo, hi = drift_ppm_range
                drift = float(rngmod.node_rng(seed, rngmod.DRIFT, i).uniform(lo, hi))
            if i in node_offset_us:
                offset = int(node_offset_us[i])
            else:
                m = initial_offset_max_us
                offset = int(
                    rngmod.node_rng(seed, rngmod.OFFSET, i).integers(-m, m + 1)
                ) if m > 0 else 0
            self._base_drift[i] = drift
            self.clocks[i] = NodeClock(
                node_id=i,
                drift_ppm=drift,
                initial_offset_us=offset,
                granularity_us=granularity_us,
            )
            self.protocols[i] = make_protocol(
                protocol_name, i, proto_cfg, is_root=(i == topology.root)
            )
            self.apis[i] = _EngineApi(self, i)
            self.alive[i] = True
            self.broadcasts[i] = 0

        self._queue: list = []
        self._seq = 0
        self.records: list[MetricsRecord] = []

        # probes first so the t=0 probe observes the pristine boot state
        t = 0
        step = round(probe_interval_s * 1e9)
        self._probe_step = max(step, 1)
        while t <= self.duration_ns:
            self._schedule(t, K_PROBE, -1, None)
            if step == 0:
                break
            t += step

        for f in faults or []:
            self._schedule(round(f.t_s * 1e9), K_FAULT, -1, f)

        if wander_ppm_per_min > 0:
            for i in range(topology.n):
                self._wander_rngs[i] = rngmod.node_rng(seed, rngmod.WANDER, i)
                self._schedule(60_000_000_000, K_WANDER, i, None)

        for i in range(topology.n):
            api = self.apis[i]
            api.now = 0
            self.protocols[i].on_boot(api)

    # -- scheduling ------------------------------------------------------

    def _schedule(self, t: SimTime, kind: int, node: int, data) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, kind, node, data))

    def _send(self, sender: int, msg: SyncMessage, now: SimTime) -> None:
        self.broadcasts[sender] += 1
        if self.trace is not None:
            self.trace.append(
                f"{now} node={sender} send round={msg.round_id} seq={msg.seq} "
                f"h={msg.h_stamp} l={msg.l_stamp}"
            )
        for recv, t_arr, delay_us in self.channel.deliver_broadcast(
            sender, msg.round_id, msg.seq, now
        ):
            self._schedule(t_arr, K_ARRIVAL, recv, (msg, delay_us))

    # -- run -------------------------------------------------------------

    def run(self) -> SimResult:
        duration = self.duration_ns
        queue = self._queue
        while queue:
            t, _seq, kind, node, data = heapq.heappop(queue)
            if kind == K_PROBE:
                self._probe(t)
                continue
            if t >= duration:
                continue  # non-probe events run strictly before the horizon
            if kind == K_TIMER:
                if not self.alive[node]:
                    continue
                api = self.apis[node]
                api.now = t
                tag, payload = data
                self.protocols[node].on_timer(api, tag, payload)
            elif kind == K_ARRIVAL:
                if not self.alive[node]:
                    continue
                msg, _delay = data
                api = self.apis[node]
                api.now = t
                clock = self.clocks[node]
                rx_hw = clock.hardware_read(t)
                rx_l = clock.logical_read(t)
                self.protocols[node].on_receive(api, msg, rx_hw, rx_l)
            elif kind == K_FAULT:
                self._apply_fault(t, data)
            elif kind == K_WANDER:
                self._apply_wander(t, node)
        # every pre-scheduled probe must have run before the queue drained
        assert self.records and round(self.records[-1].t_s * 1e9) + \
            self._probe_step > duration, "event queue exhausted early"
        return SimResult(
            records=self.records,
            broadcasts=dict(self.broadcasts),
            topology=self.topology,
            trace=self.trace,
        )

    def _apply_fault(self, t: SimTime, f: FaultEvent) -> None:
        if f.action == "kill":
            self.alive[f.node] = False
            if self.trace is not None:
                self.trace.append(f"{t} fault kill node={f.node}")
        elif f.action == "revive":
            self.alive[f.node] = True
            was_root = self.protocols[f.node].is_root
            self.protocols[f.node] = make_protocol(
                self.protocol_name, f.node, self.proto_cfg, is_root=was_root
            )
            api = self.apis[f.node]
            api.now = t
            self.protocols[f.node].on_boot(api)
            if self.trace is not None:
                self.trace.append(f"{t} fault revive node={f.node}")
        elif f.action == "force_unc":
            self.channel.add_forced_unc(
                ForcedUnc(f.sender, f.receiver, f.magnitude_us, f.count)
            )
            if self.trace is not None:
                self.trace.append(
                    f"{t} fault force_unc {f.sender}->{f.receiver} "
                    f"{f.magnitude_us}us x{f.count}"
                )
        else:
            raise ValueError(f"unknown fault action {f.action!r}")

    def _apply_wander(self, t: SimTime, node: int) -> None:
        rng = self._wander_rngs[node]
        clock = self.clocks[node]
        step = float(rng.normal(0.0, self._wander_sigma))
        base = self._base_drift[node]
        bound = self._wander_bound
        new = min(max(clock.drift_ppm + step, base - bound), base + bound)
        clock.set_drift(new, t)
        self._schedule(t + 60_000_000_000, K_WANDER, node, None)

    # -- measurement -------------------------------------------------------

    def _current_reference(self) -> int:
        root = self.topology.root
        if self.alive[root] and self.protocols[root].is_root:
            return root
        promoted = [
            i
            for i in range(self.topology.n)
            if self.alive[i] and self.protocols[i].is_root
        ]
        return min(promoted) if promoted else root

    def _probe(self, t: SimTime) -> None:
        n = self.topology.n
        values: list = [None] * n
        for i in range(n):
            if self.alive[i]:
                values[i] = self.clocks[i].logical_read(t)
        alive_vals = np.array(
            [v for v in values if v is not None], dtype=np.float64
        )
        local_errs = [
            abs(values[u] - values[v])
            for u, v in self.topology.edges
            if values[u] is not None and values[v] is not None
        ]
        local_max = float(max(local_errs)) if local_errs else 0.0
        local_avg = float(sum(local_errs) / len(local_errs)) if local_errs else 0.0
        if alive_vals.size >= 2:
            sorted_vals = np.sort(alive_vals)
            global_max = float(sorted_vals[-1] - sorted_vals[0])
            global_avg = _mean_pairwise_abs(sorted_vals)
        else:
            global_max = global_avg = 0.0
        ref = self._current_reference()
        ref_val = values[ref]
        to_root: list = [None] * n
        if ref_val is not None:
            for i in range(n):
                if values[i] is not None:
                    to_root[i] = float(abs(values[i] - ref_val))
        n_roots = sum(
            1 for i in range(n) if self.alive[i] and self.protocols[i].is_root
        )
        self.records.append(
            MetricsRecord(
                t_s=t / 1e9,
                values=values,
                local_max=local_max,
                local_avg=local_avg,
                global_max=global_max,
                global_avg=global_avg,
                to_root=to_root,
                n_roots=n_roots,
                broadcasts_total=sum(self.broadcasts.values()),
            )
        )


# ---------------------------------------------------------------------------
# analysis helpers
# ---------------------------------------------------------------------------


def convergence_time(
    records: list[MetricsRecord], t_b_s: float, duration_s: float
) -> tuple[float | None, int | None]:
    """First probe time after which max global error stays in its steady band.

    The band is twice the median of the final hour (final half for short
    runs).  Returns (seconds, rounds) or (None, None) if the run never
    settles.
    """
    if not records:
        return None, None
    tail_start = duration_s - 3600.0 if duration_s >= 7200.0 else duration_s / 2.0
    tail = [r.global_max for r in records if r.t_s >= tail_start]
    if not tail:
        return None, None
    med = float(np.median(tail))
    threshold = 2.0 * med
    # running suffix maximum; first index where the remainder fits the band
    suffix = [0.0] * len(records)
    worst = -math.inf
    for i in range(len(records) - 1, -1, -1):
        worst = max(worst, records[i].global_max)
        suffix[i] = worst
    for i, r in enumerate(records):
        if suffix[i] <= threshold:
            return r.t_s, math.ceil(r.t_s / t_b_s) if r.t_s > 0 else 0
    return None, None


def steady_records(
    records: list[MetricsRecord], steady_skip_s: float, duration_s: float
) -> list[MetricsRecord]:
    """Probes in the steady-state statistics window."""
    start = min(steady_skip_s, duration_s / 2.0)
    return [r for r in records if r.t_s >= start]


ANALYTIC_MODELS = ("ftsp", "fcsa", "pulsesync", "pulsepisync", "rmts")


def analytic_error(
    model: str,
    hop_k: int,
    samples: int,
    profile: DelayProfile,
    rng: np.random.Generator,
    d_fixed_hat_us: float = 3.0,
    t_wait_s: tuple[float, float] = (0.0, 30.0),
    rate_error_ppm: tuple[float, float] = (0.0, 0.0),
    stamp_quantization_us: float = 0.0,
) -> np.ndarray:
    """Monte-Carlo draw of the closed-form by-hop error accumulation (us).

    Returns ``samples`` realizations of the k-hop synchronization error under
    the named protocol's accumulation law: full delay per hop for the slow
    flood, delay minus the fixed-delay prior for the calibrated protocols,
    Gaussian jitter only for the min-filtered estimator, plus a rate-times-
    forward-latency term drawn from ``rate_error_ppm`` and ``t_wait_s``.

    ``stamp_quantization_us`` models the floor-quantized transmit stamp of
    each forwarder, which acts like an extra uniform delay per hop; set it
    to the clock granularity when cross-checking simulated runs.
    """
    from floodsync.channel import sample_delay_array

    if model not in ANALYTIC_MODELS:
        raise ValueError(f"unknown analytic model {model!r}")
    if hop_k < 1:
        raise ValueError("hop count must be >= 1")
    total = np.zeros(samples, dtype=np.float64)
    sigma = profile.d_sigma2 ** 0.5
    for _ in range(hop_k):
        if model == "rmts":
            total += rng.normal(0.0, sigma, samples)
            continue
        d = sample_delay_array(profile, rng, samples)
        if model in ("pulsesync", "pulsepisync"):
            d = d - d_fixed_hat_us
        total += d
        if stamp_quantization_us > 0.0:
            total += rng.uniform(0.0, stamp_quantization_us, samples)
        lo, hi = rate_error_ppm
        if hi > lo or lo != 0.0:
            a = rng.uniform(lo, hi, samples) if hi > lo else np.full(samples, lo)
            tw = rng.uniform(t_wait_s[0] * 1e6, t_wait_s[1] * 1e6, samples)
            total += a * tw / 1e6
    return total

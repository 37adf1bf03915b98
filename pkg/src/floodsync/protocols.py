"""Event-driven protocol state machines.

One class per protocol, all speaking the same engine interface: the engine
calls ``on_boot``/``on_timer``/``on_receive`` with a :class:`NodeApi` and the
handlers read clocks, steer the logical clock, send broadcasts and arm
timers exclusively through it.  Handlers never block and never read global
time other than the event's own timestamp.

Flooding structure shared by all protocols: time information packets carry a
round identifier that increases at the originating reference; receivers
handle a round at most once (first arrival wins, redundant paths are
suppressed) and forward it either immediately after a short random hold-off
(rapid flooding: RMTS, PulseSync, PulsePISync) or at their own next periodic
broadcast (slow flooding: FTSP, FCSA).
"""

from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass, field

from floodsync.estimators import (
    MAX_SKEW_DEVIATION,
    ObservationWindow,
    PIState,
    RegressionTable,
    filter_uncertain_indices,
    linreg_fit,
    mle_offset,
    mle_skew,
    pi_update,
    speed_agreement_update,
)

PROTOCOL_NAMES = ("rmts", "ftsp", "fcsa", "pulsesync", "pulsepisync")


@dataclass(frozen=True)
class SyncMessage:
    """Time-information packet: stamps, rate share and flood round id."""

    sender: int
    seq: int            # packet index within the round, 0..N-1
    round_id: int       # flood round identifier, increases at the origin
    origin: int         # originating reference node (election tie-break)
    h_stamp: int        # sender hardware clock at transmit, us
    l_stamp: int        # sender logical clock at transmit, us
    rate: float         # sender's logical rate multiplier


@dataclass
class ProtocolConfig:
    t_b_s: float = 30.0
    n_broadcasts: int = 5
    intra_round_gap_ms: float = 20.0
    holdoff_min_ms: float = 5.0
    holdoff_max_ms: float = 50.0
    d_fixed_hat_us: float = 3.0
    root_timeout_rounds: int = 2
    external_clock: bool = False
    regression_table: int = 8
    pi_alpha: float = 1.0
    pi_beta: float = 0.5
    # the integral only sees errors that moved less than this since the
    # previous round (uncertain-delay spikes jump by hundreds of us) and
    # clamps its input; the proportional jump is never limited
    pi_spike_guard_us: float = 300.0
    pi_clamp_us: float = 500.0
    # regression entries this far off the current fit are dropped (keeps
    # uncertain delays out of the slope; the offset jump still sees them)
    slope_guard_us: float = 50.0
    # a fit this wrong means the table mixes pre/post-jump segments of the
    # upstream clock (boot transients): flush and refill
    table_reset_us: float = 500.0
    # entries needed before the fitted slope is trusted
    slope_min_entries: int = 3
    # after the first fit, rate adjustments are slewed (ppm per round) so
    # reference noise cannot whip the rate around; the first fit still
    # jumps to capture the full crystal offset
    slope_slew_ppm: float = 0.5

    def __post_init__(self):
        if self.n_broadcasts < 1:
            raise ValueError("broadcast multiple must be >= 1")
        if self.t_b_s * 1e3 < 10 * self.n_broadcasts * self.intra_round_gap_ms:
            raise ValueError("period too short for the intra-round packet train")

    @property
    def t_b_ns(self) -> int:
        return round(self.t_b_s * 1e9)

    @property
    def gap_ns(self) -> int:
        return round(self.intra_round_gap_ms * 1e6)


class NodeApi:
    """Engine-side surface the handlers run against (defined in engine)."""

    node_id: int
    now: int  # event timestamp, ns

    def hw(self) -> int: ...
    def logical(self) -> int: ...
    def compensate(self, theta_us: float, phi: float) -> None: ...
    def anchor_to_ideal(self) -> None: ...
    def send(self, msg: SyncMessage) -> None: ...
    def set_timer(self, delay_ns: int, tag: str, data=None) -> None: ...
    def uniform(self, lo: float, hi: float) -> float: ...
    def trace(self, text: str) -> None: ...


class Protocol:
    """Base: periodic own-phase tick plus send helpers."""

    def __init__(self, node_id: int, cfg: ProtocolConfig, is_root: bool):
        self.node_id = node_id
        self.cfg = cfg
        self.is_root = is_root
        self.round_id = 0
        self.origin = node_id if is_root else -1
        self.rate = 1.0
        self.broadcast_epoch = 0

    # -- shared helpers --------------------------------------------------

    def _packet(self, api: NodeApi, seq: int) -> SyncMessage:
        return SyncMessage(
            sender=self.node_id,
            seq=seq,
            round_id=self.round_id,
            origin=self.origin,
            h_stamp=api.hw(),
            l_stamp=api.logical(),
            rate=self.rate,
        )

    def _holdoff_ns(self, api: NodeApi) -> int:
        return round(api.uniform(self.cfg.holdoff_min_ms, self.cfg.holdoff_max_ms) * 1e6)

    def accepts(self, msg: SyncMessage) -> bool:
        """Redundant-flood suppression: larger round wins, origin breaks ties."""
        if msg.round_id > self.round_id:
            return True
        return msg.round_id == self.round_id and msg.origin < self.origin

    # -- engine interface -------------------------------------------------

    def on_boot(self, api: NodeApi) -> None:
        raise NotImplementedError

    def on_timer(self, api: NodeApi, tag: str, data) -> None:
        raise NotImplementedError

    def on_receive(self, api: NodeApi, msg: SyncMessage, rx_hw: int, rx_l: int) -> None:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# RMTS
# ---------------------------------------------------------------------------


@dataclass
class _RoundCollection:
    sender: int
    round_id: int
    origin: int
    phi_j: float
    packets: dict = field(default_factory=dict)  # seq -> (rx_hw, rx_l, h, l)


class RmtsNode(Protocol):
    """Multiple one-way broadcast protocol with MLE skew/offset estimation.

    Root: floods N freshly stamped packets per period under one round id.
    Non-root: collects the first-arriving round's packet train, estimates
    the rate ratio from consecutive hardware-timestamp windows and the
    offset from the min-filtered logical differences, compensates, then
    rapidly forwards its own N-packet train after a short hold-off.
    Silent periods trigger self-promotion to root (failure recovery).
    """

    def __init__(self, node_id, cfg, is_root):
        super().__init__(node_id, cfg, is_root)
        if is_root:
            self.round_id = 1
        self.collecting: _RoundCollection | None = None
        self.old_windows: dict[int, dict] = {}  # per-neighbor stored pairs
        self.rounds_since_heard = 0
        self.heard_since_tick = False
        self.compensations = 0

    # -- root side ---------------------------------------------------------

    def _start_root_broadcast(self, api: NodeApi, delay_ns: int = 0) -> None:
        self.broadcast_epoch += 1
        api.set_timer(delay_ns, "round", (self.broadcast_epoch, 0))

    def on_boot(self, api: NodeApi) -> None:
        if self.is_root:
            if self.cfg.external_clock:
                api.anchor_to_ideal()
            self._start_root_broadcast(api)
        else:
            phase = round(api.uniform(0.0, self.cfg.t_b_s) * 1e9)
            api.set_timer(phase, "tick", None)

    def _timer_round(self, api: NodeApi, data) -> None:
        epoch, seq = data
        if not self.is_root or epoch != self.broadcast_epoch:
            return  # stale chain after demotion/re-promotion
        api.send(self._packet(api, seq))
        if seq + 1 < self.cfg.n_broadcasts:
            api.set_timer(self.cfg.gap_ns, "round", (epoch, seq + 1))
        else:
            self.round_id += 1
            rest = self.cfg.t_b_ns - (self.cfg.n_broadcasts - 1) * self.cfg.gap_ns
            api.set_timer(rest, "round", (epoch, 0))

    # -- non-root side -------------------------------------------------------

    def on_receive(self, api, msg, rx_hw, rx_l):
        if self.is_root:
            if self.accepts(msg):
                # lost the id race against another reference: step down
                api.trace(f"demote root={self.node_id} to follow {msg.origin}")
                self.is_root = False
                self.broadcast_epoch += 1
                self.on_receive(api, msg, rx_hw, rx_l)
            return
        coll = self.collecting
        if (
            coll is not None
            and msg.round_id == coll.round_id
            and msg.sender == coll.sender
            and msg.origin == coll.origin
        ):
            if msg.seq not in coll.packets:
                coll.packets[msg.seq] = (rx_hw, rx_l, msg.h_stamp, msg.l_stamp)
                if len(coll.packets) == self.cfg.n_broadcasts:
                    self._close_round(api)
            return
        if not self.accepts(msg):
            return
        if coll is not None:
            self._close_round(api)  # stale partial round, rare
        self.round_id = msg.round_id
        self.origin = msg.origin
        self.heard_since_tick = True
        self.rounds_since_heard = 0
        self.collecting = _RoundCollection(
            sender=msg.sender,
            round_id=msg.round_id,
            origin=msg.origin,
            phi_j=msg.rate,
            packets={msg.seq: (rx_hw, rx_l, msg.h_stamp, msg.l_stamp)},
        )
        if self.cfg.n_broadcasts == 1:
            self._close_round(api)
        else:
            closeout = 2 * self.cfg.n_broadcasts * self.cfg.gap_ns
            api.set_timer(closeout, "closeout", msg.round_id)

    def _close_round(self, api: NodeApi) -> None:
        coll, self.collecting = self.collecting, None
        if coll is None:
            return
        seqs = sorted(coll.packets)
        stamps = [coll.packets[s][2] for s in seqs]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            api.trace(f"node={self.node_id} discard corrupt round {coll.round_id}")
            return
        new_pairs = {s: (coll.packets[s][0], coll.packets[s][2]) for s in seqs}
        logical_pairs = [(coll.packets[s][1], coll.packets[s][3]) for s in seqs]

        theta = mle_offset(logical_pairs, self.cfg.d_fixed_hat_us)
        old_pairs = self.old_windows.get(coll.sender)
        if self.compensations == 0:
            # nothing better yet: start out sharing the neighbor's rate
            phi = coll.phi_j
        else:
            # no usable estimate for this neighbor (first time through it,
            # or uncertain delays wiped the common packets): keep the
            # previous rate, still apply the offset
            phi = self.rate
        if old_pairs is not None:
            window = self._paired_window(old_pairs, new_pairs)
            if window is not None:
                est = mle_skew(window)
                if est.valid:
                    phi = est.phi * coll.phi_j
        api.compensate(theta, phi)
        self.rate = phi
        self.compensations += 1
        self.old_windows[coll.sender] = new_pairs
        api.trace(
            f"node={self.node_id} round={coll.round_id} m={len(seqs)} "
            f"theta={theta:.3f} phi={phi:.9f}"
        )
        self.broadcast_epoch += 1
        api.set_timer(self._holdoff_ns(api), "forward", (self.broadcast_epoch, 0))

    @staticmethod
    def _paired_window(old_pairs: dict, new_pairs: dict) -> ObservationWindow | None:
        """Align windows on common packet indices, dropping uncertain hits."""
        common = sorted(set(old_pairs) & set(new_pairs))
        if not common:
            return None
        old_list = [old_pairs[s] for s in common]
        new_list = [new_pairs[s] for s in common]
        keep_old = set(filter_uncertain_indices(old_list))
        keep_new = set(filter_uncertain_indices(new_list))
        keep = sorted(keep_old & keep_new)
        if not keep:
            return None
        return ObservationWindow(
            old_pairs=[old_list[i] for i in keep],
            new_pairs=[new_list[i] for i in keep],
        )

    def _timer_forward(self, api: NodeApi, data) -> None:
        epoch, seq = data
        if self.is_root or epoch != self.broadcast_epoch:
            return
        api.send(self._packet(api, seq))
        if seq + 1 < self.cfg.n_broadcasts:
            api.set_timer(self.cfg.gap_ns, "forward", (epoch, seq + 1))

    def _timer_tick(self, api: NodeApi) -> None:
        api.set_timer(self.cfg.t_b_ns, "tick", None)
        if self.is_root:
            return
        if self.heard_since_tick:
            self.rounds_since_heard = 0
        else:
            self.rounds_since_heard += 1
        self.heard_since_tick = False
        if self.rounds_since_heard >= self.cfg.root_timeout_rounds:
            api.trace(f"node={self.node_id} self-promotes to root")
            self.is_root = True
            self.origin = self.node_id
            self.round_id += 1
            self.rounds_since_heard = 0
            self.collecting = None
            self._start_root_broadcast(api)

    def on_timer(self, api, tag, data):
        if tag == "round":
            self._timer_round(api, data)
        elif tag == "forward":
            self._timer_forward(api, data)
        elif tag == "closeout":
            if self.collecting is not None and self.collecting.round_id == data:
                self._close_round(api)
        elif tag == "tick":
            self._timer_tick(api)


# ---------------------------------------------------------------------------
# slow-flooding baselines: FTSP and FCSA
# ---------------------------------------------------------------------------


def _guarded_table_add(table: RegressionTable, cfg: ProtocolConfig,
                       x: float, y: float, reanchor: bool) -> None:
    """Insert a regression entry, suppressing spikes without starving.

    Without ``reanchor`` (rapid flooding), entries far off the current fit
    are refused at most twice in a row, so lone uncertain-delay spikes stay
    out of the slope but the table still capitulates to a persistent shift.
    With ``reanchor`` (slow flooding) the entry is always followed, and a
    gross step flushes the table first: the upstream clock jumped while it
    was synchronizing and the old segment would poison the fit.
    """
    if len(table) >= 2:
        _, predict = linreg_fit(table)
        err = abs(predict(x) - y)
        if err > cfg.slope_guard_us:
            if reanchor:
                if err > cfg.table_reset_us:
                    table.clear()
            elif table.rejects < 2:
                table.rejects += 1
                return
    table.rejects = 0
    table.add(x, y)


class FtspNode(Protocol):
    """Slow flooding with 8-entry regression and no delay compensation.

    Every node broadcasts once per own period (random phase).  Receivers
    snap their logical clock onto each handled stamp (the transmission delay
    is never compensated, so every hop inherits it) and take the logical
    rate from the regression of received stamps over local hardware time.
    """

    def __init__(self, node_id, cfg, is_root):
        super().__init__(node_id, cfg, is_root)
        self.table = RegressionTable(cfg.regression_table)

    def on_boot(self, api):
        if self.is_root:
            api.set_timer(0, "tick", None)
        else:
            phase = round(api.uniform(0.0, self.cfg.t_b_s) * 1e9)
            api.set_timer(phase, "tick", None)

    def on_timer(self, api, tag, data):
        api.set_timer(self.cfg.t_b_ns, "tick", None)
        if self.is_root:
            self.round_id += 1
            api.send(self._packet(api, 0))
        elif self.round_id > 0:
            api.send(self._packet(api, 0))

    def on_receive(self, api, msg, rx_hw, rx_l):
        if self.is_root or not self.accepts(msg):
            return
        self.round_id = msg.round_id
        self.origin = msg.origin
        _guarded_table_add(self.table, self.cfg, rx_hw, msg.l_stamp, reanchor=True)
        if len(self.table) >= self.cfg.slope_min_entries:
            slope, _ = linreg_fit(self.table)
            if abs(slope - 1.0) < MAX_SKEW_DEVIATION:
                self.rate = slope
        api.compensate(msg.l_stamp - rx_l, self.rate)


class FcsaNode(Protocol):
    """Slow flooding plus clock-speed agreement and fixed-delay calibration.

    Offsets snap to each handled stamp corrected by the fixed-delay prior.
    Rates agree across the network: every overheard neighbor contributes a
    median-smoothed relative hardware rate; the handled (upstream) neighbor
    is chased immediately so the reference rate propagates down the flood
    chain, and the periodic tick averages the node with all its neighbors.
    """

    def __init__(self, node_id, cfg, is_root):
        super().__init__(node_id, cfg, is_root)
        self.last_rx: dict[int, tuple[int, int]] = {}     # nb -> (h_stamp, rx_hw)
        self.nb_rate: dict[int, float] = {}               # nb -> shared multiplier
        self.ratios: dict[int, deque] = {}                # nb -> hardware rate ratios

    def on_boot(self, api):
        if self.is_root:
            api.set_timer(0, "tick", None)
        else:
            phase = round(api.uniform(0.0, self.cfg.t_b_s) * 1e9)
            api.set_timer(phase, "tick", None)

    def _track_neighbor(self, msg: SyncMessage, rx_hw: int) -> None:
        prev = self.last_rx.get(msg.sender)
        self.last_rx[msg.sender] = (msg.h_stamp, rx_hw)
        self.nb_rate[msg.sender] = msg.rate
        if prev is None:
            return
        dh_remote = msg.h_stamp - prev[0]
        dh_local = rx_hw - prev[1]
        if dh_local <= 0 or dh_remote <= 0:
            return
        ratio = dh_remote / dh_local
        if abs(ratio - 1.0) < 1e-3:
            self.ratios.setdefault(msg.sender, deque(maxlen=8)).append(ratio)

    def _implied(self, nb: int) -> float | None:
        r = self.ratios.get(nb)
        if r is None or len(r) < 2:
            return None
        implied = self.nb_rate[nb] * statistics.median(r)
        return implied if abs(implied - 1.0) < 1e-3 else None

    def on_timer(self, api, tag, data):
        api.set_timer(self.cfg.t_b_ns, "tick", None)
        if self.is_root:
            self.round_id += 1
            api.send(self._packet(api, 0))
            return
        implied = [r for nb in self.ratios if (r := self._implied(nb)) is not None]
        new_rate = speed_agreement_update(self.rate, implied)
        if abs(new_rate - 1.0) < 1e-3:
            api.compensate(0.0, new_rate)
            self.rate = new_rate
        if self.round_id > 0:
            api.send(self._packet(api, 0))

    def on_receive(self, api, msg, rx_hw, rx_l):
        if self.is_root:
            return
        self._track_neighbor(msg, rx_hw)
        if not self.accepts(msg):
            return
        self.round_id = msg.round_id
        self.origin = msg.origin
        upstream = self._implied(msg.sender)
        if upstream is not None:
            self.rate = (self.rate + upstream) / 2.0
        api.compensate(msg.l_stamp + self.cfg.d_fixed_hat_us - rx_l, self.rate)


# ---------------------------------------------------------------------------
# rapid-flooding baselines: PulseSync and PulsePISync
# ---------------------------------------------------------------------------


class PulseSyncNode(Protocol):
    """Rapid flooding, regression skew, offset minus the fixed-delay prior.

    The offset snaps to every handled stamp; the regression slope drives the
    rate once the table is full (estimates from a part-filled table are not
    trusted, which matches the observed convergence of about a table's worth
    of rounds).  Entries far off the current fit are rejected so uncertain
    delays perturb one offset, not eight rounds of slope.
    """

    def __init__(self, node_id, cfg, is_root):
        super().__init__(node_id, cfg, is_root)
        self.table = RegressionTable(cfg.regression_table)
        self.rate_locked = False

    def on_boot(self, api):
        if self.is_root:
            api.set_timer(0, "tick", None)

    def on_timer(self, api, tag, data):
        if tag == "tick":
            api.set_timer(self.cfg.t_b_ns, "tick", None)
            self.round_id += 1
            api.send(self._packet(api, 0))
        elif tag == "forward":
            if data == self.broadcast_epoch:
                api.send(self._packet(api, 0))

    def on_receive(self, api, msg, rx_hw, rx_l):
        if self.is_root or not self.accepts(msg):
            return
        self.round_id = msg.round_id
        self.origin = msg.origin
        reference = msg.l_stamp + self.cfg.d_fixed_hat_us
        _guarded_table_add(self.table, self.cfg, rx_hw, reference, reanchor=False)
        if len(self.table) >= self.table.capacity:
            slope, _ = linreg_fit(self.table)
            if abs(slope - 1.0) < MAX_SKEW_DEVIATION:
                if self.rate_locked:
                    slew = self.cfg.slope_slew_ppm * 1e-6
                    slope = min(max(slope, self.rate - slew), self.rate + slew)
                self.rate = slope
                self.rate_locked = True
        api.compensate(reference - rx_l, self.rate)
        self.broadcast_epoch += 1
        api.set_timer(self._holdoff_ns(api), "forward", self.broadcast_epoch)


class PulsePiSyncNode(Protocol):
    """Rapid flooding with a proportional-integral rate controller.

    The proportional term jumps the clock onto each handled stamp (with the
    fixed-delay prior); the integral term accumulates the residual error
    into the rate multiplier.  Outlier innovations (uncertain delays) jump
    the clock but are kept out of the integral.
    """

    def __init__(self, node_id, cfg, is_root):
        super().__init__(node_id, cfg, is_root)
        self.pi = PIState(alpha_p=cfg.pi_alpha, beta_i=cfg.pi_beta)
        self.last_handled_ns: int | None = None
        self.prev_error_us: float | None = None

    def on_boot(self, api):
        if self.is_root:
            api.set_timer(0, "tick", None)

    def on_timer(self, api, tag, data):
        if tag == "tick":
            api.set_timer(self.cfg.t_b_ns, "tick", None)
            self.round_id += 1
            api.send(self._packet(api, 0))
        elif tag == "forward":
            if data == self.broadcast_epoch:
                api.send(self._packet(api, 0))

    def on_receive(self, api, msg, rx_hw, rx_l):
        if self.is_root or not self.accepts(msg):
            return
        self.round_id = msg.round_id
        self.origin = msg.origin
        error = msg.l_stamp + self.cfg.d_fixed_hat_us - rx_l
        dt_s = None
        if self.last_handled_ns is not None:
            dt_s = (api.now - self.last_handled_ns) / 1e9
        self.last_handled_ns = api.now
        # drift moves the error slowly between rounds; an uncertain delay
        # jumps it by hundreds of us and must stay out of the integral
        steady = (
            self.prev_error_us is not None
            and abs(error - self.prev_error_us) <= self.cfg.pi_spike_guard_us
        )
        if dt_s is not None and dt_s > 0 and steady:
            clamp = self.cfg.pi_clamp_us
            bounded = min(max(error, -clamp), clamp)
            _, new_rate = pi_update(self.pi, bounded, dt_s)
            self.pi.rate_correction = new_rate
            self.pi.last_error_us = error
        offset = self.pi.alpha_p * error
        self.prev_error_us = error
        api.compensate(offset, 1.0 + self.pi.rate_correction)
        self.rate = 1.0 + self.pi.rate_correction
        self.broadcast_epoch += 1
        api.set_timer(self._holdoff_ns(api), "forward", self.broadcast_epoch)


_PROTOCOLS = {
    "rmts": RmtsNode,
    "ftsp": FtspNode,
    "fcsa": FcsaNode,
    "pulsesync": PulseSyncNode,
    "pulsepisync": PulsePiSyncNode,
}


def make_protocol(name: str, node_id: int, cfg: ProtocolConfig, is_root: bool) -> Protocol:
    try:
        cls = _PROTOCOLS[name]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}") from None
    return cls(node_id, cfg, is_root)

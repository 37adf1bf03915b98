"""Per-node hardware and logical clock models.

Each node owns a free-running hardware clock driven by its crystal (rate
1 + drift_ppm * 1e-6, never adjustable) and a software logical clock derived
from it through a rate multiplier and piecewise-linear anchor segments.
Ideal simulation time is integer nanoseconds; clock readings are microseconds
quantized to the configured granularity (1 us by default, matching a 16-bit
MAC timer driven at 1 MHz).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

SimTime = int  # ideal time, integer nanoseconds since simulation start


class ClockError(ValueError):
    pass


@dataclass
class NodeClock:
    """Hardware clock plus compensated logical clock of one node.

    The hardware clock accumulates at ``1 + drift_ppm * 1e-6`` microseconds
    per ideal microsecond from ``boot_time`` and can never be steered.  The
    logical clock follows ``L = L_anchor + (H - H_anchor) * rate_multiplier``
    and is re-anchored by :meth:`compensate`.  Drift may be stepped between
    events (bounded wander); the hardware accumulator integrates each linear
    segment exactly.
    """

    node_id: int
    boot_time: SimTime = 0
    drift_ppm: float = 0.0
    initial_offset_us: int = 0
    granularity_us: int = 1

    rate_multiplier: float = 1.0  # root keeps 1.0 forever
    # internal hardware accumulator (exact, un-quantized)
    _hw_acc_us: float = field(init=False, default=0.0)
    _hw_anchor_t: SimTime = field(init=False, default=0)
    # logical anchor: (hardware us, logical us) of the current segment
    _h_anchor_us: float = field(init=False, default=0.0)
    _l_anchor_us: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.granularity_us < 1:
            raise ClockError("granularity must be >= 1 us")
        self._hw_anchor_t = self.boot_time
        self._hw_acc_us = float(self.initial_offset_us)
        h0 = self._quantize(self._hw_acc_us)
        # before any compensation the logical clock equals the hardware clock
        self._h_anchor_us = h0
        self._l_anchor_us = h0

    # -- reads ---------------------------------------------------------

    def _hw_exact(self, t: SimTime) -> float:
        if t < self.boot_time:
            raise ClockError(f"clock not yet running at t={t}")
        rate = 1.0 + self.drift_ppm * 1e-6
        return self._hw_acc_us + rate * ((t - self._hw_anchor_t) / 1000.0)

    def _quantize(self, us: float) -> int:
        g = self.granularity_us
        return math.floor(us / g) * g

    def hardware_read(self, t: SimTime) -> int:
        """Hardware time in us, floored to the granularity grid. Pure."""
        return self._quantize(self._hw_exact(t))

    def logical_read(self, t: SimTime) -> int:
        """Logical time in us on the current anchor segment. Pure."""
        h = self.hardware_read(t)
        return self._quantize(
            self._l_anchor_us + (h - self._h_anchor_us) * self.rate_multiplier
        )

    # -- steering ------------------------------------------------------

    def compensate(self, theta_us: float, phi_new: float, t: SimTime) -> None:
        """Apply offset step ``theta_us`` and switch rate multiplier at t.

        The logical clock jumps by exactly ``theta_us`` at ``t`` (negative
        steps allowed) and subsequent reads advance with ``phi_new``.
        """
        if phi_new <= 0.0:
            raise ClockError(f"non-physical rate multiplier {phi_new}")
        h = self.hardware_read(t)
        l_now = self._quantize(
            self._l_anchor_us + (h - self._h_anchor_us) * self.rate_multiplier
        )
        self._h_anchor_us = h
        self._l_anchor_us = l_now + theta_us
        self.rate_multiplier = phi_new

    def set_drift(self, drift_ppm: float, t: SimTime) -> None:
        """Step the crystal drift at t (wander); hardware stays continuous."""
        self._hw_acc_us = self._hw_exact(t)
        self._hw_anchor_t = t
        self.drift_ppm = drift_ppm

    def anchor_logical_to(self, value_us: float, t: SimTime) -> None:
        """Pin the logical clock to an external reference value at t."""
        l_now = self.logical_read(t)
        self.compensate(value_us - l_now, self.rate_multiplier, t)

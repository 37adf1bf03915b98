"""Clock-parameter estimators used by the synchronization protocols.

Covers the estimators of every protocol in the comparison: the MLE skew and
min-filter offset estimators of the multiple-broadcast protocol, ordinary
least squares over a small regression table (FTSP/PulseSync), neighbor
rate agreement (FCSA), and a proportional-integral controller (PulsePISync).
All operations are pure functions over timestamp pairs in microseconds.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

# Far beyond any physical crystal tolerance; estimates outside are rejected.
MAX_SKEW_DEVIATION = 1e-3

# Pairs whose receive-minus-send difference exceeds the window minimum by
# more than this are treated as uncertain-delay hits and dropped from skew
# observations.  Clean Gaussian jitter spans < 1 us; uncertain events are
# two orders of magnitude larger, so the threshold is uncritical.
UNC_REJECT_US = 5.0


class EstimatorError(ValueError):
    pass


@dataclass
class ObservationWindow:
    """Timestamp pairs from two consecutive rounds of one neighbor.

    ``old_pairs``/``new_pairs`` hold (local_hw, remote_hw) receive/send
    hardware timestamps aligned index-by-index (same packet sequence number
    in both rounds).  ``logical_pairs`` holds (local_logical, remote_logical)
    for the newest round only.
    """

    old_pairs: list[tuple[float, float]] = field(default_factory=list)
    new_pairs: list[tuple[float, float]] = field(default_factory=list)
    logical_pairs: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class SkewEstimate:
    phi: float
    tau_us: float
    valid: bool


def mle_offset_increment(old_pairs, new_pairs) -> float:
    """Mean growth of the local-minus-remote offset between two windows.

    With u[k] and v[k] the per-packet (local - remote) differences of the
    old and new windows, returns mean(v - u): the maximum-likelihood offset
    increment under Gaussian delay jitter.
    """
    if not old_pairs or not new_pairs:
        raise EstimatorError("empty observation window")
    if len(old_pairs) != len(new_pairs):
        raise EstimatorError("unpaired observation windows")
    total = 0.0
    for (lo, ro), (ln, rn) in zip(old_pairs, new_pairs):
        total += (ln - rn) - (lo - ro)
    return total / len(old_pairs)


def mle_skew(window: ObservationWindow) -> SkewEstimate:
    """Estimate the remote/local hardware rate ratio from paired windows.

    The returned multiplier is the factor by which the local node must scale
    its own rate to advance like the remote: tau / (tau + increment), with
    tau the remote hardware time elapsed between the two windows (first
    paired packet).  Estimates with non-positive tau or implausible
    deviation (> 1000 ppm) are flagged invalid.
    """
    if not window.old_pairs or not window.new_pairs:
        return SkewEstimate(1.0, 0.0, False)
    if len(window.old_pairs) != len(window.new_pairs):
        return SkewEstimate(1.0, 0.0, False)
    tau = window.new_pairs[0][1] - window.old_pairs[0][1]
    if tau <= 0:
        return SkewEstimate(1.0, tau, False)
    inc = mle_offset_increment(window.old_pairs, window.new_pairs)
    phi = tau / (tau + inc)
    if abs(phi - 1.0) >= MAX_SKEW_DEVIATION:
        return SkewEstimate(1.0, tau, False)
    return SkewEstimate(phi, tau, True)


def mle_offset(logical_pairs, d_fixed_hat: float) -> float:
    """Signed correction to add to the local logical clock (us).

    Takes the per-packet (local - remote) logical differences, keeps the
    packet with the smallest delay via the minimum, and subtracts the prior
    fixed-delay calibration.  Positive means the local clock is behind.
    A packet hit by an uncertain delay inflates its difference and is
    discarded by the min unless every packet of the round was hit.
    """
    if d_fixed_hat < 0:
        raise EstimatorError("negative fixed-delay prior")
    if not logical_pairs:
        raise EstimatorError("empty observation window")
    smallest = min(local - remote for local, remote in logical_pairs)
    return d_fixed_hat - smallest


def filter_uncertain_indices(pairs, threshold_us: float = UNC_REJECT_US) -> list[int]:
    """Indices of pairs whose delay is within threshold of the window best.

    Anchors on the minimum (local - remote) difference of the window, the
    same statistic the offset estimator trusts, and keeps only packets whose
    excess delay over it is below the threshold.  Used to keep uncertain
    delays out of the skew observations.
    """
    if not pairs:
        return []
    diffs = [local - remote for local, remote in pairs]
    lo = min(diffs)
    return [i for i, d in enumerate(diffs) if d - lo <= threshold_us]


# -- linear regression (FTSP / PulseSync) ------------------------------


class RegressionTable:
    """Fixed-capacity ring buffer of (local_hw, reference_time) pairs."""

    def __init__(self, capacity: int = 8):
        self.entries: deque[tuple[float, float]] = deque(maxlen=capacity)
        self.rejects = 0  # consecutive gross-outlier insertions refused

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def capacity(self) -> int:
        return self.entries.maxlen

    def add(self, local_hw: float, reference: float) -> None:
        self.entries.append((local_hw, reference))

    def clear(self) -> None:
        self.entries.clear()
        self.rejects = 0


def linreg_fit(table: RegressionTable):
    """Least-squares line mapping local hardware time to reference time.

    Returns (slope, predict) where predict(h) evaluates the fitted line.
    """
    n = len(table)
    if n < 2:
        raise EstimatorError("regression needs at least two entries")
    xs = [x for x, _ in table.entries]
    ys = [y for _, y in table.entries]
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    if sxx == 0.0:
        raise EstimatorError("degenerate regression (identical abscissae)")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    slope = sxy / sxx

    def predict(h: float) -> float:
        return my + slope * (h - mx)

    return slope, predict


# -- PI controller (PulsePISync) ----------------------------------------


@dataclass
class PIState:
    """Integral state of the per-node PI rate controller."""

    rate_correction: float = 0.0
    alpha_p: float = 1.0
    beta_i: float = 0.5
    last_error_us: float = 0.0

    def __post_init__(self):
        if self.alpha_p <= 0 or self.beta_i <= 0:
            raise EstimatorError("controller gains must be positive")


def pi_update(state: PIState, error_us: float, dt_s: float) -> tuple[float, float]:
    """One controller step: returns (offset_correction_us, new_rate_correction).

    The proportional term jumps the clock by alpha_p * error; the integral
    term accumulates beta_i * error / dt into the rate correction (dt in
    seconds, rate in us-per-us).  The caller owns applying both and storing
    the new state.
    """
    if dt_s <= 0:
        raise EstimatorError("non-positive controller interval")
    offset = state.alpha_p * error_us
    new_rate = state.rate_correction + state.beta_i * error_us / (dt_s * 1e6)
    return offset, new_rate


# -- clock speed agreement (FCSA) ---------------------------------------


def speed_agreement_update(my_rate: float, implied_rates: list[float]) -> float:
    """Average the node's rate with the rates its neighbors imply for it."""
    if not implied_rates:
        return my_rate
    return math.fsum([my_rate, *implied_rates]) / (1 + len(implied_rates))

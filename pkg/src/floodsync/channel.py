"""One-way broadcast delay model and message delivery.

The per-reception delay is ``d_fixed + d + (rare) unc`` where ``d`` is
zero-mean Gaussian jitter and ``unc`` is a rare, large uncertain-delay event
(interrupt/software contention).  Profile presets carry the measured rows of
the SFD-interrupt-priority delay study; the Gaussian variance is the reported
0.0049 us^2 for every preset, while means and uncertain-event probabilities
are per preset.

Uncertain-delay magnitudes have no reported distribution shape, only maxima;
they are drawn uniformly from a configurable range whose default spans the
reported maxima and stays well clear of the variable-delay scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from floodsync import rng as rngmod
from floodsync.clock import SimTime


@dataclass(frozen=True)
class DelayProfile:
    """Parameters of the one-way broadcast delay distribution (us)."""

    d_fixed: float = 3.322
    d_sigma2: float = 0.0049
    p_unc: float = 0.1175
    unc_min: float = 100.0
    unc_max: float = 910.0
    loss_prob: float = 0.0

    def __post_init__(self):
        if self.d_fixed <= 0:
            raise ValueError("d_fixed must be > 0")
        if self.d_sigma2 < 0:
            raise ValueError("d_sigma2 must be >= 0")
        if not 0.0 <= self.p_unc <= 1.0:
            raise ValueError("p_unc must be in [0, 1]")
        if self.unc_min > self.unc_max:
            raise ValueError("uncertain-delay range inverted")
        if not 0.0 <= self.loss_prob < 1.0:
            raise ValueError("loss_prob must be in [0, 1)")


# SFD interrupt priority presets (variable-delay mean, uncertain probability).
PRESETS: dict[str, DelayProfile] = {
    "equal": DelayProfile(d_fixed=3.322, p_unc=0.1175, unc_max=910.0),
    "lowest": DelayProfile(d_fixed=3.330, p_unc=0.0537, unc_max=732.0),
    "highest": DelayProfile(d_fixed=3.312, p_unc=0.0013, unc_max=910.0),
}


def preset(name: str, **overrides) -> DelayProfile:
    """Look up a named preset, optionally overriding fields."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown delay preset {name!r}") from None
    return replace(base, **overrides) if overrides else base


def sample_delay(profile: DelayProfile, stream) -> float:
    """Draw one reception delay in us; always > 0.

    ``stream`` must provide ``uniform()`` and ``normal()``.  The Gaussian
    term is resampled if the variable part comes out non-positive (physically
    impossible delay); with realistic parameters this never triggers.
    """
    unc_event = profile.p_unc > 0.0 and stream.uniform() < profile.p_unc
    sigma = profile.d_sigma2 ** 0.5
    d = profile.d_fixed + stream.normal(0.0, sigma)
    while d <= 0.0:
        d = profile.d_fixed + stream.normal(0.0, sigma)
    if unc_event:
        d += stream.uniform(profile.unc_min, profile.unc_max)
    return d


def sample_delay_array(
    profile: DelayProfile, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Vectorized sampler with the same distribution as :func:`sample_delay`.

    Intended for Monte-Carlo oracles and bulk statistics; it does not share
    a bitstream with the scalar per-reception path.
    """
    sigma = profile.d_sigma2 ** 0.5
    d = profile.d_fixed + rng.normal(0.0, sigma, size)
    bad = d <= 0.0
    while bad.any():
        d[bad] = profile.d_fixed + rng.normal(0.0, sigma, int(bad.sum()))
        bad = d <= 0.0
    if profile.p_unc > 0.0:
        hit = rng.random(size) < profile.p_unc
        d[hit] += rng.uniform(profile.unc_min, profile.unc_max, int(hit.sum()))
    return d


@dataclass
class ForcedUnc:
    """Pending fault directive: add a fixed uncertain delay on a link."""

    sender: int
    receiver: int
    magnitude_us: float
    count: int = 1
    active: bool = False


@dataclass
class Channel:
    """Delivers broadcasts to topology neighbors with per-receiver delays."""

    adjacency: dict[int, list[int]]
    profile: DelayProfile
    seed: int
    forced: list[ForcedUnc] = field(default_factory=list)

    def add_forced_unc(self, directive: ForcedUnc) -> None:
        directive.active = True
        self.forced.append(directive)

    def _forced_extra(self, sender: int, receiver: int) -> float:
        for f in self.forced:
            if f.active and f.sender == sender and f.receiver == receiver and f.count > 0:
                f.count -= 1
                if f.count == 0:
                    f.active = False
                return f.magnitude_us
        return 0.0

    def deliver_broadcast(
        self, sender: int, round_id: int, seq: int, t_send: SimTime
    ) -> list[tuple[int, SimTime, float]]:
        """Arrival schedule for one broadcast: (receiver, t_arrival, delay_us).

        Each receiver gets an independent draw from a stream keyed by
        (seed, link, round, seq), so identical seeds reproduce identical
        delays on the same coordinates regardless of protocol timing.
        """
        arrivals = []
        for recv in self.adjacency.get(sender, ()):
            stream = rngmod.KeyedStream(
                self.seed, rngmod.DELAY, sender, recv, round_id, seq
            )
            if self.profile.loss_prob > 0.0 and stream.uniform() < self.profile.loss_prob:
                continue
            delay_us = sample_delay(self.profile, stream)
            delay_us += self._forced_extra(sender, recv)
            arrivals.append((recv, t_send + round(delay_us * 1000.0), delay_us))
        return arrivals

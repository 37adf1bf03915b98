"""Deterministic discrete-event simulator of flooding time synchronization.

Simulates multi-hop wireless sensor networks running rapid- and slow-flooding
clock synchronization protocols (RMTS, FTSP, FCSA, PulseSync, PulsePISync)
over an empirical one-way broadcast delay model, and provides the experiment
harness used to compare them on line and grid topologies.
"""

__version__ = "0.1.0"

from floodsync.clock import NodeClock
from floodsync.channel import DelayProfile, PRESETS, sample_delay
from floodsync.engine import Simulation, build_topology

__all__ = [
    "NodeClock",
    "DelayProfile",
    "PRESETS",
    "sample_delay",
    "Simulation",
    "build_topology",
]

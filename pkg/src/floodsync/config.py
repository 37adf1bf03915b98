"""Experiment configuration: INI files, CLI overrides, validation.

The file format is flat ``key = value`` pairs under ``[sections]``
(see ``docs/config.md``).  Command-line flags override file values.
Validation failures raise :class:`ConfigError` with the offending
section/key and, when it comes from a file, the line number.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, asdict

from floodsync.channel import DelayProfile, preset
from floodsync.engine import FaultEvent, Topology, build_topology
from floodsync.protocols import PROTOCOL_NAMES, ProtocolConfig


class ConfigError(ValueError):
    pass


@dataclass
class TopologySpec:
    kind: str = "line"
    n: int = 25
    width: int = 5
    height: int = 5
    arity: int = 2
    depth: int = 3
    path: str = ""
    root: int = 0

    def build(self) -> Topology:
        kw = {"root": self.root}
        if self.kind in ("line", "ring"):
            kw["n"] = self.n
        elif self.kind == "grid":
            kw.update(width=self.width, height=self.height)
        elif self.kind == "tree":
            kw.update(arity=self.arity, depth=self.depth)
        elif self.kind == "edgelist":
            kw["path"] = self.path
        else:
            raise ConfigError(f"topology.kind: unknown kind {self.kind!r}")
        return build_topology(self.kind, **kw)

    def describe(self) -> str:
        if self.kind in ("line", "ring"):
            return f"{self.kind}(n={self.n})"
        if self.kind == "grid":
            return f"grid({self.width}x{self.height})"
        if self.kind == "tree":
            return f"tree(arity={self.arity},depth={self.depth})"
        return f"edgelist({self.path})"


@dataclass
class DriftSpec:
    ppm_min: float = -40.0
    ppm_max: float = 40.0
    offset_max_us: int = 100_000
    wander_ppm_per_min: float = 0.0
    wander_bound_ppm: float = 2.0
    node_ppm: dict[int, float] = field(default_factory=dict)
    node_offset_us: dict[int, int] = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    protocol: str = "rmts"
    duration_s: float = 14400.0
    seed: int = 1
    probe_interval_s: float = 10.0
    steady_skip_s: float = 600.0
    granularity_us: int = 1
    trace: bool = False
    out: str = ""
    topology: TopologySpec = field(default_factory=TopologySpec)
    proto: ProtocolConfig = field(default_factory=ProtocolConfig)
    delay: DelayProfile = field(default_factory=lambda: preset("equal"))
    delay_preset: str = "equal"
    drift: DriftSpec = field(default_factory=DriftSpec)
    faults: list[FaultEvent] = field(default_factory=list)
    sweep_t_b_s: list[float] = field(default_factory=list)
    sweep_protocols: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.protocol not in PROTOCOL_NAMES:
            raise ConfigError(
                f"experiment.protocol: unknown protocol {self.protocol!r} "
                f"(choose from {', '.join(PROTOCOL_NAMES)})"
            )
        if self.duration_s < 0:
            raise ConfigError("experiment.duration_s: must be >= 0")
        if self.duration_s != 0 and self.duration_s < 10 * self.proto.t_b_s:
            raise ConfigError(
                "experiment.duration_s: statistics runs need at least "
                f"10 periods ({10 * self.proto.t_b_s:.0f} s); got {self.duration_s:.0f} s"
            )
        if self.probe_interval_s <= 0:
            raise ConfigError("experiment.probe_interval_s: must be > 0")
        if self.granularity_us < 1:
            raise ConfigError("experiment.granularity_us: must be >= 1")
        if self.drift.ppm_min > self.drift.ppm_max:
            raise ConfigError("drift.ppm_min: exceeds drift.ppm_max")
        for p in self.sweep_protocols:
            if p not in PROTOCOL_NAMES:
                raise ConfigError(f"sweep.protocols: unknown protocol {p!r}")
        self.topology.build()  # raises on bad topology

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["faults"] = [asdict(f) for f in self.faults]
        return d


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_bool(section: str, key: str, raw: str) -> bool:
    try:
        return _BOOL[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"{section}.{key}: expected a boolean, got {raw!r}") from None


def _parse_num(section: str, key: str, raw: str, kind=float):
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: expected a {kind.__name__}, got {raw!r}"
        ) from None


def _parse_node_map(section: str, key: str, raw: str, kind=float) -> dict:
    """Parse ``node:value`` comma lists, e.g. ``0:0, 1:40``."""
    out = {}
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            node, value = item.split(":")
            out[int(node)] = kind(value)
        except ValueError:
            raise ConfigError(
                f"{section}.{key}: expected node:value pairs, got {item!r}"
            ) from None
    return out


def _parse_fault(key: str, raw: str) -> FaultEvent:
    toks = raw.split()
    try:
        action = toks[0]
        if action in ("kill", "revive"):
            return FaultEvent(t_s=float(toks[1]), action=action, node=int(toks[2]))
        if action == "force_unc":
            return FaultEvent(
                t_s=float(toks[1]),
                action=action,
                sender=int(toks[2]),
                receiver=int(toks[3]),
                magnitude_us=float(toks[4]),
                count=int(toks[5]) if len(toks) > 5 else 1,
            )
    except (IndexError, ValueError):
        pass
    raise ConfigError(
        f"faults.{key}: expected 'kill T NODE', 'revive T NODE' or "
        f"'force_unc T SENDER RECEIVER MAGNITUDE [COUNT]', got {raw!r}"
    )


def _line_of(text: str | None, key: str) -> str:
    if not text:
        return ""
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(key) and "=" in stripped:
            lhs = stripped.split("=", 1)[0].strip()
            if lhs == key:
                return f" (line {i})"
    return ""


def parse_config(
    text: str, source: str = "<config>", overrides: list[str] | None = None
) -> ExperimentConfig:
    """Parse INI text plus ``section.key=value`` overrides into a config."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    for ov in overrides or []:
        try:
            dotted, value = ov.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError:
            raise ConfigError(
                f"override {ov!r}: expected section.key=value"
            ) from None
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key.strip(), value.strip())

    cfg = ExperimentConfig()
    delay_overrides: dict[str, float] = {}
    delay_preset_name = None

    known_sections = {
        "experiment", "topology", "protocol", "delay", "drift", "faults", "sweep",
    }
    for section in cp.sections():
        if section not in known_sections:
            raise ConfigError(
                f"{source}: unknown section [{section}]{_line_of(text, section)}"
            )

    def err(section: str, key: str) -> ConfigError:
        return ConfigError(
            f"{source}: unknown key {section}.{key}{_line_of(text, key)}"
        )

    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key == "protocol":
                cfg.protocol = raw.strip().lower()
            elif key == "duration_s":
                cfg.duration_s = _parse_num("experiment", key, raw)
            elif key == "seed":
                cfg.seed = _parse_num("experiment", key, raw, int)
            elif key == "probe_interval_s":
                cfg.probe_interval_s = _parse_num("experiment", key, raw)
            elif key == "steady_skip_s":
                cfg.steady_skip_s = _parse_num("experiment", key, raw)
            elif key == "granularity_us":
                cfg.granularity_us = _parse_num("experiment", key, raw, int)
            elif key == "trace":
                cfg.trace = _parse_bool("experiment", key, raw)
            elif key == "out":
                cfg.out = raw.strip()
            else:
                raise err("experiment", key)

    if cp.has_section("topology"):
        for key, raw in cp.items("topology"):
            if key == "kind":
                cfg.topology.kind = raw.strip().lower()
            elif key in ("n", "width", "height", "arity", "depth", "root"):
                setattr(cfg.topology, key, _parse_num("topology", key, raw, int))
            elif key == "path":
                cfg.topology.path = raw.strip()
            else:
                raise err("topology", key)

    proto_kw = {}
    if cp.has_section("protocol"):
        numeric = {
            "t_b_s": float,
            "n_broadcasts": int,
            "intra_round_gap_ms": float,
            "holdoff_min_ms": float,
            "holdoff_max_ms": float,
            "d_fixed_hat_us": float,
            "root_timeout_rounds": int,
            "regression_table": int,
            "pi_alpha": float,
            "pi_beta": float,
            "pi_spike_guard_us": float,
            "pi_clamp_us": float,
            "slope_guard_us": float,
            "table_reset_us": float,
            "slope_min_entries": int,
        }
        for key, raw in cp.items("protocol"):
            if key in numeric:
                proto_kw[key] = _parse_num("protocol", key, raw, numeric[key])
            elif key == "external_clock":
                proto_kw[key] = _parse_bool("protocol", key, raw)
            else:
                raise err("protocol", key)
    try:
        cfg.proto = ProtocolConfig(**proto_kw)
    except ValueError as exc:
        raise ConfigError(f"protocol: {exc}") from None

    if cp.has_section("delay"):
        for key, raw in cp.items("delay"):
            if key == "preset":
                delay_preset_name = raw.strip().lower()
            elif key in ("d_fixed_us", "d_sigma2_us2", "p_unc", "unc_min_us",
                         "unc_max_us", "loss_prob"):
                field_name = {
                    "d_fixed_us": "d_fixed",
                    "d_sigma2_us2": "d_sigma2",
                    "p_unc": "p_unc",
                    "unc_min_us": "unc_min",
                    "unc_max_us": "unc_max",
                    "loss_prob": "loss_prob",
                }[key]
                delay_overrides[field_name] = _parse_num("delay", key, raw)
            else:
                raise err("delay", key)
    try:
        if delay_preset_name is not None:
            cfg.delay_preset = delay_preset_name
            cfg.delay = preset(delay_preset_name, **delay_overrides)
        elif delay_overrides:
            cfg.delay = preset("equal", **delay_overrides)
    except ValueError as exc:
        raise ConfigError(f"delay: {exc}") from None

    if cp.has_section("drift"):
        for key, raw in cp.items("drift"):
            if key == "ppm_min":
                cfg.drift.ppm_min = _parse_num("drift", key, raw)
            elif key == "ppm_max":
                cfg.drift.ppm_max = _parse_num("drift", key, raw)
            elif key == "offset_max_us":
                cfg.drift.offset_max_us = _parse_num("drift", key, raw, int)
            elif key == "wander_ppm_per_min":
                cfg.drift.wander_ppm_per_min = _parse_num("drift", key, raw)
            elif key == "wander_bound_ppm":
                cfg.drift.wander_bound_ppm = _parse_num("drift", key, raw)
            elif key == "node_ppm":
                cfg.drift.node_ppm = _parse_node_map("drift", key, raw, float)
            elif key == "node_offset_us":
                cfg.drift.node_offset_us = _parse_node_map("drift", key, raw, int)
            else:
                raise err("drift", key)

    if cp.has_section("faults"):
        for key, raw in cp.items("faults"):
            cfg.faults.append(_parse_fault(key, raw))
        cfg.faults.sort(key=lambda f: f.t_s)

    if cp.has_section("sweep"):
        for key, raw in cp.items("sweep"):
            if key == "t_b_s":
                cfg.sweep_t_b_s = [
                    _parse_num("sweep", key, tok) for tok in raw.split(",") if tok.strip()
                ]
            elif key == "protocols":
                cfg.sweep_protocols = [
                    tok.strip().lower() for tok in raw.split(",") if tok.strip()
                ]
            else:
                raise err("sweep", key)

    cfg.validate()
    return cfg


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with io.open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=path, overrides=overrides)

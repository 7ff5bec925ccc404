"""Scenario files (JSON, ``schema_version`` 1) and their validation.

Validation errors carry the key path of the offending value, e.g.
``attacks[0].rate: must be > 0``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from cids.rules import RuleLoadError, Ruleset, load_ruleset
from cids.siem import DEFAULT_QUOTA, DEFAULT_RETENTION_DAYS
from cids.syslog import SYSLOG_PORT, ForwarderConfig

SCHEMA_VERSION = 1
ATTACK_KINDS = ("port_scan", "icmp_flood", "dns_enum")
LABEL_KINDS = ("benign",) + ATTACK_KINDS

# sid -> the attack class a rule is written to catch
DEFAULT_INTENT = {
    100001: "icmp_flood",
    10000001: "icmp_flood",
    10000005: "port_scan",
    100010: "dns_enum",
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class TopologyConfig:
    sensors: int = 9
    lan_mode: str = "switched"
    latency: float = 0.0
    promiscuous: bool | list[str] = False   # True, False, or the sensor names in promiscuous mode

    def is_promiscuous(self, node: str) -> bool:
        if isinstance(self.promiscuous, bool):
            return self.promiscuous
        return node in self.promiscuous


@dataclass
class AttackConfig:
    kind: str
    targets: list[str]
    rate: float
    duration: float | None = None
    start: float = 0.0
    src: str = "attacker"
    params: dict[str, Any] = field(default_factory=dict)
    id: str | None = None


@dataclass
class BenignConfig:
    rate: float = 0.0
    duration: float = 60.0
    start: float = 0.0
    hosts: list[str] | None = None     # endpoint names; default = all sensors
    sub_threshold: bool = True


@dataclass
class ForwarderSettings:
    transport: str = "tcp"
    port: int = SYSLOG_PORT
    rate_limit: dict[str, float] | None = None     # {"interval": s, "burst": n}
    udp_drop_probability: float = 0.0

    def build(self, dest_ip: str) -> ForwarderConfig:
        rl = None
        if self.rate_limit is not None:
            rl = (float(self.rate_limit["interval"]), int(self.rate_limit["burst"]))
        return ForwarderConfig(dest_ip, self.transport, self.port, rl, self.udp_drop_probability)


@dataclass
class SiemSettings:
    correlation_window: float = 60.0
    min_nodes: int = 3
    daily_quota_bytes: int = DEFAULT_QUOTA
    retention_days: float = DEFAULT_RETENTION_DAYS
    batch_size: int = 200


@dataclass
class ScenarioSpec:
    id: str
    seed: int
    rules: list[str]
    description: str = ""
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    attacks: list[AttackConfig] = field(default_factory=list)
    benign: BenignConfig = field(default_factory=BenignConfig)
    forwarder: ForwarderSettings = field(default_factory=ForwarderSettings)
    siem: SiemSettings = field(default_factory=SiemSettings)
    intent: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_INTENT))
    classtypes: dict[str, int] | None = None
    trace: bool = True
    mirror_alerts: bool = False

    @property
    def ruleset(self) -> Ruleset:
        return load_ruleset(self.rules)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["intent"] = {str(k): v for k, v in self.intent.items()}
        return {"schema_version": SCHEMA_VERSION, **d}


class _Checker:
    def __init__(self):
        self.problems: list[str] = []

    def fail(self, path: str, msg: str) -> None:
        self.problems.append(f"{path}: {msg}")

    def take(self, d: dict, key: str, path: str, types, default=..., check=None, why=""):
        p = f"{path}.{key}" if path else key
        if key not in d:
            if default is ...:
                self.fail(p, "required")
                return None
            return default
        v = d[key]
        if v is None and default is None:
            return None
        if isinstance(v, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            self.fail(p, f"expected {_tname(types)}, got bool")
            return default if default is not ... else None
        if not isinstance(v, types):
            self.fail(p, f"expected {_tname(types)}, got {type(v).__name__}")
            return default if default is not ... else None
        if check is not None and not check(v):
            self.fail(p, why or "invalid value")
        return v

    def unknown(self, d: dict, allowed, path: str) -> None:
        for k in d:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else k, "unknown key")


def _tname(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


_NUM = (int, float)


def scenario_from_dict(d: dict, base_dir: Path | None = None) -> ScenarioSpec:
    c = _Checker()
    if not isinstance(d, dict):
        raise ConfigError(["<root>: expected an object"])
    c.unknown(d, {"schema_version", "id", "seed", "description", "topology", "ruleset",
                  "rules", "attacks", "benign", "forwarder", "siem", "intent",
                  "classtypes", "trace", "mirror_alerts"}, "")
    version = c.take(d, "schema_version", "", int)
    if version is not None and version != SCHEMA_VERSION:
        c.fail("schema_version", f"unsupported version {version}")
    sid = c.take(d, "id", "", str, check=bool, why="must be non-empty")
    seed = c.take(d, "seed", "", int)

    topo_d = c.take(d, "topology", "", dict, {})
    c.unknown(topo_d, {"sensors", "lan_mode", "latency", "promiscuous"}, "topology")
    topo = TopologyConfig(
        sensors=c.take(topo_d, "sensors", "topology", int, 9, lambda v: 1 <= v <= 154,
                       "must be within 1..154"),
        lan_mode=c.take(topo_d, "lan_mode", "topology", str, "switched",
                        lambda v: v in ("switched", "hub"), "must be 'switched' or 'hub'"),
        latency=float(c.take(topo_d, "latency", "topology", _NUM, 0.0, lambda v: v >= 0,
                             "must be >= 0") or 0.0),
        promiscuous=c.take(topo_d, "promiscuous", "topology", (bool, list), False),
    )
    sensor_names = {f"node{i}" for i in range(1, (topo.sensors or 0) + 1)}
    endpoint_names = sensor_names | {"attacker", "central", "gateway"}
    if isinstance(topo.promiscuous, list):
        for i, n in enumerate(topo.promiscuous):
            if n not in sensor_names:
                c.fail(f"topology.promiscuous[{i}]", f"unknown sensor {n!r}")

    rules: list[str] = []
    if "rules" in d and "ruleset" in d:
        c.fail("ruleset", "give either 'ruleset' (file) or 'rules' (inline), not both")
    elif "rules" in d:
        rules = c.take(d, "rules", "", list, []) or []
    elif "ruleset" in d:
        ref = c.take(d, "ruleset", "", str)
        if ref is not None:
            path = Path(ref) if base_dir is None else (base_dir / ref)
            try:
                rules = path.read_text(encoding="utf-8").splitlines()
            except OSError as e:
                c.fail("ruleset", f"cannot read {path}: {e.strerror}")
    else:
        c.fail("ruleset", "required")
    try:
        load_ruleset(rules)
    except RuleLoadError as e:
        c.fail("ruleset", str(e))

    attacks = []
    for i, a in enumerate(c.take(d, "attacks", "", list, []) or []):
        p = f"attacks[{i}]"
        if not isinstance(a, dict):
            c.fail(p, "expected an object")
            continue
        c.unknown(a, {"kind", "targets", "rate", "duration", "start", "src", "params", "id"}, p)
        kind = c.take(a, "kind", p, str, check=lambda v: v in ATTACK_KINDS,
                      why=f"must be one of {', '.join(ATTACK_KINDS)}")
        targets = c.take(a, "targets", p, list, check=bool, why="must be non-empty") or []
        for j, t in enumerate(targets):
            if t not in endpoint_names:
                c.fail(f"{p}.targets[{j}]", f"unknown endpoint {t!r}")
        src = c.take(a, "src", p, str, "attacker")
        if src not in endpoint_names:
            c.fail(f"{p}.src", f"unknown endpoint {src!r}")
        rate = c.take(a, "rate", p, _NUM, check=lambda v: v > 0, why="must be > 0")
        duration = c.take(a, "duration", p, _NUM, None, lambda v: v > 0, "must be > 0")
        if kind == "icmp_flood" and duration is None:
            c.fail(f"{p}.duration", "required for icmp_flood")
        params = c.take(a, "params", p, dict, {})
        if kind == "port_scan" and "ports" not in (params or {}):
            c.fail(f"{p}.params.ports", "required for port_scan")
        if kind == "dns_enum":
            n = (params or {}).get("n_names")
            if not isinstance(n, int) or n < 1:
                c.fail(f"{p}.params.n_names", "must be an integer >= 1")
        attacks.append(AttackConfig(
            kind=kind, targets=targets, rate=rate, duration=duration,
            start=float(c.take(a, "start", p, _NUM, 0.0, lambda v: v >= 0, "must be >= 0")),
            src=src, params=params or {}, id=c.take(a, "id", p, str, None)))
    ids = [a.id for a in attacks if a.id]
    if len(ids) != len(set(ids)):
        c.fail("attacks", "attack ids must be unique")

    b = c.take(d, "benign", "", dict, {})
    c.unknown(b, {"rate", "duration", "start", "hosts", "sub_threshold"}, "benign")
    benign = BenignConfig(
        rate=float(c.take(b, "rate", "benign", _NUM, 0.0, lambda v: v >= 0, "must be >= 0")),
        duration=float(c.take(b, "duration", "benign", _NUM, 60.0, lambda v: v > 0, "must be > 0")),
        start=float(c.take(b, "start", "benign", _NUM, 0.0, lambda v: v >= 0, "must be >= 0")),
        hosts=c.take(b, "hosts", "benign", list, None),
        sub_threshold=c.take(b, "sub_threshold", "benign", bool, True),
    )
    for j, h in enumerate(benign.hosts or []):
        if h not in endpoint_names:
            c.fail(f"benign.hosts[{j}]", f"unknown endpoint {h!r}")

    f = c.take(d, "forwarder", "", dict, {})
    c.unknown(f, {"transport", "port", "rate_limit", "udp_drop_probability"}, "forwarder")
    rl = c.take(f, "rate_limit", "forwarder", (dict, type(None)), None)
    if rl is not None:
        c.unknown(rl, {"interval", "burst"}, "forwarder.rate_limit")
        c.take(rl, "interval", "forwarder.rate_limit", _NUM, check=lambda v: v > 0,
               why="must be > 0")
        c.take(rl, "burst", "forwarder.rate_limit", int, check=lambda v: v >= 1,
               why="must be >= 1")
    fwd = ForwarderSettings(
        transport=c.take(f, "transport", "forwarder", str, "tcp",
                         lambda v: v in ("tcp", "udp"), "must be 'tcp' or 'udp'"),
        port=c.take(f, "port", "forwarder", int, SYSLOG_PORT, lambda v: 0 < v <= 65535,
                    "must be within 1..65535"),
        rate_limit=rl,
        udp_drop_probability=float(c.take(f, "udp_drop_probability", "forwarder", _NUM, 0.0,
                                          lambda v: 0 <= v <= 1, "must be within [0, 1]")),
    )

    s = c.take(d, "siem", "", dict, {})
    c.unknown(s, {"correlation_window", "min_nodes", "daily_quota_bytes", "retention_days",
                  "batch_size"}, "siem")
    siem = SiemSettings(
        correlation_window=float(c.take(s, "correlation_window", "siem", _NUM, 60.0,
                                        lambda v: v > 0, "must be > 0")),
        min_nodes=c.take(s, "min_nodes", "siem", int, 3, lambda v: v >= 2, "must be >= 2"),
        daily_quota_bytes=c.take(s, "daily_quota_bytes", "siem", int, DEFAULT_QUOTA,
                                 lambda v: v >= 0, "must be >= 0"),
        retention_days=float(c.take(s, "retention_days", "siem", _NUM, DEFAULT_RETENTION_DAYS,
                                    lambda v: v > 0, "must be > 0")),
        batch_size=c.take(s, "batch_size", "siem", int, 200, lambda v: v >= 1, "must be >= 1"),
    )

    intent = dict(DEFAULT_INTENT)
    for k, v in (c.take(d, "intent", "", dict, {}) or {}).items():
        try:
            key = int(k)
        except ValueError:
            c.fail(f"intent.{k}", "keys must be sids")
            continue
        if v not in ATTACK_KINDS:
            c.fail(f"intent.{k}", f"must be one of {', '.join(ATTACK_KINDS)}")
        intent[key] = v

    classtypes = c.take(d, "classtypes", "", dict, None)
    if c.problems:
        raise ConfigError(c.problems)
    return ScenarioSpec(
        id=sid, seed=seed, rules=rules, description=d.get("description", ""),
        topology=topo, attacks=attacks, benign=benign, forwarder=fwd, siem=siem,
        intent=intent, classtypes=classtypes,
        trace=c.take(d, "trace", "", bool, True),
        mirror_alerts=c.take(d, "mirror_alerts", "", bool, False),
    )


def load_scenario(path: str | Path, seed: int | None = None) -> ScenarioSpec:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError([f"<file>: cannot read {path}: {e.strerror}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"<file>: invalid JSON at line {e.lineno} col {e.colno}: {e.msg}"]) from None
    spec = scenario_from_dict(d, path.parent)
    if seed is not None:
        spec.seed = seed
    return spec

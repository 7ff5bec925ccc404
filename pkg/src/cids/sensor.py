"""Per-node IDS sensor: rule evaluation over delivered packets and alert formatting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

from cids.netsim import CENTRAL_IP, US_PER_S, Endpoint
from cids.rules import DetectionFilterState, Ruleset
from cids.traffic import GroundTruthLabel, PacketRecord

LOCAL7 = 23
SEVERITY_ALERT = 1

# Subset of Snort's stock classification.config; unknown classtypes get DEFAULT_PRIORITY.
CLASSTYPE_PRIORITY = {
    "not-suspicious": 3,
    "unknown": 3,
    "bad-unknown": 2,
    "attempted-recon": 2,
    "successful-recon-limited": 2,
    "successful-recon-largescale": 2,
    "attempted-dos": 2,
    "successful-dos": 2,
    "denial-of-service": 2,
    "network-scan": 3,
    "misc-activity": 3,
    "icmp-event": 3,
    "policy-violation": 1,
    "trojan-activity": 1,
    "attempted-admin": 1,
}
DEFAULT_PRIORITY = 2


@dataclass
class SensorConfig:
    node: Endpoint
    ruleset: Ruleset
    promiscuous: bool = False
    syslog_facility: int = LOCAL7
    syslog_severity: int = SEVERITY_ALERT
    forward_to: str = CENTRAL_IP
    pid: int = 812
    classtypes: dict[str, int] = field(default_factory=lambda: dict(CLASSTYPE_PRIORITY))


@dataclass(slots=True)
class Alert:
    ts_us: int
    node: str
    gid: int
    sid: int
    rev: int
    msg: str
    classtype: str | None
    proto: str
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    packet_id: int = -1
    attack_label: GroundTruthLabel | None = None   # scoring only; never on the wire

    @property
    def ts(self) -> float:
        return self.ts_us / US_PER_S

    def to_dict(self) -> dict:
        return {"ts_us": self.ts_us, "node": self.node, "gid": self.gid, "sid": self.sid,
                "rev": self.rev, "msg": self.msg, "classtype": self.classtype,
                "proto": self.proto, "src_ip": self.src_ip, "src_port": self.src_port,
                "dst_ip": self.dst_ip, "dst_port": self.dst_port, "packet_id": self.packet_id}


def format_alert(a: Alert, classtypes: dict[str, int] | None = None) -> str:
    """``[gid:sid:rev] "msg" [Classification: c] [Priority: p] {PROTO} src -> dst``."""
    head = f'[{a.gid}:{a.sid}:{a.rev}] "{a.msg}"'
    if a.classtype is not None:
        table = CLASSTYPE_PRIORITY if classtypes is None else classtypes
        prio = table.get(a.classtype, DEFAULT_PRIORITY)
        head += f" [Classification: {a.classtype}] [Priority: {prio}]"
    if a.proto in ("TCP", "UDP"):
        return f"{head} {{{a.proto}}} {a.src_ip}:{a.src_port} -> {a.dst_ip}:{a.dst_port}"
    return f"{head} {{{a.proto}}} {a.src_ip} -> {a.dst_ip}"


class Sensor:
    def __init__(self, config: SensorConfig, mirror: IO[str] | None = None):
        self.config = config
        self.state = DetectionFilterState()
        self.packets_seen = 0
        self.alerts_emitted = 0
        self._mirror = mirror

    @property
    def name(self) -> str:
        return self.config.node.name

    def accepts(self, pkt: PacketRecord) -> bool:
        """NIC filter: own unicast traffic, or everything when promiscuous."""
        return self.config.promiscuous or pkt.dst_ip == self.config.node.ip

    def process(self, pkt: PacketRecord, now_us: int | None = None) -> list[Alert]:
        """Alerts for one packet, in ruleset order. ``now_us`` is the arrival time
        (defaults to the packet timestamp)."""
        self.packets_seen += 1
        ts = pkt.ts_us if now_us is None else now_us
        out = []
        for rule in self.config.ruleset.evaluate(pkt, self.state, ts):
            a = Alert(ts, self.name, rule.gid, rule.sid, rule.rev, rule.msg,
                      rule.classtype, pkt.proto, pkt.src_ip, pkt.src_port, pkt.dst_ip,
                      pkt.dst_port, pkt.id, pkt.label)
            out.append(a)
            if self._mirror is not None:
                self._mirror.write(json.dumps(a.to_dict()) + "\n")
        self.alerts_emitted += len(out)
        return out

    def format(self, a: Alert) -> str:
        return format_alert(a, self.config.classtypes)


def open_mirror(run_dir: Path, node: str) -> IO[str]:
    d = run_dir / "snort"
    d.mkdir(parents=True, exist_ok=True)
    return open(d / f"{node}.alerts.ndjson", "w", encoding="utf-8")

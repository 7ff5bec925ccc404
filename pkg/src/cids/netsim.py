"""Deterministic virtual LAN: clock, endpoints, switch/hub delivery and egress firewall.

All times inside the simulator are integer microseconds. Public helpers accept
seconds and convert with :func:`to_us`.
"""
from __future__ import annotations

import heapq
import ipaddress
import itertools
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from fnmatch import fnmatchcase
from functools import lru_cache
from json.encoder import encode_basestring as _q
from typing import Any, Callable, Iterable

US_PER_S = 1_000_000

LAN_NETWORK = ipaddress.IPv4Network("192.168.1.0/24")
GATEWAY_IP = "192.168.1.1"
CENTRAL_IP = "192.168.1.13"
ATTACKER_IP = "192.168.1.66"
FIRST_SENSOR_HOST = 101

SIEM_HOSTNAME = "cloud.community.humio.com"
SIEM_IP = "198.51.100.10"
SIEM_PORT = 443

ROLES = ("sensor", "central", "attacker", "siem", "gateway")

# Wall-clock instant corresponding to virtual time zero (naive, UTC).
EPOCH = datetime(2024, 3, 18, 9, 0, 0)


def _num(v: int | None) -> str:
    return "null" if v is None else str(v)


@lru_cache(maxsize=65536)
def parse_ip(ip: str) -> ipaddress.IPv4Address:
    return ipaddress.IPv4Address(ip)


def to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def to_s(us: int) -> float:
    return us / US_PER_S


def wallclock(us: int) -> datetime:
    return EPOCH + timedelta(microseconds=us)


def virtual_us(dt: datetime) -> int:
    return (dt - EPOCH) // timedelta(microseconds=1)


class VirtualClock:
    """Monotone virtual clock in microseconds."""

    __slots__ = ("now_us",)

    def __init__(self, now_us: int = 0):
        if now_us < 0:
            raise ValueError("clock cannot start before zero")
        self.now_us = now_us

    @property
    def now(self) -> float:
        return self.now_us / US_PER_S

    def step_to(self, t_us: int) -> None:
        if t_us < self.now_us:
            raise ValueError(f"clock cannot move backwards ({t_us} < {self.now_us})")
        self.now_us = t_us


@dataclass(frozen=True)
class Endpoint:
    name: str
    ip: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown endpoint role {self.role!r}")
        ipaddress.IPv4Address(self.ip)


def default_endpoints(n_sensors: int = 9) -> list[Endpoint]:
    """Fixed addressing plan: gateway .1, central .13, attacker .66, sensors from .101."""
    if not 1 <= n_sensors <= 254 - FIRST_SENSOR_HOST + 1:
        raise ValueError(f"n_sensors out of range: {n_sensors}")
    eps = [
        Endpoint("gateway", GATEWAY_IP, "gateway"),
        Endpoint("central", CENTRAL_IP, "central"),
        Endpoint("attacker", ATTACKER_IP, "attacker"),
    ]
    eps += [
        Endpoint(f"node{i}", f"192.168.1.{FIRST_SENSOR_HOST + i - 1}", "sensor")
        for i in range(1, n_sensors + 1)
    ]
    return eps


class LanSegment:
    """One broadcast domain. ``switched`` delivers unicast to the destination only,
    ``hub`` floods every frame to all endpoints but the sender."""

    def __init__(self, endpoints: Iterable[Endpoint], mode: str = "switched",
                 latency: float = 0.0, network: ipaddress.IPv4Network = LAN_NETWORK):
        if mode not in ("switched", "hub"):
            raise ValueError(f"unknown LAN mode {mode!r}")
        if latency < 0:
            raise ValueError("latency must be >= 0")
        self.mode = mode
        self.latency_us = to_us(latency)
        self.network = network
        self.endpoints: list[Endpoint] = []
        self.by_ip: dict[str, Endpoint] = {}
        self.by_name: dict[str, Endpoint] = {}
        self._on_lan: dict[str, bool] = {}
        for ep in endpoints:
            self.add(ep)

    def add(self, ep: Endpoint) -> None:
        if ep.ip in self.by_ip:
            raise ValueError(f"duplicate ip {ep.ip} ({self.by_ip[ep.ip].name}, {ep.name})")
        if ep.name in self.by_name:
            raise ValueError(f"duplicate endpoint name {ep.name!r}")
        if ep.role in ("sensor", "central", "attacker") and not self.on_lan(ep.ip):
            raise ValueError(f"{ep.name} ({ep.ip}) must be inside {self.network}")
        self.endpoints.append(ep)
        self.by_ip[ep.ip] = ep
        self.by_name[ep.name] = ep

    def on_lan(self, ip: str) -> bool:
        hit = self._on_lan.get(ip)
        if hit is None:
            hit = self._on_lan[ip] = parse_ip(ip) in self.network
        return hit

    def resolve(self, name_or_ip: str) -> Endpoint:
        ep = self.by_name.get(name_or_ip) or self.by_ip.get(name_or_ip)
        if ep is None:
            raise KeyError(name_or_ip)
        return ep


def deliver(packet, lan: LanSegment) -> list[Endpoint]:
    """Endpoints that physically receive ``packet`` (sorted by name).

    Self-addressed packets stay on the host's loopback and reach nobody."""
    parse_ip(packet.src_ip)
    parse_ip(packet.dst_ip)
    if packet.src_ip == packet.dst_ip:
        return []
    if lan.mode == "hub":
        return sorted((ep for ep in lan.endpoints if ep.ip != packet.src_ip),
                      key=lambda e: e.name)
    dst = lan.by_ip.get(packet.dst_ip)
    return [dst] if dst is not None else []


@dataclass
class EgressRule:
    host: str                # hostname, IP, or fnmatch pattern over either
    port: int | None = None  # None = any port


@dataclass
class FirewallPolicy:
    egress_allow: list[EgressRule] = field(default_factory=list)
    hosts: dict[str, str] = field(default_factory=dict)  # hostname -> ip
    drops: int = 0
    drop_log: list[dict] = field(default_factory=list)

    def _names_for(self, ip: str) -> list[str]:
        return [ip] + [h for h, a in self.hosts.items() if a == ip]

    def allows(self, dst_ip: str, dst_port: int) -> bool:
        names = self._names_for(dst_ip)
        for rule in self.egress_allow:
            if rule.port is not None and rule.port != dst_port:
                continue
            if any(fnmatchcase(n, rule.host) for n in names):
                return True
        return False


def default_policy() -> FirewallPolicy:
    return FirewallPolicy(egress_allow=[EgressRule(SIEM_HOSTNAME, None)],
                          hosts={SIEM_HOSTNAME: SIEM_IP})


def egress_check(packet, policy: FirewallPolicy, ts_us: int | None = None) -> str:
    """``"allow"`` or ``"drop"`` for an off-LAN packet. Sources are not inspected."""
    if policy.allows(packet.dst_ip, packet.dst_port):
        return "allow"
    policy.drops += 1
    policy.drop_log.append({
        "t": packet.ts_us if ts_us is None else ts_us,
        "proto": packet.proto, "src": packet.src_ip, "sport": packet.src_port,
        "dst": packet.dst_ip, "dport": packet.dst_port,
    })
    return "drop"


@dataclass(frozen=True, slots=True)
class Frame:
    """A log-transport unit (syslog line or SIEM bulk batch).

    Frames share the LAN and firewall with data-plane packets but are never handed
    to sensors for inspection."""

    ts_us: int
    src_ip: str
    dst_ip: str
    dst_port: int
    transport: str
    data: Any
    proto: str = "TCP"
    src_port: int = 0


@dataclass(slots=True)
class Delivery:
    time_us: int
    sender: str
    seq: int
    kind: str                # "packet" | "frame"
    item: Any
    recipients: list[str]
    outcome: str             # "delivered" | "firewall_drop" | "absent" | "forwarded"

    def trace_line(self) -> str:
        """Compact JSON text of :meth:`trace_record`, built without the encoder."""
        head = (f'{{"t":{self.time_us},"ev":"{self.kind}","seq":{self.seq},'
                f'"from":{_q(self.sender)},"outcome":"{self.outcome}",'
                f'"to":[{",".join(map(_q, self.recipients))}],')
        if self.kind == "packet":
            p = self.item
            lab = p.label
            return (head + f'"pkt":{{"id":{p.id},"ts_us":{p.ts_us},"proto":"{p.proto}",'
                    f'"src_ip":{_q(p.src_ip)},"src_port":{p.src_port},'
                    f'"dst_ip":{_q(p.dst_ip)},"dst_port":{p.dst_port},'
                    f'"tcp_flags":[{",".join(map(_q, p.tcp_flags))}],'
                    f'"icmp_type":{_num(p.icmp_type)},"payload":"{p.payload.hex()}",'
                    f'"label":{_q(lab.kind)},'
                    f'"attack_id":{"null" if lab.attack_id is None else _q(lab.attack_id)}}}}}')
        f = self.item
        size = len(f.data) if isinstance(f.data, (bytes, str)) else None
        return head + (f'"frame":{{"dst":{_q(f.dst_ip)},"dport":{f.dst_port},'
                       f'"transport":{_q(f.transport)},"bytes":{_num(size)}}}}}')

    def trace_record(self) -> dict:
        rec: dict[str, Any] = {"t": self.time_us, "ev": self.kind, "seq": self.seq,
                               "from": self.sender, "outcome": self.outcome,
                               "to": self.recipients}
        if self.kind == "packet":
            rec["pkt"] = self.item.to_dict()
        else:
            f = self.item
            rec["frame"] = {"dst": f.dst_ip, "dport": f.dst_port, "transport": f.transport,
                            "bytes": len(f.data) if isinstance(f.data, (bytes, str)) else None}
        return rec


@dataclass
class NetCounters:
    packets_generated: int = 0
    packets_delivered: int = 0
    packets_dropped_by_firewall: int = 0
    packets_to_absent_endpoints: int = 0
    frames_sent: int = 0
    frames_delivered: int = 0
    frames_dropped: int = 0

    def conserved(self) -> bool:
        return (self.packets_generated == self.packets_delivered
                + self.packets_dropped_by_firewall + self.packets_to_absent_endpoints
                and self.frames_sent == self.frames_delivered + self.frames_dropped)


class Network:
    """Single-threaded event loop over one LAN segment plus the egress firewall.

    Handlers registered with :meth:`on_packet`/:meth:`on_frame` run synchronously as
    events are drained and may schedule further events.
    """

    def __init__(self, lan: LanSegment, policy: FirewallPolicy | None = None,
                 clock: VirtualClock | None = None,
                 trace: Callable[[Delivery], None] | None = None):
        self.lan = lan
        self.policy = policy if policy is not None else default_policy()
        self.clock = clock if clock is not None else VirtualClock()
        self.counters = NetCounters()
        self._queue: list = []
        self._seq = itertools.count()
        self._packet_handler: Callable[[Delivery], None] | None = None
        self._frame_handlers: dict[str, Callable[[Delivery], None]] = {}
        self._trace = trace

    def on_packet(self, handler: Callable[[Delivery], None]) -> None:
        self._packet_handler = handler

    def on_frame(self, ip: str, handler: Callable[[Delivery], None]) -> None:
        self._frame_handlers[ip] = handler

    def _sender_name(self, ip: str) -> str:
        ep = self.lan.by_ip.get(ip)
        return ep.name if ep is not None else ip

    def _push(self, at_us: int, sender: str, kind: str, item) -> None:
        if at_us < self.clock.now_us:
            raise ValueError(f"cannot schedule in the past ({at_us} < {self.clock.now_us})")
        heapq.heappush(self._queue, (at_us, sender, next(self._seq), kind, item))

    def send_packet(self, packet) -> None:
        self.counters.packets_generated += 1
        self._push(packet.ts_us + self.lan.latency_us, self._sender_name(packet.src_ip),
                   "packet", packet)

    def send_packets(self, packets: Iterable) -> None:
        for p in packets:
            self.send_packet(p)

    def send_frame(self, frame: Frame) -> None:
        self.counters.frames_sent += 1
        self._push(frame.ts_us + self.lan.latency_us, self._sender_name(frame.src_ip),
                   "frame", frame)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def _dispatch(self, at_us, sender, seq, kind, item) -> Delivery:
        c = self.counters
        if kind == "packet":
            if self.lan.on_lan(item.dst_ip):
                eps = deliver(item, self.lan)
                if item.dst_ip in self.lan.by_ip:
                    outcome = "delivered"
                    c.packets_delivered += 1
                else:
                    outcome = "absent"
                    c.packets_to_absent_endpoints += 1
            else:
                eps = []
                if egress_check(item, self.policy, at_us) == "allow":
                    outcome = "forwarded"
                    c.packets_delivered += 1
                else:
                    outcome = "firewall_drop"
                    c.packets_dropped_by_firewall += 1
            d = Delivery(at_us, sender, seq, kind, item, [e.name for e in eps], outcome)
            if self._trace:
                self._trace(d)
            if self._packet_handler and eps:
                self._packet_handler(d)
            return d
        # frames: unicast only, no flooding of log traffic
        if self.lan.on_lan(item.dst_ip):
            ok = item.dst_ip in self.lan.by_ip
            outcome = "delivered" if ok else "absent"
            recips = [self.lan.by_ip[item.dst_ip].name] if ok else []
        else:
            ok = egress_check(item, self.policy, at_us) == "allow"
            outcome = "forwarded" if ok else "firewall_drop"
            recips = [item.dst_ip] if ok else []
        if ok:
            c.frames_delivered += 1
        else:
            c.frames_dropped += 1
        d = Delivery(at_us, sender, seq, kind, item, recips, outcome)
        if self._trace:
            self._trace(d)
        handler = self._frame_handlers.get(item.dst_ip)
        if ok and handler is not None:
            handler(d)
        return d

    def run_until(self, t_us: int) -> list[Delivery]:
        """Drain every event with time <= ``t_us`` (including ones scheduled while
        draining), then set the clock to ``t_us``."""
        out = []
        q = self._queue
        while q and q[0][0] <= t_us:
            at_us, sender, seq, kind, item = heapq.heappop(q)
            self.clock.step_to(at_us)
            out.append(self._dispatch(at_us, sender, seq, kind, item))
        self.clock.step_to(t_us)
        return out

    def advance(self, dt: float) -> list[Delivery]:
        """Advance by ``dt`` seconds; returns the deliveries made, in (time, sender, seq) order."""
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        return self.run_until(self.clock.now_us + to_us(dt))

    def run_all(self) -> None:
        while self._queue:
            self.run_until(self._queue[0][0])

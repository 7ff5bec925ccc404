"""Labeled traffic generators: Nmap-style SYN scans, hping3-style ICMP floods,
DNS enumeration bursts and benign background chatter.

Every generator is a pure function of its spec (and seed, where randomness is
involved) and returns packets in non-decreasing timestamp order.

DNS payload layout (both directions)::

    offset 0-1  transaction id, big-endian
    offset 2    rcode (0 for queries, 3 = NXDOMAIN)
    offset 3    flags: 0x00 query, 0x80 response
    offset 4..  query name, ASCII
"""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from cids.netsim import US_PER_S, to_us

KINDS = ("benign", "port_scan", "icmp_flood", "dns_enum")
PROTOS = ("TCP", "UDP", "ICMP")
TCP_FLAGS = ("SYN", "ACK", "FIN", "RST")

DNS_RCODE_OFFSET = 2
DNS_FLAGS_OFFSET = 3
NXDOMAIN = 3
SCAN_SRC_PORT = 40000
ICMP_ECHO_REQUEST = 8
ICMP_ECHO_REPLY = 0


@dataclass(frozen=True)
class GroundTruthLabel:
    kind: str
    attack_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown label kind {self.kind!r}")
        if (self.kind == "benign") != (self.attack_id is None):
            raise ValueError("benign labels carry no attack_id; attack labels require one")


BENIGN = GroundTruthLabel("benign")


@dataclass(slots=True)
class PacketRecord:
    ts_us: int
    proto: str
    src_ip: str
    dst_ip: str
    src_port: int = 0
    dst_port: int = 0
    tcp_flags: tuple[str, ...] = ()
    icmp_type: int | None = None
    payload: bytes = b""
    label: GroundTruthLabel = BENIGN
    id: int = -1

    def __post_init__(self):
        if self.ts_us < 0:
            raise ValueError("ts must be non-negative")
        if self.proto == "ICMP":
            if self.src_port or self.dst_port:
                raise ValueError("ICMP packets carry no ports")
            if self.icmp_type is None:
                raise ValueError("ICMP packets need an icmp_type")
        elif self.proto in ("TCP", "UDP"):
            if self.icmp_type is not None:
                raise ValueError(f"{self.proto} packets carry no icmp_type")
            if not (0 <= self.src_port <= 65535 and 0 <= self.dst_port <= 65535):
                raise ValueError("port out of range")
            if self.proto == "UDP" and self.tcp_flags:
                raise ValueError("UDP packets carry no TCP flags")
        else:
            raise ValueError(f"unknown proto {self.proto!r}")

    @property
    def ts(self) -> float:
        return self.ts_us / US_PER_S

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id, "ts_us": self.ts_us, "proto": self.proto,
            "src_ip": self.src_ip, "src_port": self.src_port,
            "dst_ip": self.dst_ip, "dst_port": self.dst_port,
            "tcp_flags": list(self.tcp_flags), "icmp_type": self.icmp_type,
            "payload": self.payload.hex(),
            "label": self.label.kind, "attack_id": self.label.attack_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PacketRecord:
        label = BENIGN if d["label"] == "benign" else GroundTruthLabel(d["label"], d["attack_id"])
        return cls(d["ts_us"], d["proto"], d["src_ip"], d["dst_ip"], d["src_port"],
                   d["dst_port"], tuple(d["tcp_flags"]), d["icmp_type"],
                   bytes.fromhex(d["payload"]), label, d.get("id", -1))


@dataclass
class AttackSpec:
    kind: str
    src_ip: str
    targets: list[str]          # target IPs (names are resolved by the harness)
    rate: float                 # packets/s (names/s for dns_enum)
    duration: float | None = None
    start: float = 0.0
    attack_id: str = "attack-0"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS or self.kind == "benign":
            raise ValueError(f"not an attack kind: {self.kind!r}")
        if not self.targets:
            raise ValueError("attack needs at least one target")
        if self.start < 0:
            raise ValueError("start must be >= 0")

    @property
    def label(self) -> GroundTruthLabel:
        return GroundTruthLabel(self.kind, self.attack_id)


def _exact(x: float) -> Fraction:
    return Fraction(str(x))


def schedule(start: float, rate: float, n: int) -> list[int]:
    """``n`` timestamps (us) spaced 1/rate apart from ``start``, floor-rounded."""
    s = to_us(start)
    r = _exact(rate)
    return [s + (k * US_PER_S * r.denominator) // r.numerator for k in range(n)]


def count_for(rate: float, duration: float) -> int:
    """Packets emitted at ``rate`` over ``duration``: floor(rate * duration)."""
    prod = _exact(rate) * _exact(duration)
    return prod.numerator // prod.denominator


def parse_ports(spec: Any) -> list[int]:
    """Accepts a list of ints, ``"1-1000"``, ``"22,80,443"`` or mixtures."""
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, str):
        out: list[int] = []
        for part in filter(None, (p.strip() for p in spec.split(","))):
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        spec = out
    ports = [int(p) for p in spec]
    bad = [p for p in ports if not 0 <= p <= 65535]
    if bad:
        raise ValueError(f"ports out of range: {bad[:5]}")
    return ports


def gen_port_scan(spec: AttackSpec) -> list[PacketRecord]:
    """One SYN per (port, target), ports outer so hosts are swept per port."""
    if spec.kind != "port_scan":
        raise ValueError("gen_port_scan needs kind=port_scan")
    if spec.rate <= 0:
        raise ValueError("rate must be > 0")
    ports = parse_ports(spec.params.get("ports", []))
    pairs = [(p, t) for p in ports for t in spec.targets]
    label = spec.label
    sport = int(spec.params.get("src_port", SCAN_SRC_PORT))
    times = schedule(spec.start, spec.rate, len(pairs))
    return [PacketRecord(ts, "TCP", spec.src_ip, dst, sport, port, ("SYN",), None, b"", label)
            for ts, (port, dst) in zip(times, pairs)]


def gen_icmp_flood(spec: AttackSpec) -> list[PacketRecord]:
    """``rate`` echo requests per second to each target for ``duration`` seconds."""
    if spec.kind != "icmp_flood":
        raise ValueError("gen_icmp_flood needs kind=icmp_flood")
    if spec.rate <= 0:
        raise ValueError("rate must be > 0")
    if spec.duration is None or spec.duration <= 0:
        raise ValueError("duration must be > 0")
    icmp_type = int(spec.params.get("icmp_type", ICMP_ECHO_REQUEST))
    payload = bytes(int(spec.params.get("data_size", 0)))
    label = spec.label
    times = schedule(spec.start, spec.rate, count_for(spec.rate, spec.duration))
    return [PacketRecord(ts, "ICMP", spec.src_ip, dst, 0, 0, (), icmp_type, payload, label)
            for ts in times for dst in spec.targets]


def dns_payload(txid: int, rcode: int, response: bool, name: str) -> bytes:
    return (txid & 0xFFFF).to_bytes(2, "big") + bytes([rcode, 0x80 if response else 0x00]) \
        + name.encode("ascii")


def gen_dns_enum(spec: AttackSpec, seed: int = 0) -> list[PacketRecord]:
    """Query/response pairs for ``n_names`` probed names; a fraction answer NXDOMAIN.

    params: n_names (required), nx_fraction (0.9), response_delay seconds (0.0005),
    domain ("corp.local"). Targets act as resolvers, round-robin.
    """
    if spec.kind != "dns_enum":
        raise ValueError("gen_dns_enum needs kind=dns_enum")
    if spec.rate <= 0:
        raise ValueError("rate must be > 0")
    n = int(spec.params.get("n_names", 0))
    if n < 1:
        raise ValueError("n_names must be >= 1")
    frac = float(spec.params.get("nx_fraction", 0.9))
    if not 0.0 <= frac <= 1.0:
        raise ValueError("nx_fraction must be within [0, 1]")
    delay = to_us(float(spec.params.get("response_delay", 0.0005)))
    domain = spec.params.get("domain", "corp.local")
    rng = random.Random(f"dns_enum:{seed}:{spec.attack_id}")
    nx = set(rng.sample(range(n), round(n * frac)))
    label = spec.label
    out = []
    for k, ts in enumerate(schedule(spec.start, spec.rate, n)):
        resolver = spec.targets[k % len(spec.targets)]
        name = f"h{k:05d}.{domain}"
        sport = 33000 + k % 20000
        rcode = NXDOMAIN if k in nx else 0
        out.append(PacketRecord(ts, "UDP", spec.src_ip, resolver, sport, 53, (), None,
                                dns_payload(k, 0, False, name), label))
        out.append(PacketRecord(ts + delay, "UDP", resolver, spec.src_ip, 53, sport, (), None,
                                dns_payload(k, rcode, True, name), label))
    out.sort(key=lambda p: p.ts_us)
    return out


@dataclass
class BenignSpec:
    rate: float = 0.0
    duration: float = 60.0
    start: float = 0.0
    hosts: list[str] = field(default_factory=list)   # IPs exchanging traffic
    mix: tuple[float, float, float] = (0.6, 0.25, 0.15)  # TCP, UDP, ICMP shares
    sub_threshold: bool = True
    # (count, seconds) pairs that benign ICMP must never exceed per destination/source
    icmp_limits: list[tuple[int, float]] = field(default_factory=lambda: [(150, 3.0)])


_BENIGN_TCP_PORTS = (22, 80, 443, 3306, 8080)
_BENIGN_UDP_PORTS = (53, 123, 161, 514)


def gen_benign(spec: BenignSpec, seed: int) -> list[PacketRecord]:
    """Uniformly spaced background packets between random host pairs."""
    if spec.rate <= 0 or spec.duration <= 0:
        return []
    if len(spec.hosts) < 2:
        raise ValueError("benign traffic needs at least two hosts")
    rng = random.Random(f"benign:{seed}")
    limits = [(c, to_us(s)) for c, s in spec.icmp_limits] if spec.sub_threshold else []
    recent: dict[tuple[str, str], deque] = {}

    def icmp_ok(ts: int, src: str, dst: str) -> bool:
        for c, s_us in limits:
            for key in (("d", dst), ("s", src)):
                win = recent.setdefault(key + (s_us,), deque())
                while win and win[0] <= ts - s_us:
                    win.popleft()
                if len(win) + 1 > c:
                    return False
        return True

    def icmp_note(ts: int, src: str, dst: str) -> None:
        for _, s_us in limits:
            recent[("d", dst, s_us)].append(ts)
            recent[("s", src, s_us)].append(ts)

    tcp_w, udp_w, _ = spec.mix
    out = []
    for ts in schedule(spec.start, spec.rate, count_for(spec.rate, spec.duration)):
        src, dst = rng.sample(spec.hosts, 2)
        u = rng.random()
        eph = rng.randrange(49152, 65536)
        if u >= tcp_w + udp_w and (not limits or icmp_ok(ts, src, dst)):
            if limits:
                icmp_note(ts, src, dst)
            out.append(PacketRecord(ts, "ICMP", src, dst, 0, 0, (), ICMP_ECHO_REQUEST, b"", BENIGN))
        elif u < tcp_w:
            flags = rng.choice((("SYN",), ("ACK",), ("ACK",), ("FIN", "ACK")))
            out.append(PacketRecord(ts, "TCP", src, dst, eph, rng.choice(_BENIGN_TCP_PORTS),
                                    flags, None, b"", BENIGN))
        else:
            # UDP, also used when an ICMP draw would cross a flood threshold
            out.append(PacketRecord(ts, "UDP", src, dst, eph, rng.choice(_BENIGN_UDP_PORTS),
                                    (), None, b"", BENIGN))
    return out


def generate(spec: AttackSpec, seed: int = 0) -> list[PacketRecord]:
    if spec.kind == "port_scan":
        return gen_port_scan(spec)
    if spec.kind == "icmp_flood":
        return gen_icmp_flood(spec)
    return gen_dns_enum(spec, seed)

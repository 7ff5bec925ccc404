"""RFC 3164 style syslog codec, rsyslog-like forwarder and the central receiver.

Wire layout::

    <PRI>Mmm dd hh:mm:ss HOSTNAME TAG[PID]: BODY

PRI = facility * 8 + severity. Over UDP each message is one datagram. Over TCP a
message is one line terminated by ``\\n`` (non-transparent framing); inside the
body a backslash is written as ``\\\\`` and a newline as ``\\n``.
"""
from __future__ import annotations

import random
import re
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from datetime import datetime
from functools import lru_cache
from typing import Callable

from cids.netsim import CENTRAL_IP, EPOCH, Frame, wallclock

MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun",
          "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
SYSLOG_PORT = 514
DEFAULT_SOCKET_PORT = 5514


class SyslogEncodeError(ValueError):
    pass


class SyslogDecodeError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class SyslogMessage:
    facility: int
    severity: int
    timestamp: datetime          # second resolution; the year is not carried on the wire
    hostname: str
    tag: str
    body: str
    pid: int | None = None

    @property
    def pri(self) -> int:
        return self.facility * 8 + self.severity

    def validate(self) -> None:
        if not 0 <= self.facility <= 23:
            raise SyslogEncodeError(f"facility out of range: {self.facility}")
        if not 0 <= self.severity <= 7:
            raise SyslogEncodeError(f"severity out of range: {self.severity}")
        if not self.hostname or any(c.isspace() for c in self.hostname):
            raise SyslogEncodeError(f"bad hostname {self.hostname!r}")
        if not self.tag or any(c in ":[] " or c.isspace() for c in self.tag):
            raise SyslogEncodeError(f"bad tag {self.tag!r}")
        if self.pid is not None and self.pid < 0:
            raise SyslogEncodeError("pid must be >= 0")
        if "\x00" in self.body:
            raise SyslogEncodeError("body contains NUL")
        if self.timestamp.microsecond:
            raise SyslogEncodeError("timestamp must have whole seconds")


def format_timestamp(ts: datetime) -> str:
    return f"{MONTHS[ts.month - 1]} {ts.day:02d} {ts.hour:02d}:{ts.minute:02d}:{ts.second:02d}"


def _escape(body: str) -> str:
    return body.replace("\\", "\\\\").replace("\n", "\\n")


_UNESCAPE = re.compile(r"\\(.)", re.DOTALL)


def _unescape(body: str) -> str:
    return _UNESCAPE.sub(lambda m: "\n" if m.group(1) == "n" else m.group(1), body)


def encode(m: SyslogMessage, transport: str = "udp") -> bytes:
    m.validate()
    tag = m.tag if m.pid is None else f"{m.tag}[{m.pid}]"
    head = f"<{m.pri}>{format_timestamp(m.timestamp)} {m.hostname} {tag}: "
    if transport == "tcp":
        return (head + _escape(m.body) + "\n").encode("utf-8")
    if transport == "udp":
        return (head + m.body).encode("utf-8")
    raise ValueError(f"unknown transport {transport!r}")


_LINE = re.compile(
    r"<(\d{1,3})>([A-Z][a-z]{2}) ([ \d]\d) (\d\d):(\d\d):(\d\d) (\S+) "
    r"([^:\[\]\s]+)(?:\[(\d+)\])?: (.*)\Z",
    re.DOTALL,
)


@lru_cache(maxsize=4096)
def _timestamp(year: int, mon: str, day: str, hh: str, mm: str, ss: str) -> datetime:
    try:
        return datetime(year, MONTHS.index(mon) + 1, int(day), int(hh), int(mm), int(ss))
    except ValueError as e:
        raise SyslogDecodeError(f"bad timestamp: {e}") from None


def decode(data: bytes, transport: str = "udp", year: int = EPOCH.year) -> SyslogMessage:
    """Inverse of :func:`encode`. A single trailing newline is tolerated."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise SyslogDecodeError(f"not UTF-8: {e}") from None
    if text.endswith("\n"):
        text = text[:-1]
    if not text.startswith("<"):
        raise SyslogDecodeError("missing <PRI> prefix")
    m = _LINE.match(text)
    if m is None:
        if re.match(r"<\d{1,3}>", text) is None:
            raise SyslogDecodeError("missing <PRI> prefix")
        raise SyslogDecodeError("malformed header")
    pri = int(m.group(1))
    if pri > 191:
        raise SyslogDecodeError(f"PRI out of range: {pri}")
    mon = m.group(2)
    if mon not in MONTHS:
        raise SyslogDecodeError(f"bad month {mon!r}")
    ts = _timestamp(year, mon, *m.group(3, 4, 5, 6))
    body = m.group(10)
    if transport == "tcp":
        body = _unescape(body)
    if "\x00" in body:
        raise SyslogDecodeError("body contains NUL")
    pid = m.group(9)
    return SyslogMessage(pri // 8, pri % 8, ts, m.group(7), m.group(8), body,
                         int(pid) if pid is not None else None)


@dataclass
class ForwarderConfig:
    dest_ip: str = CENTRAL_IP
    transport: str = "tcp"
    port: int = SYSLOG_PORT
    rate_limit: tuple[float, int] | None = None    # (interval seconds, burst)
    udp_drop_probability: float = 0.0

    def __post_init__(self):
        if self.transport not in ("tcp", "udp"):
            raise ValueError(f"transport must be tcp or udp, not {self.transport!r}")
        if not 0 < self.port <= 65535:
            raise ValueError(f"bad port {self.port}")
        if self.rate_limit is not None:
            interval, burst = self.rate_limit
            if interval <= 0 or int(burst) < 1:
                raise ValueError("rate_limit needs interval > 0 and burst >= 1")
            self.rate_limit = (interval, int(burst))
        if not 0.0 <= self.udp_drop_probability <= 1.0:
            raise ValueError("udp_drop_probability must be within [0, 1]")


@dataclass
class ForwarderStats:
    offered: int = 0
    sent: int = 0
    dropped: int = 0            # rate limited
    lost_in_transit: int = 0    # UDP only; counted within ``sent``


class Forwarder:
    """Wraps alert bodies into syslog messages, rate limits and ships them.

    Rate limiting follows rsyslog's interval/burst scheme: an interval opens at
    the first message seen after the previous interval has expired, and at most
    ``burst`` messages pass per interval.
    """

    def __init__(self, cfg: ForwarderConfig, hostname: str, src_ip: str, *,
                 send: Callable[[Frame], None], tag: str = "snort", pid: int | None = 812,
                 facility: int = 23, severity: int = 1, seed: int = 0):
        self.cfg = cfg
        self.hostname = hostname
        self.src_ip = src_ip
        self.tag = tag
        self.pid = pid
        self.facility = facility
        self.severity = severity
        self.stats = ForwarderStats()
        self._send = send
        self._window_start: int | None = None
        self._window_count = 0
        self._interval_us = int(round(cfg.rate_limit[0] * 1e6)) if cfg.rate_limit else 0
        self._rng = random.Random(f"udp-loss:{seed}:{hostname}")
        # static parts are checked once; the header only changes once per second
        SyslogMessage(facility, severity, EPOCH, hostname, tag, "", pid).validate()
        self._head_second: int | None = None
        self._head = ""

    def _admit(self, now_us: int) -> bool:
        if self.cfg.rate_limit is None:
            return True
        if self._window_start is None or now_us >= self._window_start + self._interval_us:
            self._window_start = now_us
            self._window_count = 0
        if self._window_count < self.cfg.rate_limit[1]:
            self._window_count += 1
            return True
        return False

    def _encode(self, body: str, now_us: int) -> bytes:
        """``encode()`` of the message for ``body`` at ``now_us``."""
        second = now_us // 1_000_000
        if second != self._head_second:
            ts = wallclock(second * 1_000_000)
            tag = self.tag if self.pid is None else f"{self.tag}[{self.pid}]"
            self._head = (f"<{self.facility * 8 + self.severity}>{format_timestamp(ts)} "
                          f"{self.hostname} {tag}: ")
            self._head_second = second
        if "\x00" in body:
            raise SyslogEncodeError("body contains NUL")
        if self.cfg.transport == "tcp":
            return (self._head + _escape(body) + "\n").encode("utf-8")
        return (self._head + body).encode("utf-8")

    def forward(self, body: str, now_us: int) -> str:
        """Returns ``"sent"`` or ``"dropped"``."""
        self.stats.offered += 1
        if not self._admit(now_us):
            self.stats.dropped += 1
            return "dropped"
        self.stats.sent += 1
        data = self._encode(body, now_us)
        if (self.cfg.transport == "udp" and self.cfg.udp_drop_probability > 0
                and self._rng.random() < self.cfg.udp_drop_probability):
            self.stats.lost_in_transit += 1
            return "sent"
        self._send(Frame(now_us, self.src_ip, self.cfg.dest_ip, self.cfg.port,
                         self.cfg.transport, data, self.cfg.transport.upper()))
        return "sent"


@dataclass
class Receiver:
    """Central-node syslog input. Decoded messages go to each handler in order
    (the store first, then the SIEM shipping queue)."""

    handlers: list[Callable[[SyslogMessage, int], None]] = field(default_factory=list)
    received: int = 0
    malformed: int = 0

    def receive(self, data: bytes, received_at_us: int, transport: str = "tcp") -> SyslogMessage | None:
        try:
            msg = decode(data, transport)
        except SyslogDecodeError:
            self.malformed += 1
            return None
        self.received += 1
        for h in self.handlers:
            h(msg, received_at_us)
        return msg


class SyslogServer:
    """Real-socket receiver (UDP or TCP) for interop testing.

    Frames may arrive concurrently; handler calls are serialized under one lock so
    handlers observe a total order. ``port=0`` picks a free port.
    """

    def __init__(self, handler: Callable[[bytes, str], None], host: str = "127.0.0.1",
                 port: int = DEFAULT_SOCKET_PORT, transport: str = "udp"):
        self.transport = transport
        lock = threading.Lock()

        def dispatch(data: bytes) -> None:
            with lock:
                handler(data, transport)

        class _UDP(socketserver.BaseRequestHandler):
            def handle(self):
                dispatch(self.request[0])

        class _TCP(socketserver.StreamRequestHandler):
            def handle(self):
                for line in self.rfile:
                    dispatch(line)

        if transport == "udp":
            self._server = socketserver.ThreadingUDPServer((host, port), _UDP)
        elif transport == "tcp":
            self._server = socketserver.ThreadingTCPServer((host, port), _TCP)
        else:
            raise ValueError(f"unknown transport {transport!r}")
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def __enter__(self) -> SyslogServer:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def send_datagram(data: bytes, addr: tuple[str, int]) -> None:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.sendto(data, addr)

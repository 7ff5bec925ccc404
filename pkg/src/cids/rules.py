"""Snort-3 style rule subset: parse, render, stateless match and detection_filter.

Supported header: ``alert <tcp|udp|icmp|ip> <addr> <port> -> <addr> <port>`` with
``any``, a single IPv4 address or CIDR for addresses and ``any``, ``N`` or
``lo:hi`` for ports.

Supported options: msg, sid, gid, rev, classtype, metadata, content (with the
``nocase``, ``offset`` and ``depth`` modifiers) and detection_filter. Anything
else is rejected.
"""
from __future__ import annotations

import ipaddress
import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from cids.netsim import to_us

PROTOS = ("tcp", "udp", "icmp", "ip")


class RuleParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class RuleLoadError(ValueError):
    pass


class FilterOrderError(RuntimeError):
    """Timestamps for one tracked key went backwards."""


@lru_cache(maxsize=65536)
def _ip_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


@dataclass(frozen=True)
class AddressSpec:
    network: ipaddress.IPv4Network | None = None   # None = any

    @classmethod
    def parse(cls, text: str) -> AddressSpec:
        if text == "any":
            return cls()
        return cls(ipaddress.IPv4Network(text, strict=True))

    def matches(self, ip: str) -> bool:
        if self.network is None:
            return True
        n = self.network
        return int(n.network_address) <= _ip_int(ip) <= int(n.broadcast_address)

    def __str__(self) -> str:
        if self.network is None:
            return "any"
        if self.network.prefixlen == 32:
            return str(self.network.network_address)
        return str(self.network)


@dataclass(frozen=True)
class PortSpec:
    lo: int | None = None    # None = any
    hi: int | None = None

    @classmethod
    def parse(cls, text: str) -> PortSpec:
        if text == "any":
            return cls()
        if ":" in text:
            a, b = text.split(":", 1)
            lo = int(a) if a else 0
            hi = int(b) if b else 65535
        else:
            lo = hi = int(text)
        if not (0 <= lo <= hi <= 65535):
            raise ValueError(f"bad port range {text!r}")
        return cls(lo, hi)

    def matches(self, port: int) -> bool:
        return self.lo is None or self.lo <= port <= self.hi

    def __str__(self) -> str:
        if self.lo is None:
            return "any"
        if self.lo == self.hi:
            return str(self.lo)
        return f"{self.lo}:{self.hi}"


@dataclass(frozen=True)
class ContentMatch:
    pattern: bytes
    nocase: bool = False
    offset: int = 0
    depth: int | None = None

    def __post_init__(self):
        if not self.pattern:
            raise ValueError("content pattern must be non-empty")
        if self.offset < 0 or (self.depth is not None and self.depth < 1):
            raise ValueError("bad content offset/depth")

    def matches(self, payload: bytes) -> bool:
        end = None if self.depth is None else self.offset + self.depth
        region = payload[self.offset:end]
        if self.nocase:
            return self.pattern.lower() in region.lower()
        return self.pattern in region


@dataclass(frozen=True)
class DetectionFilterSpec:
    track_by: str    # "by_src" | "by_dst"
    count: int
    seconds: float

    def __post_init__(self):
        if self.track_by not in ("by_src", "by_dst"):
            raise ValueError(f"track must be by_src or by_dst, not {self.track_by!r}")
        if self.count < 1:
            raise ValueError("detection_filter count must be >= 1")
        if self.seconds <= 0:
            raise ValueError("detection_filter seconds must be > 0")


@dataclass(frozen=True)
class DetectionRule:
    proto: str
    src: AddressSpec
    src_port: PortSpec
    dst: AddressSpec
    dst_port: PortSpec
    msg: str
    sid: int
    gid: int = 1
    rev: int = 0
    classtype: str | None = None
    metadata: str | None = None
    content: ContentMatch | None = None
    detection_filter: DetectionFilterSpec | None = None
    action: str = "alert"

    def __post_init__(self):
        if self.proto not in PROTOS:
            raise ValueError(f"unknown proto {self.proto!r}")
        if self.sid <= 0:
            raise ValueError("sid must be > 0")
        if self.action != "alert":
            raise ValueError("only 'alert' rules are supported")


# --- parsing -----------------------------------------------------------------

_HEADER_TOKEN = re.compile(r"->|<>|<-|[^\s<>-]+|-")
_KEYWORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_CLASSTYPE = re.compile(r"[A-Za-z0-9_.-]+$")
_FILTER_PART = re.compile(r"^(track|count|seconds)\s+(\S+)$")


def _read_value(text: str, i: int) -> tuple[str, bool, int]:
    """Read an option value starting at ``i``. Returns (value, quoted, index after ';')."""
    n = len(text)
    while i < n and text[i].isspace():
        i += 1
    if i < n and text[i] in "\"'":
        q = text[i]
        start = i
        i += 1
        buf = []
        while i < n and text[i] != q:
            if text[i] == "\\" and i + 1 < n:
                i += 1
            buf.append(text[i])
            i += 1
        if i >= n:
            raise RuleParseError("unterminated quoted string", start)
        i += 1
        while i < n and text[i].isspace():
            i += 1
        if i < n and text[i] != ";":
            raise RuleParseError("expected ';' after quoted value", i)
        return "".join(buf), True, i + 1
    start = i
    while i < n and text[i] != ";":
        i += 1
    return text[start:i].strip(), False, i + 1


def _decode_content(value: str, base: int) -> bytes:
    out = bytearray()
    parts = value.split("|")
    if len(parts) % 2 == 0:
        raise RuleParseError("unbalanced '|' in content", base)
    for k, part in enumerate(parts):
        if k % 2 == 0:
            out += part.encode("utf-8")
        else:
            hexdigits = part.replace(" ", "")
            try:
                out += bytes.fromhex(hexdigits)
            except ValueError:
                raise RuleParseError(f"bad hex in content: {part!r}", base) from None
    return bytes(out)


def _int_value(key: str, value: str, pos: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise RuleParseError(f"{key} expects an integer, got {value!r}", pos) from None


def _parse_filter(value: str, pos: int) -> DetectionFilterSpec:
    found: dict[str, str] = {}
    for part in value.split(","):
        m = _FILTER_PART.match(part.strip())
        if not m or m.group(1) in found:
            raise RuleParseError(f"bad detection_filter clause {part.strip()!r}", pos)
        found[m.group(1)] = m.group(2)
    if set(found) != {"track", "count", "seconds"}:
        raise RuleParseError("detection_filter needs track, count and seconds", pos)
    try:
        secs = float(found["seconds"])
        if not math.isfinite(secs):
            raise ValueError("seconds must be finite")
        return DetectionFilterSpec(found["track"], int(found["count"]),
                                   int(secs) if secs.is_integer() else secs)
    except ValueError as e:
        raise RuleParseError(f"bad detection_filter: {e}", pos) from None


def parse_rule(text: str) -> DetectionRule:
    """Parse one rule written on a single logical line."""
    line = text.strip()
    lead = len(text) - len(text.lstrip())
    open_i = line.find("(")
    close_i = line.rfind(")")
    if open_i < 0 or close_i < open_i:
        raise RuleParseError("missing option block '( ... )'", lead + max(open_i, 0))
    if line[close_i + 1:].strip():
        raise RuleParseError("trailing text after ')'", lead + close_i + 1)

    toks = [(m.group(), m.start()) for m in _HEADER_TOKEN.finditer(line[:open_i])]
    if len(toks) != 7:
        raise RuleParseError(f"header needs 7 fields, found {len(toks)}", lead)
    (action, _), (proto, p_proto), (src, p_src), (sport, p_sport), (arrow, p_arrow), \
        (dst, p_dst), (dport, p_dport) = toks
    if action != "alert":
        raise RuleParseError(f"unsupported action {action!r}", lead)
    if proto.lower() not in PROTOS:
        raise RuleParseError(f"unsupported protocol {proto!r}", lead + p_proto)
    if arrow != "->":
        raise RuleParseError(f"unsupported direction {arrow!r}", lead + p_arrow)
    addrs = []
    for tok, pos in ((src, p_src), (dst, p_dst)):
        try:
            addrs.append(AddressSpec.parse(tok))
        except ValueError:
            raise RuleParseError(f"bad address {tok!r}", lead + pos) from None
    ports = []
    for tok, pos in ((sport, p_sport), (dport, p_dport)):
        try:
            ports.append(PortSpec.parse(tok))
        except ValueError:
            raise RuleParseError(f"bad port {tok!r}", lead + pos) from None

    body = line[open_i + 1:close_i]
    base = lead + open_i + 1
    opts: dict = {}
    content: dict | None = None
    i = 0
    while True:
        while i < len(body) and body[i].isspace():
            i += 1
        if i >= len(body):
            break
        m = _KEYWORD.match(body, i)
        if not m:
            raise RuleParseError("expected option keyword", base + i)
        key, kpos = m.group(), base + i
        i = m.end()
        while i < len(body) and body[i].isspace():
            i += 1
        if i < len(body) and body[i] == ":":
            value, quoted, i = _read_value(body, i + 1)
        elif i >= len(body) or body[i] == ";":
            value, quoted, i = None, False, i + 1
        else:
            raise RuleParseError(f"expected ':' or ';' after {key!r}", base + i)

        if key in ("msg", "classtype", "metadata", "sid", "gid", "rev",
                   "content", "detection_filter") and value is None:
            raise RuleParseError(f"{key} needs a value", kpos)
        if key in opts:
            raise RuleParseError(f"duplicate option {key!r}", kpos)
        if key == "msg":
            opts[key] = value
        elif key in ("sid", "gid", "rev"):
            opts[key] = _int_value(key, value, kpos)
        elif key == "classtype":
            if not _CLASSTYPE.match(value):
                raise RuleParseError(f"bad classtype {value!r}", kpos)
            opts[key] = value
        elif key == "metadata":
            opts[key] = value
        elif key == "content":
            if content is not None:
                raise RuleParseError("only one content per rule is supported", kpos)
            pattern = _decode_content(value, kpos)
            if not pattern:
                raise RuleParseError("content must be non-empty", kpos)
            content = {"pattern": pattern}
        elif key in ("nocase", "offset", "depth"):
            if content is None:
                raise RuleParseError(f"{key} must follow content", kpos)
            if key in content:
                raise RuleParseError(f"duplicate option {key!r}", kpos)
            if key == "nocase":
                if value is not None:
                    raise RuleParseError("nocase takes no value", kpos)
                content["nocase"] = True
            else:
                content[key] = _int_value(key, value, kpos)
            continue
        elif key == "detection_filter":
            opts[key] = _parse_filter(value, kpos)
        else:
            raise RuleParseError(f"unknown option {key!r}", kpos)

    if "sid" not in opts:
        raise RuleParseError("sid required")
    if "msg" not in opts:
        raise RuleParseError("msg required")
    try:
        return DetectionRule(
            proto=proto.lower(), src=addrs[0], src_port=ports[0], dst=addrs[1],
            dst_port=ports[1], msg=opts["msg"], sid=opts["sid"],
            gid=opts.get("gid", 1), rev=opts.get("rev", 0),
            classtype=opts.get("classtype"), metadata=opts.get("metadata"),
            content=ContentMatch(**content) if content else None,
            detection_filter=opts.get("detection_filter"),
        )
    except ValueError as e:
        raise RuleParseError(str(e)) from None


# --- rendering ---------------------------------------------------------------

_LITERAL_OK = set(range(0x20, 0x7F)) - {ord(c) for c in '"|;\\'}


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace(";", "\\;") + '"'


def _render_content(pattern: bytes) -> str:
    out = []
    hexrun: list[str] = []
    for b in pattern:
        if b in _LITERAL_OK:
            if hexrun:
                out.append("|" + " ".join(hexrun) + "|")
                hexrun = []
            out.append(chr(b))
        else:
            hexrun.append(f"{b:02x}")
    if hexrun:
        out.append("|" + " ".join(hexrun) + "|")
    return '"' + "".join(out) + '"'


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_rule(rule: DetectionRule) -> str:
    """Canonical single-line text; defaults (gid 1, rev 0) are omitted."""
    opts = [f"msg:{_quote(rule.msg)}"]
    if rule.content is not None:
        c = rule.content
        opts.append(f"content:{_render_content(c.pattern)}")
        if c.nocase:
            opts.append("nocase")
        if c.offset:
            opts.append(f"offset:{c.offset}")
        if c.depth is not None:
            opts.append(f"depth:{c.depth}")
    if rule.detection_filter is not None:
        f = rule.detection_filter
        opts.append(f"detection_filter:track {f.track_by}, count {f.count}, seconds {_num(f.seconds)}")
    if rule.classtype is not None:
        opts.append(f"classtype:{rule.classtype}")
    if rule.metadata is not None:
        opts.append(f"metadata:{rule.metadata}")
    if rule.gid != 1:
        opts.append(f"gid:{rule.gid}")
    opts.append(f"sid:{rule.sid}")
    if rule.rev != 0:
        opts.append(f"rev:{rule.rev}")
    return (f"{rule.action} {rule.proto} {rule.src} {rule.src_port} -> "
            f"{rule.dst} {rule.dst_port} (" + "; ".join(opts) + ";)")


# --- evaluation --------------------------------------------------------------

def match_packet(rule: DetectionRule, pkt) -> bool:
    """Stateless part of rule evaluation (header + content)."""
    if rule.proto != "ip" and rule.proto != pkt.proto.lower():
        return False
    if not (rule.src.matches(pkt.src_ip) and rule.dst.matches(pkt.dst_ip)):
        return False
    if pkt.proto != "ICMP":
        if not (rule.src_port.matches(pkt.src_port) and rule.dst_port.matches(pkt.dst_port)):
            return False
    if rule.content is not None and not rule.content.matches(pkt.payload):
        return False
    return True


class DetectionFilterState:
    """Per (sid, tracked address) sliding windows of recent match times (us)."""

    def __init__(self):
        self._windows: dict[tuple[int, str], deque[int]] = {}
        self._last: dict[tuple[int, str], int] = {}

    def decide(self, spec: DetectionFilterSpec, sid: int, key: str, ts_us: int) -> bool:
        """Record a match at ``ts_us``; True iff more than ``count`` matches fall
        inside the window (ts - seconds, ts]."""
        k = (sid, key)
        last = self._last.get(k)
        if last is not None and ts_us < last:
            raise FilterOrderError(f"sid {sid} key {key}: {ts_us} < {last}")
        self._last[k] = ts_us
        win = self._windows.get(k)
        if win is None:
            win = self._windows[k] = deque()
        horizon = ts_us - to_us(spec.seconds)
        while win and win[0] <= horizon:
            win.popleft()
        win.append(ts_us)
        return len(win) > spec.count

    def window(self, sid: int, key: str) -> list[int]:
        return list(self._windows.get((sid, key), ()))


def filter_decide(state: DetectionFilterState, spec: DetectionFilterSpec | None,
                  key: str, ts: float, sid: int = 0) -> bool:
    """Seconds-based convenience wrapper; True means fire. No filter always fires."""
    if spec is None:
        return True
    return state.decide(spec, sid, key, to_us(ts))


@dataclass
class Ruleset:
    rules: list[DetectionRule] = field(default_factory=list)
    lines: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def by_sid(self, sid: int) -> DetectionRule:
        for r in self.rules:
            if r.sid == sid:
                return r
        raise KeyError(sid)

    def evaluate(self, pkt, state: DetectionFilterState,
                 ts_us: int | None = None) -> list[DetectionRule]:
        """Rules firing on ``pkt``, in ruleset order. Each rule is independent."""
        if ts_us is None:
            ts_us = pkt.ts_us
        fired = []
        for rule in self.rules:
            if not match_packet(rule, pkt):
                continue
            f = rule.detection_filter
            if f is not None:
                key = pkt.dst_ip if f.track_by == "by_dst" else pkt.src_ip
                if not state.decide(f, rule.sid, key, ts_us):
                    continue
            fired.append(rule)
        return fired

    def render(self) -> str:
        return "".join(render_rule(r) + "\n" for r in self.rules)


def load_ruleset(texts: Iterable[str]) -> Ruleset:
    """Parse rule lines; ``#`` comments and blank lines are skipped."""
    rs = Ruleset()
    seen: dict[int, int] = {}
    for lineno, raw in enumerate(texts, 1):
        s = raw.strip()
        if not s or s.startswith("#"):
            continue
        try:
            rule = parse_rule(s)
        except RuleParseError as e:
            raise RuleLoadError(f"line {lineno}: {e}") from e
        if rule.sid in seen:
            raise RuleLoadError(
                f"duplicate sid {rule.sid} on lines {seen[rule.sid]} and {lineno}")
        seen[rule.sid] = lineno
        rs.rules.append(rule)
        rs.lines.append(lineno)
    return rs


def load_rules_file(path: str | Path) -> Ruleset:
    return load_ruleset(Path(path).read_text(encoding="utf-8").splitlines())

"""In-process SIEM: bulk NDJSON ingestion under a daily byte quota, a retention
horizon, a small pipe-style query language and cross-node correlation.

Quota rule: a line is accepted iff its UTF-8 length (without the newline) fits in
what is left of the current virtual day's budget and no earlier line that day was
refused. Once a line is refused the day is closed, so the accepted lines are
always a prefix of the day's offered lines.
"""
from __future__ import annotations

import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from json.encoder import encode_basestring as _q
from pathlib import Path
from typing import Any, Iterable

from cids.netsim import US_PER_S, to_us, virtual_us, wallclock

DAY_US = 86_400 * US_PER_S
DEFAULT_QUOTA = 16 * 2**30
DEFAULT_RETENTION_DAYS = 7
SCHEMA_VERSION = 1

ALERT_GRAMMAR = re.compile(
    r'^\[(?P<gid>\d+):(?P<sid>\d+):(?P<rev>\d+)\] "(?P<msg>.*)"'
    r'(?: \[Classification: (?P<classtype>[^\]]*)\] \[Priority: (?P<priority>\d+)\])?'
    r' \{(?P<proto>[A-Z]+)\} (?P<src_ip>\d+\.\d+\.\d+\.\d+)(?::(?P<src_port>\d+))?'
    r' -> (?P<dst_ip>\d+\.\d+\.\d+\.\d+)(?::(?P<dst_port>\d+))?$',
    re.DOTALL,
)
_EXPORT_KEYS = ("@timestamp", "message", "host", "severity", "facility",
                "syslogtag", "name", "pid")


class QueryError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ParsedAlert:
    gid: int
    sid: int
    rev: int
    msg: str
    proto: str
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    classtype: str | None = None
    priority: int | None = None


def parse_alert(message: str) -> ParsedAlert | None:
    m = ALERT_GRAMMAR.match(message)
    if m is None:
        return None
    g = m.groupdict()
    return ParsedAlert(int(g["gid"]), int(g["sid"]), int(g["rev"]), g["msg"], g["proto"],
                       g["src_ip"], int(g["src_port"] or 0), g["dst_ip"],
                       int(g["dst_port"] or 0), g["classtype"],
                       int(g["priority"]) if g["priority"] else None)


@lru_cache(maxsize=4096)
def parse_timestamp(s: str) -> int:
    dt = datetime.fromisoformat(s.replace("Z", "+00:00"))
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return virtual_us(dt)


@dataclass(slots=True)
class SiemEvent:
    ingest_ts: int
    event_ts: int
    host: str
    severity: str
    facility: str
    syslogtag: str
    name: str
    pid: str
    raw_message: str
    parsed_alert: ParsedAlert | None = None

    def fields(self) -> dict[str, Any]:
        d = {"ingest_ts": self.ingest_ts, "event_ts": self.event_ts, "host": self.host,
             "severity": self.severity, "facility": self.facility,
             "syslogtag": self.syslogtag, "name": self.name, "pid": self.pid,
             "message": self.raw_message}
        a = self.parsed_alert
        for k in ALERT_FIELDS:
            d[k] = getattr(a, k) if a is not None else None
        return d


ALERT_FIELDS = ("gid", "sid", "rev", "msg", "proto", "src_ip", "src_port",
                "dst_ip", "dst_port", "classtype", "priority")
EVENT_FIELDS = ("ingest_ts", "event_ts", "host", "severity", "facility", "syslogtag",
                "name", "pid", "message") + ALERT_FIELDS


def event_from_line(line: str, ingest_ts: int) -> SiemEvent:
    """Raises ValueError on anything that is not an export record."""
    rec = json.loads(line)
    if not isinstance(rec, dict) or tuple(rec) != _EXPORT_KEYS:
        raise ValueError("not an export record")
    if set(map(type, rec.values())) != {str}:
        raise ValueError("export record values must be strings")
    return SiemEvent(ingest_ts, parse_timestamp(rec["@timestamp"]), rec["host"],
                     rec["severity"], rec["facility"], rec["syslogtag"], rec["name"],
                     rec["pid"], rec["message"], parse_alert(rec["message"]))


@dataclass
class IngestResult:
    accepted: int = 0
    rejected_over_quota: int = 0
    malformed: int = 0

    def __iter__(self):
        return iter((self.accepted, self.rejected_over_quota))


@dataclass
class MetaAlert:
    attacker_ip: str
    sid: int
    nodes: tuple[str, ...]
    window: tuple[int, int]      # (first, last) event_ts in us
    event_count: int

    def to_dict(self) -> dict:
        return {"attacker_ip": self.attacker_ip, "sid": self.sid, "nodes": list(self.nodes),
                "window": [self.window[0] / US_PER_S, self.window[1] / US_PER_S],
                "event_count": self.event_count}


@dataclass
class QueryResult:
    columns: list[str]
    rows: list[tuple]

    def scalar(self):
        if len(self.rows) != 1 or len(self.columns) != 1:
            raise QueryError("result is not a scalar")
        return self.rows[0][0]

    def to_text(self) -> str:
        lines = ["\t".join(self.columns)]
        lines += ["\t".join("" if v is None else str(v) for v in row) for row in self.rows]
        return "\n".join(lines)


@dataclass
class Repository:
    retention_days: float = DEFAULT_RETENTION_DAYS
    daily_quota_bytes: int = DEFAULT_QUOTA
    events: list[SiemEvent] = field(default_factory=list)
    now_us: int = 0
    bytes_by_day: dict[int, int] = field(default_factory=dict)
    closed_days: set[int] = field(default_factory=set)
    totals: IngestResult = field(default_factory=IngestResult)
    purged: int = 0

    @property
    def retention_us(self) -> int:
        return to_us(self.retention_days * 86_400)

    @property
    def bytes_ingested_today(self) -> int:
        return self.bytes_by_day.get(self.now_us // DAY_US, 0)

    def ingest_bulk(self, lines: Iterable[str], now_us: int | None = None) -> IngestResult:
        if now_us is not None:
            self.now_us = max(self.now_us, now_us)
        day = self.now_us // DAY_US
        used = self.bytes_by_day.get(day, 0)
        res = IngestResult()
        for line in lines:
            line = line.rstrip("\n")
            try:
                ev = event_from_line(line, self.now_us)
            except (ValueError, KeyError, TypeError):
                res.malformed += 1
                continue
            size = len(line.encode("utf-8"))
            if day in self.closed_days or used + size > self.daily_quota_bytes:
                self.closed_days.add(day)
                res.rejected_over_quota += 1
                continue
            used += size
            self.events.append(ev)
            res.accepted += 1
        self.bytes_by_day[day] = used
        self.totals.accepted += res.accepted
        self.totals.rejected_over_quota += res.rejected_over_quota
        self.totals.malformed += res.malformed
        return res

    def apply_retention(self, now_us: int | None = None) -> int:
        """Drop events with event_ts <= now - retention; returns how many."""
        if now_us is not None:
            self.now_us = max(self.now_us, now_us)
        horizon = self.now_us - self.retention_us
        keep = [e for e in self.events if e.event_ts > horizon]
        n = len(self.events) - len(keep)
        self.events = keep
        self.purged += n
        return n

    def visible(self) -> list[SiemEvent]:
        horizon = self.now_us - self.retention_us
        return [e for e in self.events if e.event_ts > horizon]

    # --- queries -------------------------------------------------------------

    def run_query(self, q: str | list[tuple]) -> QueryResult:
        stages = parse_query(q) if isinstance(q, str) else q
        columns = list(EVENT_FIELDS)
        rows = [e.fields() for e in self.visible()]
        for op, *args in stages:
            if op == "filter":
                for fname, _, _ in args[0]:
                    if fname not in columns:
                        raise QueryError(f"unknown field {fname!r}")
                rows = [r for r in rows if all(_holds(r[f], cmp, v) for f, cmp, v in args[0])]
            elif op == "time":
                start, end = args
                if "event_ts" not in columns:
                    raise QueryError("time() must precede aggregation")
                rows = [r for r in rows if start <= r["event_ts"] <= end]
            elif op == "groupby":
                fname = args[0]
                if fname not in columns:
                    raise QueryError(f"unknown field {fname!r}")
                counts = Counter(r[fname] for r in rows)
                keys = sorted(counts, key=lambda v: (v is None, 0 if v is None else v))
                rows = [{fname: k, "_count": counts[k]} for k in keys]
                columns = [fname, "_count"]
            elif op == "count":
                fname = args[0]
                if fname is not None and fname not in columns:
                    raise QueryError(f"unknown field {fname!r}")
                n = sum(1 for r in rows if fname is None or r[fname] not in (None, ""))
                rows = [{"_count": n}]
                columns = ["_count"]
            else:
                raise QueryError(f"unknown stage {op!r}")
        return QueryResult(columns, [tuple(r[c] for c in columns) for r in rows])

    # --- correlation ---------------------------------------------------------

    def correlate(self, window: float = 60.0, min_nodes: int = 3) -> list[MetaAlert]:
        """One MetaAlert per maximal merged span in which events of a single
        (source ip, sid) pair come from at least ``min_nodes`` distinct hosts
        within ``window`` seconds."""
        if min_nodes < 2:
            raise ValueError("min_nodes must be >= 2")
        w = to_us(window)
        groups: dict[tuple[str, int], list[tuple[int, str]]] = defaultdict(list)
        for e in self.visible():
            a = e.parsed_alert
            if a is not None:
                groups[(a.src_ip, a.sid)].append((e.event_ts, e.host))
        out = []
        for (src, sid), evs in groups.items():
            evs.sort()
            out.extend(_spans(src, sid, evs, w, min_nodes))
        out.sort(key=lambda m: (m.window[0], m.attacker_ip, m.sid))
        return out

    # --- persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "schema_version": SCHEMA_VERSION, "now_us": self.now_us,
                "retention_days": self.retention_days,
                "daily_quota_bytes": self.daily_quota_bytes,
            }) + "\n")
            for e in self.events:
                fh.write(f'{{"ingest_ts":{e.ingest_ts},"@timestamp":"{_ts_text(e.event_ts)}",'
                         f'"message":{_q(e.raw_message)},"host":{_q(e.host)},'
                         f'"severity":{_q(e.severity)},"facility":{_q(e.facility)},'
                         f'"syslogtag":{_q(e.syslogtag)},"name":{_q(e.name)},'
                         f'"pid":{_q(e.pid)}}}\n')

    @classmethod
    def load(cls, path: str | Path) -> Repository:
        with open(path, encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            if head.get("schema_version") != SCHEMA_VERSION:
                raise ValueError("unsupported SIEM schema")
            repo = cls(retention_days=head["retention_days"],
                       daily_quota_bytes=head["daily_quota_bytes"], now_us=head["now_us"])
            for line in fh:
                d = json.loads(line)
                ingest = d.pop("ingest_ts")
                rec = json.dumps({k: d[k] for k in _EXPORT_KEYS})
                repo.events.append(event_from_line(rec, ingest))
        return repo


def _holds(value, cmp: str, want: str) -> bool:
    equal = value is not None and str(value) == want
    return equal if cmp == "=" else not equal


def _ts_text(us: int) -> str:
    return wallclock(us).isoformat() + "+00:00"


def _spans(src: str, sid: int, evs: list[tuple[int, str]], w: int,
           min_nodes: int) -> list[MetaAlert]:
    n = len(evs)
    hosts: Counter = Counter()
    qualifying: list[tuple[int, int]] = []
    r = 0
    for i in range(n):
        t0 = evs[i][0]
        while r < n and evs[r][0] <= t0 + w:
            hosts[evs[r][1]] += 1
            r += 1
        if len(hosts) >= min_nodes:
            qualifying.append((t0, t0 + w))
        h = evs[i][1]
        hosts[h] -= 1
        if not hosts[h]:
            del hosts[h]
    merged: list[list[int]] = []
    for s, e in qualifying:
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    out = []
    for s, e in merged:
        inside = [(t, h) for t, h in evs if s <= t <= e]
        out.append(MetaAlert(src, sid, tuple(sorted({h for _, h in inside})),
                             (inside[0][0], inside[-1][0]), len(inside)))
    return out


_STAGE = re.compile(r"^\s*([A-Za-z_]+)\s*\((.*)\)\s*$")
_COND = re.compile(r"""([A-Za-z_@][\w@]*)\s*(!=|=)\s*("[^"]*"|'[^']*'|\S+)""")


def parse_query(text: str) -> list[tuple]:
    """``host=node4 sid=100001 | time(0, 60) | groupby(host) | count()``.

    Stages: conjunctive ``field=value``/``field!=value`` filters, ``time(start,
    end)`` on event time in virtual seconds, ``groupby(field)``, ``count(field)``.
    Function names are case-insensitive, so ``Count (syslogtag)`` works.
    """
    stages: list[tuple] = []
    for seg in text.split("|"):
        seg = seg.strip()
        if not seg:
            continue
        m = _STAGE.match(seg)
        if m:
            fn, arg = m.group(1).lower(), m.group(2).strip()
            if fn == "count":
                stages.append(("count", arg or None))
            elif fn in ("groupby", "group_by"):
                if not arg:
                    raise QueryError("groupby needs a field")
                stages.append(("groupby", arg))
            elif fn in ("time", "time_window"):
                try:
                    a, b = (float(x) for x in arg.split(","))
                except ValueError:
                    raise QueryError(f"bad time window {arg!r}") from None
                stages.append(("time", to_us(a), to_us(b)))
            else:
                raise QueryError(f"unknown function {fn!r}")
            continue
        conds = []
        pos = 0
        for cm in _COND.finditer(seg):
            if seg[pos:cm.start()].strip():
                raise QueryError(f"cannot parse {seg[pos:cm.start()].strip()!r}")
            v = cm.group(3)
            if v[:1] in "\"'" and v[-1:] == v[:1] and len(v) >= 2:
                v = v[1:-1]
            conds.append((cm.group(1), cm.group(2), v))
            pos = cm.end()
        if seg[pos:].strip() or not conds:
            raise QueryError(f"cannot parse {seg!r}")
        stages.append(("filter", conds))
    return stages

"""Central-node persistence: an append-only SystemEvents table plus the NDJSON
export template used to ship rows to the SIEM."""
from __future__ import annotations

import json
import re
from json.encoder import encode_basestring as _q
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Iterator

from cids.netsim import wallclock
from cids.syslog import SyslogMessage

SCHEMA_VERSION = 1
TABLE = "SystemEvents"
ROW_FIELDS = ("id", "received_at", "device_reported_time", "facility", "priority",
              "from_host", "syslog_tag", "message")
EXPORT_KEYS = ("@timestamp", "message", "host", "severity", "facility",
               "syslogtag", "name", "pid")
DEFAULT_BATCH = 200

SEVERITY_NAMES = ("emerg", "alert", "crit", "err", "warning", "notice", "info", "debug")
FACILITY_NAMES = ("kern", "user", "mail", "daemon", "auth", "syslog", "lpr", "news",
                  "uucp", "cron", "authpriv", "ftp", "ntp", "audit", "alert", "clock",
                  "local0", "local1", "local2", "local3", "local4", "local5", "local6",
                  "local7")

_TAG = re.compile(r"^([^\[:]*)(?:\[(\d+)\])?:?$")


@dataclass(frozen=True, slots=True)
class SystemEventRow:
    id: int
    received_at: int               # virtual us
    device_reported_time: datetime
    facility: int
    priority: int                  # syslog severity
    from_host: str
    syslog_tag: str                # rsyslog style, e.g. "snort[812]:"
    message: str

    @property
    def program(self) -> str:
        return _TAG.match(self.syslog_tag).group(1)

    @property
    def procid(self) -> str:
        return _TAG.match(self.syslog_tag).group(2) or ""

    def to_json(self) -> str:
        # hand-built: this runs once per stored alert
        return (f'{{"id":{self.id},"received_at":{self.received_at},'
                f'"device_reported_time":"{self.device_reported_time.isoformat()}",'
                f'"facility":{self.facility},"priority":{self.priority},'
                f'"from_host":{_q(self.from_host)},"syslog_tag":{_q(self.syslog_tag)},'
                f'"message":{_q(self.message)}}}')

    @classmethod
    def from_dict(cls, d: dict) -> SystemEventRow:
        return cls(d["id"], d["received_at"], datetime.fromisoformat(d["device_reported_time"]),
                   d["facility"], d["priority"], d["from_host"], d["syslog_tag"], d["message"])


def syslog_tag(m: SyslogMessage) -> str:
    return f"{m.tag}[{m.pid}]:" if m.pid is not None else f"{m.tag}:"


class EventStore:
    """In-memory index over an optional append-only NDJSON file."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[SystemEventRow] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", encoding="utf-8")
            self._fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "table": TABLE,
                                       "fields": list(ROW_FIELDS)}) + "\n")

    def __len__(self) -> int:
        return len(self.rows)

    def insert(self, m: SyslogMessage, received_at_us: int) -> int:
        row = SystemEventRow(len(self.rows) + 1, received_at_us, m.timestamp, m.facility,
                             m.severity, m.hostname, syslog_tag(m), m.body)
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(row.to_json() + "\n")
        return row.id

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def query_rows(self, where: dict | Callable[[SystemEventRow], bool] | None = None,
                   start_us: int | None = None, end_us: int | None = None) -> list[SystemEventRow]:
        """Rows ordered by id. ``where`` is a field->value dict (``program`` and
        ``procid`` allowed) or a predicate; the time range applies to received_at."""
        if isinstance(where, dict):
            for k in where:
                if k not in ROW_FIELDS and k not in ("program", "procid"):
                    raise KeyError(f"unknown field {k!r}")
            items = list(where.items())
            pred = lambda r: all(getattr(r, k) == v for k, v in items)  # noqa: E731
        else:
            pred = where
        out = []
        for r in self.rows:
            if start_us is not None and r.received_at < start_us:
                continue
            if end_us is not None and r.received_at > end_us:
                continue
            if pred is None or pred(r):
                out.append(r)
        return out

    @classmethod
    def load(cls, path: str | Path) -> EventStore:
        store = cls()
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"unsupported store schema {header.get('schema_version')!r}")
            for line in fh:
                store.rows.append(SystemEventRow.from_dict(json.loads(line)))
        return store


def export_record(row: SystemEventRow) -> dict:
    return {
        "@timestamp": row.device_reported_time.isoformat() + "+00:00",
        "message": row.message,
        "host": row.from_host,
        "severity": SEVERITY_NAMES[row.priority],
        "facility": FACILITY_NAMES[row.facility],
        "syslogtag": row.syslog_tag,
        "name": row.program,
        "pid": row.procid,
    }


def export_line(row: SystemEventRow) -> str:
    """Same text as ``json.dumps(export_record(row), ensure_ascii=False)`` with
    compact separators."""
    m = _TAG.match(row.syslog_tag)
    return (f'{{"@timestamp":"{row.device_reported_time.isoformat()}+00:00",'
            f'"message":{_q(row.message)},"host":{_q(row.from_host)},'
            f'"severity":"{SEVERITY_NAMES[row.priority]}",'
            f'"facility":"{FACILITY_NAMES[row.facility]}",'
            f'"syslogtag":{_q(row.syslog_tag)},"name":{_q(m.group(1))},'
            f'"pid":"{m.group(2) or ""}"}}')


def export_ndjson(rows: Iterable[SystemEventRow]) -> list[str]:
    return [export_line(r) for r in rows]


def batches(lines: list[str], batch_size: int = DEFAULT_BATCH) -> Iterator[list[str]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for i in range(0, len(lines), batch_size):
        yield lines[i:i + batch_size]


def _sql_str(s: str) -> str:
    return "'" + s.replace("\\", "\\\\").replace("'", "''").replace("\n", "\\n") + "'"


def dump_sql(rows: Iterable[SystemEventRow]) -> str:
    out = [
        f"CREATE TABLE {TABLE} (",
        "  ID int unsigned NOT NULL AUTO_INCREMENT PRIMARY KEY,",
        "  ReceivedAt datetime(6) NULL,",
        "  DeviceReportedTime datetime NULL,",
        "  Facility smallint NULL,",
        "  Priority smallint NULL,",
        "  FromHost varchar(60) NULL,",
        "  SysLogTag varchar(60) NULL,",
        "  Message longtext",
        ");",
    ]
    for r in rows:
        recv = wallclock(r.received_at).isoformat(sep=" ", timespec="microseconds")
        dev = r.device_reported_time.isoformat(sep=" ")
        out.append(
            f"INSERT INTO {TABLE} (ID, ReceivedAt, DeviceReportedTime, Facility, Priority, "
            f"FromHost, SysLogTag, Message) VALUES ({r.id}, '{recv}', '{dev}', {r.facility}, "
            f"{r.priority}, {_sql_str(r.from_host)}, {_sql_str(r.syslog_tag)}, "
            f"{_sql_str(r.message)});")
    return "\n".join(out) + "\n"

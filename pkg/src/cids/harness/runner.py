"""End-to-end scenario execution:
traffic -> LAN -> sensors -> syslog forwarders -> central (store + SIEM shipping)
-> SIEM -> correlation -> scoring."""
from __future__ import annotations

import gc
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

from cids.harness.config import ScenarioSpec, scenario_from_dict
from cids.harness.scoring import score
from cids.netsim import (CENTRAL_IP, SIEM_IP, SIEM_PORT, Delivery, Frame,
                         LanSegment, Network, default_endpoints, default_policy)
from cids.sensor import Alert, Sensor, SensorConfig, open_mirror
from cids.siem import MetaAlert, Repository
from cids.store import EventStore, export_line
from cids.syslog import Forwarder, Receiver, SyslogMessage
from cids.traffic import AttackSpec, BenignSpec, PacketRecord, gen_benign, generate

TRACE_SCHEMA = 1


class InvariantViolation(RuntimeError):
    pass


def _node_key(name: str):
    m = re.match(r"([a-z]+)(\d+)$", name)
    return (m.group(1), int(m.group(2))) if m else (name, 0)


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    packets: dict[str, int]
    alerts_total: int
    alerts_per_node: dict[str, int]
    alerts_per_sid: dict[str, int]
    db_rows: int
    siem_events: int
    tp: int
    fp: int
    fn: int
    attack_flows: int
    detection_rate: float | str
    first_detection_latency: dict[str, float | None]
    forwarder_drops: int
    forwarders: dict[str, dict[str, int]]
    receiver: dict[str, int]
    netsim: dict[str, int]
    siem: dict[str, Any]
    meta_alerts: list[dict]

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class RunResult:
    spec: ScenarioSpec
    metrics: MetricsReport
    packets: list[PacketRecord]
    alerts: list[Alert]
    store: EventStore
    repo: Repository
    meta_alerts: list[MetaAlert]
    sensors: dict[str, Sensor]
    forwarders: dict[str, Forwarder]
    network: Network
    end_us: int
    wall_time: float = 0.0
    run_dir: Path | None = None
    extra: dict[str, Any] = field(default_factory=dict)


def build_packets(spec: ScenarioSpec, lan: LanSegment) -> list[PacketRecord]:
    """Generate every stream of the scenario, merge by time and number them."""
    ip = lambda name: lan.resolve(name).ip  # noqa: E731
    streams: list[list[PacketRecord]] = []
    icmp_limits = [(r.detection_filter.count, r.detection_filter.seconds)
                   for r in spec.ruleset
                   if r.detection_filter is not None and r.proto in ("icmp", "ip")]
    for i, a in enumerate(spec.attacks):
        aspec = AttackSpec(a.kind, ip(a.src), [ip(t) for t in a.targets], a.rate,
                           a.duration, a.start, a.id or f"{spec.id}:{a.kind}:{i}", a.params)
        streams.append(generate(aspec, spec.seed))
    b = spec.benign
    if b.rate > 0:
        hosts = b.hosts or [f"node{i}" for i in range(1, spec.topology.sensors + 1)]
        streams.append(gen_benign(BenignSpec(b.rate, b.duration, b.start,
                                             [ip(h) for h in hosts],
                                             sub_threshold=b.sub_threshold,
                                             icmp_limits=icmp_limits or [(150, 3.0)]),
                                  spec.seed))
    order = {e.ip: e.name for e in lan.endpoints}
    merged = [p for s in streams for p in s]
    # stable: equal (time, sender) keeps generator order
    merged.sort(key=lambda p: (p.ts_us, order.get(p.src_ip, p.src_ip)))
    for i, p in enumerate(merged):
        p.id = i
    return merged


class _Central:
    """Central node: syslog input -> SystemEvents -> bulk shipping to the SIEM."""

    def __init__(self, net: Network, store: EventStore, batch_size: int):
        self.net = net
        self.store = store
        self.batch_size = batch_size
        self.queue: list[str] = []
        self.batches_shipped = 0
        self.receiver = Receiver(handlers=[self.store_message, self.queue_message])

    def store_message(self, m: SyslogMessage, t_us: int) -> None:
        self.store.insert(m, t_us)

    def queue_message(self, m: SyslogMessage, t_us: int) -> None:
        self.queue.append(export_line(self.store.rows[-1]))
        if len(self.queue) >= self.batch_size:
            self.ship(t_us)

    def ship(self, t_us: int) -> None:
        if not self.queue:
            return
        batch, self.queue = self.queue, []
        self.batches_shipped += 1
        self.net.send_frame(Frame(t_us, CENTRAL_IP, SIEM_IP, SIEM_PORT, "https", batch))

    def on_frame(self, d: Delivery) -> None:
        f = d.item
        self.receiver.receive(f.data, d.time_us, f.transport)


class _TraceWriter:
    def __init__(self, fh: IO[str]):
        self.fh = fh

    def __call__(self, d: Delivery) -> None:
        self.fh.write(d.trace_line() + "\n")


def run_scenario(spec: ScenarioSpec, out_dir: str | Path | None = None,
                 packets: list[PacketRecord] | None = None) -> RunResult:
    """Run ``spec`` deterministically. With ``out_dir`` all artifacts are written
    there. ``packets`` replaces traffic generation (replay)."""
    # A run allocates millions of acyclic objects; cyclic GC passes over them cost
    # about a third of the wall time on large runs, so collection is paused.
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _run(spec, out_dir, packets)
    finally:
        if was_enabled:
            gc.enable()


def _run(spec: ScenarioSpec, out_dir: str | Path | None,
         packets: list[PacketRecord] | None) -> RunResult:
    t0 = time.perf_counter()
    run_dir = Path(out_dir) if out_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    endpoints = default_endpoints(spec.topology.sensors)
    lan = LanSegment(endpoints, spec.topology.lan_mode, spec.topology.latency)
    trace_fh = None
    tracer = None
    if run_dir is not None and spec.trace:
        trace_fh = open(run_dir / "trace.ndjson", "w", encoding="utf-8")
        trace_fh.write(json.dumps({"ev": "header", "schema_version": TRACE_SCHEMA,
                                   "scenario": spec.to_dict()}, separators=(",", ":")) + "\n")
        tracer = _TraceWriter(trace_fh)
    net = Network(lan, default_policy(), trace=tracer)

    ruleset = spec.ruleset
    store = EventStore(run_dir / "store.ndjson" if run_dir is not None else None)
    repo = Repository(spec.siem.retention_days, spec.siem.daily_quota_bytes)
    central = _Central(net, store, spec.siem.batch_size)
    net.on_frame(CENTRAL_IP, central.on_frame)
    net.on_frame(SIEM_IP, lambda d: repo.ingest_bulk(d.item.data, d.time_us))

    fcfg = spec.forwarder.build(CENTRAL_IP)
    sensors: dict[str, Sensor] = {}
    forwarders: dict[str, Forwarder] = {}
    mirrors = []
    for ep in endpoints:
        if ep.role != "sensor":
            continue
        kw = {} if spec.classtypes is None else {"classtypes": dict(spec.classtypes)}
        cfg = SensorConfig(ep, ruleset, spec.topology.is_promiscuous(ep.name), **kw)
        mirror = open_mirror(run_dir, ep.name) if (run_dir and spec.mirror_alerts) else None
        if mirror is not None:
            mirrors.append(mirror)
        sensors[ep.name] = Sensor(cfg, mirror)
        forwarders[ep.name] = Forwarder(fcfg, ep.name, ep.ip, send=net.send_frame,
                                        pid=cfg.pid, facility=cfg.syslog_facility,
                                        severity=cfg.syslog_severity, seed=spec.seed)

    alerts: list[Alert] = []

    def on_packet(d: Delivery) -> None:
        pkt = d.item
        for name in d.recipients:
            sensor = sensors.get(name)
            if sensor is None or not sensor.accepts(pkt):
                continue
            fwd = forwarders[name]
            for a in sensor.process(pkt, d.time_us):
                alerts.append(a)
                fwd.forward(sensor.format(a), d.time_us)

    net.on_packet(on_packet)

    if packets is None:
        packets = build_packets(spec, lan)
    net.send_packets(packets)
    net.run_all()
    end_us = net.clock.now_us
    central.ship(end_us)
    net.run_all()
    end_us = net.clock.now_us
    repo.apply_retention(end_us)
    metas = repo.correlate(spec.siem.correlation_window, spec.siem.min_nodes)

    if trace_fh is not None:
        trace_fh.close()
    store.close()
    for m in mirrors:
        m.close()

    result = RunResult(spec, None, packets, alerts, store, repo, metas, sensors, forwarders,
                       net, end_us, run_dir=run_dir)
    result.extra["batches_shipped"] = central.batches_shipped
    result.extra["receiver"] = central.receiver
    result.metrics = collect_metrics(result)
    check_invariants(result)
    result.wall_time = time.perf_counter() - t0
    if run_dir is not None:
        from cids.harness.report import write_artifacts
        repo.save(run_dir / "siem.ndjson")
        write_artifacts(result, run_dir)
    return result


def collect_metrics(r: RunResult) -> MetricsReport:
    spec = r.spec
    sc = score(r.alerts, r.packets, spec.intent)
    per_node: dict[str, int] = {}
    per_sid: dict[str, int] = {}
    for a in r.alerts:
        per_node[a.node] = per_node.get(a.node, 0) + 1
        per_sid[str(a.sid)] = per_sid.get(str(a.sid), 0) + 1
    per_node = {k: per_node[k] for k in sorted(per_node, key=_node_key)}
    per_sid = {k: per_sid[k] for k in sorted(per_sid, key=int)}
    by_label: dict[str, int] = {}
    for p in r.packets:
        by_label[p.label.kind] = by_label.get(p.label.kind, 0) + 1
    fw = {name: dict(f.stats.__dict__) for name, f in r.forwarders.items() if f.stats.offered}
    receiver = r.extra["receiver"]
    nc = r.network.counters
    return MetricsReport(
        scenario=spec.id, seed=spec.seed,
        packets={"generated": len(r.packets), **{k: by_label[k] for k in sorted(by_label)}},
        alerts_total=len(r.alerts), alerts_per_node=per_node, alerts_per_sid=per_sid,
        db_rows=len(r.store), siem_events=len(r.repo.visible()),
        tp=sc.tp, fp=sc.fp, fn=sc.fn, attack_flows=sc.flows,
        detection_rate=sc.detection_rate, first_detection_latency=sc.latency,
        forwarder_drops=sum(f.stats.dropped for f in r.forwarders.values()),
        forwarders=fw,
        receiver={"received": receiver.received, "malformed": receiver.malformed},
        netsim=dict(nc.__dict__) | {"firewall_drops": r.network.policy.drops},
        siem={"accepted": r.repo.totals.accepted,
              "rejected_over_quota": r.repo.totals.rejected_over_quota,
              "malformed": r.repo.totals.malformed, "purged": r.repo.purged,
              "bytes_ingested": sum(r.repo.bytes_by_day.values()),
              "daily_quota_bytes": r.repo.daily_quota_bytes,
              "retention_days": r.repo.retention_days,
              "batches": r.extra["batches_shipped"]},
        meta_alerts=[m.to_dict() for m in r.meta_alerts],
    )


def check_invariants(r: RunResult) -> None:
    m = r.metrics
    problems = []
    if not r.network.counters.conserved():
        problems.append(f"netsim conservation broken: {r.network.counters}")
    for name, f in r.forwarders.items():
        if f.stats.sent + f.stats.dropped != f.stats.offered:
            problems.append(f"forwarder {name}: sent + dropped != offered")
    if m.tp + m.fp != m.alerts_total:
        problems.append("tp + fp != alerts_total")
    sent = sum(f.stats.sent - f.stats.lost_in_transit for f in r.forwarders.values())
    if r.network.counters.frames_dropped == 0:
        if m.receiver["received"] + m.receiver["malformed"] != sent:
            problems.append(f"central received {m.receiver['received']} of {sent} frames")
        if m.db_rows != m.receiver["received"]:
            problems.append("db rows != messages received")
        siem = m.siem
        if siem["accepted"] + siem["rejected_over_quota"] + siem["malformed"] != m.db_rows:
            problems.append("SIEM accepted + rejected != db rows shipped")
    lossless = (r.spec.forwarder.transport == "tcp" and r.spec.forwarder.rate_limit is None
                and r.network.counters.frames_dropped == 0)
    if lossless and m.db_rows != m.alerts_total:
        problems.append(f"lossless pipeline lost alerts: {m.alerts_total} -> {m.db_rows}")
    if problems:
        raise InvariantViolation("; ".join(problems))


def read_trace(path: str | Path) -> tuple[ScenarioSpec, list[PacketRecord]]:
    """Scenario and the generated packet stream recorded in a trace file."""
    with open(path, encoding="utf-8") as fh:
        head = json.loads(fh.readline())
        if head.get("ev") != "header" or head.get("schema_version") != TRACE_SCHEMA:
            raise ValueError(f"{path}: not a trace file")
        spec = scenario_from_dict(head["scenario"])
        pkts = {}
        for line in fh:
            rec = json.loads(line)
            if rec["ev"] == "packet":
                p = PacketRecord.from_dict(rec["pkt"])
                pkts[p.id] = p
    packets = [pkts[i] for i in sorted(pkts)]
    if [p.id for p in packets] != list(range(len(packets))):
        raise ValueError(f"{path}: packet ids are not contiguous")
    return spec, packets


def replay(path: str | Path, out_dir: str | Path | None = None) -> RunResult:
    spec, packets = read_trace(path)
    return run_scenario(spec, out_dir, packets=packets)

"""TP/FP/FN scoring of sensor alerts against generator ground truth.

An alert is a true positive iff the label of the packet that triggered it matches
the attack class its rule is written for (the sid -> class intent map). Every
other alert is a false positive. Detection is counted per attack flow (one
generator invocation, one attack_id).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from cids.netsim import US_PER_S
from cids.sensor import Alert
from cids.traffic import PacketRecord


class ScoringError(RuntimeError):
    pass


@dataclass
class Score:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    flows: int = 0
    detection_rate: float | str = "n/a"
    latency: dict[str, float | None] = field(default_factory=dict)   # attack_id -> seconds


def score(alerts: Iterable[Alert], packets: Mapping[int, PacketRecord] | list[PacketRecord],
          intent: Mapping[int, str]) -> Score:
    if isinstance(packets, list):
        packets = {p.id: p for p in packets}
    flow_start: dict[str, int] = {}
    for p in packets.values():
        aid = p.label.attack_id
        if aid is not None and (aid not in flow_start or p.ts_us < flow_start[aid]):
            flow_start[aid] = p.ts_us
    first_tp: dict[str, int] = {}
    s = Score()
    for a in alerts:
        pkt = packets.get(a.packet_id)
        if pkt is None:
            raise ScoringError(f"alert {a.gid}:{a.sid} at {a.ts_us}us references unknown "
                               f"packet {a.packet_id}")
        if pkt.label.kind != "benign" and pkt.label.kind == intent.get(a.sid):
            s.tp += 1
            aid = pkt.label.attack_id
            if aid not in first_tp or a.ts_us < first_tp[aid]:
                first_tp[aid] = a.ts_us
        else:
            s.fp += 1
    s.flows = len(flow_start)
    s.fn = sum(1 for aid in flow_start if aid not in first_tp)
    if s.flows:
        s.detection_rate = (s.flows - s.fn) / s.flows
    for aid in sorted(flow_start):
        t = first_tp.get(aid)
        s.latency[aid] = None if t is None else (t - flow_start[aid]) / US_PER_S
    return s

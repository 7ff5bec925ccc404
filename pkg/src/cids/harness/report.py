"""Run artifacts: report.json, report.txt, alerts_over_time.csv, timing.json."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

from cids.netsim import US_PER_S


def report_json(metrics: dict[str, Any]) -> str:
    return json.dumps(metrics, indent=2) + "\n"


def report_text(m: dict[str, Any]) -> str:
    dr = m["detection_rate"]
    lines = [
        f"Scenario {m['scenario']} (seed {m['seed']})",
        "",
        f"packets generated     {m['packets']['generated']}",
        f"alerts emitted        {m['alerts_total']}",
        f"rows stored           {m['db_rows']}",
        f"SIEM events           {m['siem_events']}",
        f"forwarder drops       {m['forwarder_drops']}",
        f"firewall drops        {m['netsim']['firewall_drops']}",
        "",
        f"TP {m['tp']}   FP {m['fp']}   FN {m['fn']}   "
        f"detection rate {dr if isinstance(dr, str) else f'{dr:.3f}'} "
        f"over {m['attack_flows']} attack flow(s)",
    ]
    for aid, lat in m["first_detection_latency"].items():
        lines.append(f"  first detection {aid}: "
                     + ("missed" if lat is None else f"{lat:.6f} s after attack start"))
    lines += ["", "Alerts per node:"]
    if m["alerts_per_node"]:
        lines += [f"  {n:<8} {c}" for n, c in m["alerts_per_node"].items()]
    else:
        lines.append("  (none)")
    lines += ["", "Alerts per sid:"]
    lines += [f"  {s:<10} {c}" for s, c in m["alerts_per_sid"].items()] or ["  (none)"]
    lines += ["", f"Meta-alerts ({len(m['meta_alerts'])}):"]
    for ma in m["meta_alerts"]:
        lines.append(f"  {ma['attacker_ip']} sid {ma['sid']} on {', '.join(ma['nodes'])} "
                     f"[{ma['window'][0]:.0f}s .. {ma['window'][1]:.0f}s] "
                     f"{ma['event_count']} events")
    s = m["siem"]
    lines += ["", f"SIEM: accepted {s['accepted']}, over quota {s['rejected_over_quota']}, "
                  f"malformed {s['malformed']}, purged {s['purged']}, "
                  f"{s['bytes_ingested']} of {s['daily_quota_bytes']} daily bytes"]
    return "\n".join(lines) + "\n"


def alerts_over_time(alerts, nodes: list[str], end_us: int, bin_s: float = 1.0) -> list[list]:
    """Per-second alert counts per sensor; first column is the bin start in seconds."""
    bin_us = int(bin_s * US_PER_S)
    nbins = max(1, math.ceil(end_us / bin_us)) if end_us else 1
    col = {n: i for i, n in enumerate(nodes)}
    table = [[0] * len(nodes) for _ in range(nbins)]
    for a in alerts:
        b = min(a.ts_us // bin_us, nbins - 1)
        table[b][col[a.node]] += 1
    return [[round(i * bin_s, 6)] + row for i, row in enumerate(table)]


def write_artifacts(result, run_dir: Path) -> None:
    m = result.metrics.to_dict()
    (run_dir / "report.json").write_text(report_json(m), encoding="utf-8")
    (run_dir / "report.txt").write_text(report_text(m), encoding="utf-8")
    (run_dir / "scenario.json").write_text(json.dumps(result.spec.to_dict(), indent=2) + "\n",
                                           encoding="utf-8")
    nodes = list(result.sensors)
    with open(run_dir / "alerts_over_time.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + nodes)
        w.writerows(alerts_over_time(result.alerts, nodes, result.end_us))
    (run_dir / "timing.json").write_text(
        json.dumps({"wall_time_s": round(result.wall_time, 3)}) + "\n", encoding="utf-8")

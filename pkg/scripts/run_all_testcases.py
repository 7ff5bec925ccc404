"""Run every shipped scenario and print one summary row per run.

    python scripts/run_all_testcases.py --out runs
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

from cids.harness.config import load_scenario
from cids.harness.runner import run_scenario

ROOT = Path(__file__).resolve().parent.parent


@dataclass
class Config:
    out: Path = Path("runs")
    scenarios: list[str] = field(default_factory=lambda: ["TC-1", "TC-2", "TC-3", "TC-4",
                                                          "TC-5", "benign"])
    seed: int | None = None
    trace: bool = True


def parse_args(argv=None) -> Config:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Config.out)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("scenarios", nargs="*", help="scenario ids (default: TC-1..TC-5, benign)")
    a = p.parse_args(argv)
    cfg = Config(out=a.out, seed=a.seed, trace=not a.no_trace)
    if a.scenarios:
        cfg.scenarios = a.scenarios
    return cfg


def main(cfg: Config) -> int:
    head = f"{'scenario':<8} {'alerts':>8} {'rows':>8} {'events':>8} {'drops':>8} " \
           f"{'tp':>7} {'fp':>7} {'fn':>3} {'meta':>4} {'wall s':>7}"
    print(head)
    for name in cfg.scenarios:
        spec = load_scenario(ROOT / "scenarios" / f"{name}.json", seed=cfg.seed)
        spec.trace = cfg.trace
        r = run_scenario(spec, cfg.out / spec.id)
        m = r.metrics
        print(f"{spec.id:<8} {m.alerts_total:>8} {m.db_rows:>8} {m.siem_events:>8} "
              f"{m.forwarder_drops:>8} {m.tp:>7} {m.fp:>7} {m.fn:>3} "
              f"{len(m.meta_alerts):>4} {r.wall_time:>7.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(parse_args()))

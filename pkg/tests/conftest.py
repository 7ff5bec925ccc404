from pathlib import Path

import pytest

from cids.traffic import BENIGN, GroundTruthLabel, PacketRecord

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def icmp(ts_us, src="192.168.1.66", dst="192.168.1.101", label=BENIGN, pid=-1):
    return PacketRecord(ts_us, "ICMP", src, dst, icmp_type=8, label=label, id=pid)


def syn(ts_us, dport=80, src="192.168.1.66", dst="192.168.1.101", label=BENIGN, pid=-1):
    return PacketRecord(ts_us, "TCP", src, dst, 40000, dport, ("SYN",), label=label, id=pid)


def flood_label(aid="flood"):
    return GroundTruthLabel("icmp_flood", aid)


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


# criterion number -> "criterion N: PASS|FAIL ..." filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

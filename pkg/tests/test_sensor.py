import json

from hypothesis import given
from hypothesis import strategies as st

from cids.netsim import Endpoint
from cids.rules import load_ruleset
from cids.sensor import Alert, Sensor, SensorConfig, format_alert, open_mirror
from cids.siem import parse_alert
from cids.traffic import AttackSpec, gen_icmp_flood

from conftest import flood_label, icmp, syn
from test_rules import FLOOD, SCAN

NODE1 = Endpoint("node1", "192.168.1.101", "sensor")


def sensor(rules, promiscuous=False, mirror=None):
    return Sensor(SensorConfig(NODE1, load_ruleset(rules), promiscuous), mirror)


def test_defaults_are_local7_alert():
    cfg = SensorConfig(NODE1, load_ruleset([]))
    assert (cfg.syslog_facility, cfg.syslog_severity, cfg.forward_to) == (23, 1, "192.168.1.13")


def test_flood_threshold_151st_packet():
    s = sensor([FLOOD])
    out = [s.process(icmp(k * 1000, label=flood_label())) for k in range(151)]
    assert all(o == [] for o in out[:150])
    assert len(out[150]) == 1 and out[150][0].sid == 100001
    assert out[150][0].attack_label == flood_label()


def test_two_rules_two_alerts():
    s = sensor([SCAN, 'alert tcp any any -> any any (msg:"second"; sid:7;)'])
    assert [a.sid for a in s.process(syn(0))] == [10000005, 7]


def test_empty_ruleset_never_alerts():
    s = sensor([])
    assert s.process(syn(0)) == [] == s.process(icmp(1))


def test_alert_count_equals_filter_oracle():
    pk = gen_icmp_flood(AttackSpec("icmp_flood", "192.168.1.66", ["192.168.1.101"], 1000, 10))
    s = sensor([FLOOD])
    assert sum(len(s.process(p)) for p in pk) == 10_000 - 150


def test_nic_filter():
    s = sensor([SCAN])
    assert s.accepts(syn(0, dst="192.168.1.101"))
    assert not s.accepts(syn(0, dst="192.168.1.102"))
    assert sensor([SCAN], promiscuous=True).accepts(syn(0, dst="192.168.1.102"))


def alert(**kw):
    base = dict(ts_us=0, node="node1", gid=1, sid=10000001, rev=0, msg="ICMP Traffic Detected",
                classtype=None, proto="ICMP", src_ip="192.168.1.66", src_port=0,
                dst_ip="192.168.1.101", dst_port=0)
    base.update(kw)
    return Alert(**base)


def test_format_examples():
    assert format_alert(alert()) == \
        '[1:10000001:0] "ICMP Traffic Detected" {ICMP} 192.168.1.66 -> 192.168.1.101'
    assert format_alert(alert(sid=10000005, msg="NMAP TCP SCAN", proto="TCP", src_port=40000,
                              dst_port=80)) == \
        '[1:10000005:0] "NMAP TCP SCAN" {TCP} 192.168.1.66:40000 -> 192.168.1.101:80'
    flood = format_alert(alert(sid=100001, rev=1, msg="ICMP Flood Detected",
                               classtype="bad-unknown"))
    assert "[Classification: bad-unknown] [Priority: 2]" in flood
    assert format_alert(alert(classtype="made-up")).endswith(
        "[Classification: made-up] [Priority: 2] {ICMP} 192.168.1.66 -> 192.168.1.101")
    assert "[Priority: 9]" in format_alert(alert(classtype="x"), {"x": 9})


def test_label_never_in_body():
    a = alert(attack_label=flood_label("secret-id"))
    assert "secret-id" not in format_alert(a) and "icmp_flood" not in format_alert(a)


ips = st.integers(0, 2**32 - 1).map(lambda n: ".".join(str((n >> s) & 255) for s in (24, 16, 8, 0)))


@given(st.integers(1, 10**6), st.integers(1, 10**9), st.integers(0, 99),
       st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), max_size=20),
       st.sampled_from(["TCP", "UDP", "ICMP"]), ips, st.integers(0, 65535), ips,
       st.integers(0, 65535), st.one_of(st.none(), st.sampled_from(["bad-unknown", "x-y"])))
def test_format_is_injective_via_parse(gid, sid, rev, msg, proto, src, sp, dst, dp, ct):
    if proto == "ICMP":
        sp = dp = 0
    a = alert(gid=gid, sid=sid, rev=rev, msg=msg, proto=proto, src_ip=src, src_port=sp,
              dst_ip=dst, dst_port=dp, classtype=ct)
    p = parse_alert(format_alert(a))
    assert p is not None
    assert (p.gid, p.sid, p.rev, p.msg, p.proto, p.src_ip, p.src_port, p.dst_ip, p.dst_port,
            p.classtype) == (gid, sid, rev, msg, proto, src, sp, dst, dp, ct)


def test_mirror_file(tmp_path):
    fh = open_mirror(tmp_path, "node1")
    s = sensor([SCAN], mirror=fh)
    s.process(syn(0, pid=3))
    fh.close()
    rec = json.loads((tmp_path / "snort" / "node1.alerts.ndjson").read_text())
    assert rec["sid"] == 10000005 and rec["packet_id"] == 3

import ipaddress

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cids.rules import (AddressSpec, ContentMatch, DetectionFilterSpec, DetectionFilterState,
                        DetectionRule, FilterOrderError, PortSpec, RuleLoadError, RuleParseError,
                        filter_decide, load_rules_file, load_ruleset, match_packet, parse_rule,
                        render_rule)
from cids.traffic import PacketRecord, dns_payload

from conftest import SCENARIOS, icmp, syn

FLOOD = ('alert icmp any any -> any any (msg:"ICMP Flood Detected"; detection_filter: track '
         'by_dst, count 150, seconds 3; classtype:bad-unknown; sid:100001; rev:1;)')
SCAN = 'alert tcp any any -> any any (msg:"NMAP TCP SCAN"; sid:10000005;)'
FIG4_ICMP = ("alert icmp any any -> any any ( msg:'ICMP Traffic Detected'; sid:10000001; "
             "metadata:policy security-ips alert; )")
FIG4_TCP = "alert tcp any any -> any any (msg:'NMAP TCP SCAN'; sid:10000005;)"
LOCAL_SCAN = 'alert tcp any any ->any any (msg: "NMAP TCP Scan";sid:10000005; rev:2; )'


def test_flood_rule_fields():
    r = parse_rule(FLOOD)
    assert (r.proto, r.sid, r.rev, r.gid, r.msg) == ("icmp", 100001, 1, 1, "ICMP Flood Detected")
    assert r.detection_filter == DetectionFilterSpec("by_dst", 150, 3)
    assert r.classtype == "bad-unknown"
    assert r.src == AddressSpec() and r.dst_port == PortSpec()


def test_scan_rule_fields():
    r = parse_rule(SCAN)
    assert (r.proto, r.sid, r.rev, r.detection_filter) == ("tcp", 10000005, 0, None)


def test_single_quotes_and_loose_whitespace():
    a = parse_rule(FIG4_ICMP)
    assert (a.msg, a.sid, a.rev, a.metadata) == ("ICMP Traffic Detected", 10000001, 0,
                                                 "policy security-ips alert")
    assert parse_rule(FIG4_TCP) == parse_rule(SCAN)
    b = parse_rule(LOCAL_SCAN)
    assert (b.msg, b.sid, b.rev) == ("NMAP TCP Scan", 10000005, 2)


@pytest.mark.parametrize("text", [FLOOD, SCAN, FIG4_ICMP, FIG4_TCP, LOCAL_SCAN])
def test_roundtrip_known_rules(text):
    r = parse_rule(text)
    assert parse_rule(render_rule(r)) == r


def test_defaults_not_rendered():
    out = render_rule(parse_rule(SCAN))
    assert "gid" not in out and "rev" not in out


def test_errors():
    with pytest.raises(RuleParseError, match="sid required"):
        parse_rule('alert tcp any any -> any any (msg:"x";)')
    with pytest.raises(RuleParseError, match="'flowbits'") as e:
        parse_rule('alert tcp any any -> any any (msg:"x"; flowbits:set,a; sid:1;)')
    assert e.value.offset == 39
    with pytest.raises(RuleParseError) as e:
        parse_rule('alert tcp any 99999 -> any any (msg:"x"; sid:1;)')
    assert e.value.offset == 14
    with pytest.raises(RuleParseError) as e:
        parse_rule("alert tcp any any <- any any (msg:'x'; sid:1;)")
    assert e.value.offset == 18
    with pytest.raises(RuleParseError):
        parse_rule('alert tcp any any -> any any (msg:"x"; sid:1; content:"";)')
    with pytest.raises(RuleParseError):
        parse_rule('alert tcp any any -> any any (msg:"x"; sid:1; nocase;)')
    with pytest.raises(RuleParseError):
        parse_rule('alert tcp any any -> any any (msg:"x; sid:1;)')


def test_ruleset_loading(tmp_path):
    rs = load_rules_file(SCENARIOS / "rules" / "local.rules")
    assert [r.sid for r in rs] == [100001, 10000005]
    with pytest.raises(RuleLoadError, match="lines 1 and 3"):
        load_ruleset([FLOOD, "# c", FLOOD])
    empty = load_ruleset([])
    assert len(empty) == 0
    assert empty.evaluate(icmp(0), DetectionFilterState()) == []


def test_match_examples():
    flood = parse_rule(FLOOD)
    assert match_packet(flood, icmp(0))
    assert not match_packet(parse_rule(SCAN), icmp(0))
    assert match_packet(parse_rule('alert ip any any -> any any (msg:"a"; sid:1;)'), syn(0))


def test_match_addresses_and_ports():
    r = parse_rule('alert tcp 192.168.1.0/28 any -> 192.168.1.101 20:25 (msg:"a"; sid:1;)')
    assert match_packet(r, syn(0, 22, src="192.168.1.5"))
    assert not match_packet(r, syn(0, 26, src="192.168.1.5"))
    assert not match_packet(r, syn(0, 22, src="192.168.1.66"))
    # ICMP ignores ports
    r2 = parse_rule('alert icmp any 7 -> any 9 (msg:"a"; sid:2;)')
    assert match_packet(r2, icmp(0))


def test_content_rcode_offset():
    rule = parse_rule(open(SCENARIOS / "rules" / "dns.rules").read().splitlines()[1])
    nx = PacketRecord(0, "UDP", "192.168.1.105", "192.168.1.66", 53, 33000,
                      payload=dns_payload(3, 3, True, "h1.corp.local"))
    ok = PacketRecord(0, "UDP", "192.168.1.105", "192.168.1.66", 53, 33000,
                      payload=dns_payload(3, 0, True, "h1.corp.local"))
    # txid low byte 0x03 must not match: the rcode byte is pinned by offset/depth
    assert match_packet(rule, nx)
    assert not match_packet(rule, ok)


def test_content_nocase():
    r = parse_rule('alert tcp any any -> any any (msg:"a"; content:"GET"; nocase; sid:1;)')
    assert match_packet(r, PacketRecord(0, "TCP", "1.1.1.1", "2.2.2.2", 1, 80, payload=b"xget /"))
    r2 = parse_rule('alert tcp any any -> any any (msg:"a"; content:"GET"; sid:1;)')
    assert not match_packet(r2, PacketRecord(0, "TCP", "1.1.1.1", "2.2.2.2", 1, 80, payload=b"get"))


# --- detection_filter --------------------------------------------------------

def oracle(ts, count, seconds):
    """Brute force: fire iff more than ``count`` stream entries lie in (t - S, t]."""
    out = []
    for i, t in enumerate(ts):
        n = sum(1 for j in range(i + 1) if ts[j] > t - seconds)
        out.append(n > count)
    return out


def decide_all(ts_us, count, seconds):
    st_ = DetectionFilterState()
    spec = DetectionFilterSpec("by_dst", count, seconds)
    return [st_.decide(spec, 1, "k", t) for t in ts_us]


def test_filter_small_example():
    st_ = DetectionFilterState()
    spec = DetectionFilterSpec("by_dst", 3, 2)
    got = [filter_decide(st_, spec, "k", t) for t in (0, 0.5, 1.0, 1.5, 1.9)]
    assert got == [False, False, False, True, True]


def test_filter_single_packet_and_no_filter():
    assert not filter_decide(DetectionFilterState(), DetectionFilterSpec("by_src", 1, 1), "k", 0)
    assert filter_decide(DetectionFilterState(), None, "k", 0)


def test_filter_tc3_arithmetic():
    fires = decide_all([k * 1000 for k in range(60_000)], 150, 3)
    assert sum(fires) == 59_850
    assert fires.index(True) == 150


def test_filter_out_of_order():
    st_ = DetectionFilterState()
    spec = DetectionFilterSpec("by_dst", 2, 1)
    st_.decide(spec, 1, "k", 10)
    st_.decide(spec, 1, "other", 5)      # independent key
    with pytest.raises(FilterOrderError):
        st_.decide(spec, 1, "k", 9)


def test_filter_state_window_bounds():
    st_ = DetectionFilterState()
    spec = DetectionFilterSpec("by_dst", 5, 2)
    for t in range(0, 10_000_000, 300_000):
        st_.decide(spec, 1, "k", t)
        w = st_.window(1, "k")
        assert all(t - 2_000_000 < x <= t for x in w)


streams = st.lists(st.integers(0, 400), min_size=1, max_size=300).map(
    lambda gaps: [sum(gaps[:i + 1]) for i in range(len(gaps))])


@settings(max_examples=200, deadline=None)
@given(streams, st.integers(1, 20), st.integers(1, 4))
def test_filter_matches_oracle(ts, count, seconds_ms):
    s_us = seconds_ms * 1000
    assert decide_all(ts, count, s_us / 1e6) == oracle(ts, count, s_us)


@settings(max_examples=100, deadline=None)
@given(streams, st.integers(1, 20), st.integers(1, 4), st.integers(0, 400))
def test_filter_causality(ts, count, seconds_ms, extra_gap):
    before = decide_all(ts, count, seconds_ms / 1000)
    after = decide_all(ts + [ts[-1] + extra_gap], count, seconds_ms / 1000)
    assert after[:-1] == before


def test_independent_rules_both_fire():
    rs = load_ruleset([SCAN, 'alert tcp any any -> any 80 (msg:"web"; sid:2;)'])
    fired = rs.evaluate(syn(0, 80), DetectionFilterState())
    assert [r.sid for r in fired] == [10000005, 2]


# --- random round-trip -------------------------------------------------------

printable = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=0, max_size=30)
addr = st.one_of(
    st.just(AddressSpec()),
    st.builds(lambda a, p: AddressSpec(ipaddress.IPv4Network((a, p), strict=False)),
              st.integers(0, 2**32 - 1), st.integers(0, 32)))
port = st.one_of(st.just(PortSpec()),
                 st.tuples(st.integers(0, 65535), st.integers(0, 65535)).map(
                     lambda t: PortSpec(min(t), max(t))))
content = st.one_of(st.none(), st.builds(
    ContentMatch, st.binary(min_size=1, max_size=12), st.booleans(), st.integers(0, 40),
    st.one_of(st.none(), st.integers(1, 40))))
dfilter = st.one_of(st.none(), st.builds(
    DetectionFilterSpec, st.sampled_from(["by_src", "by_dst"]), st.integers(1, 10_000),
    st.one_of(st.integers(1, 3600), st.sampled_from([0.5, 1.25, 2.75]))))
word = st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E,
                             blacklist_characters=";'\""), min_size=1, max_size=8)
metadata = st.one_of(st.none(), st.lists(word, min_size=1, max_size=3).map(" ".join))
rules = st.builds(
    DetectionRule, proto=st.sampled_from(["tcp", "udp", "icmp", "ip"]), src=addr, src_port=port,
    dst=addr, dst_port=port, msg=printable, sid=st.integers(1, 2**31), gid=st.integers(1, 200),
    rev=st.integers(0, 50),
    classtype=st.one_of(st.none(), st.from_regex(r"[a-z][a-z0-9-]{0,15}", fullmatch=True)),
    metadata=metadata, content=content, detection_filter=dfilter)


@settings(max_examples=1000, deadline=None)
@given(rules)
def test_render_parse_roundtrip(rule):
    assert parse_rule(render_rule(rule)) == rule

import pytest

from earlytls.capture import TcpSegmentView
from earlytls.reassembly import (BWD, FWD, REORDER_LIMIT, FlowKey, FlowPhase, FlowTable,
                                 flow_key_of)
from earlytls.synth import build_client_hello, build_server_hello
from earlytls.tls_wire import ClientHelloSummary, ServerHelloSummary

from _util import by_flow, flow_record, reassembly_trial, run_table, segments_of, small_trace

SYN, FIN, RST, ACK = 0x02, 0x01, 0x04, 0x10
CLIENT = (0x0A000001, 50000)
SERVER = (0xC0000201, 443)
CH = ClientHelloSummary(32, 10, 40, "svc.example")
SH = ServerHelloSummary(0, 0xC02F, 5)


def rec(ctype, body):
    return bytes([ctype, 3, 3]) + len(body).to_bytes(2, "big") + body


class Conv:
    """Hand-driven TCP conversation producing segment views."""

    def __init__(self, client=CLIENT, server=SERVER, isn=(1000, 5000)):
        self.ep = (client, server)
        self.seq = list(isn)
        self.t = 1_000_000

    def seg(self, side, payload=b"", flags=ACK, seq=None, dt=100):
        self.t += dt
        (sip, sport), (dip, dport) = self.ep[side], self.ep[side ^ 1]
        s = self.seq[side] if seq is None else seq
        if seq is None:
            self.seq[side] = (self.seq[side] + len(payload) + (1 if flags & (SYN | FIN) else 0)) \
                & 0xFFFFFFFF
        return TcpSegmentView(self.t, sip, dip, sport, dport, s, flags, payload)

    def opening(self, ch=CH, sh=SH):
        return [self.seg(0, flags=SYN), self.seg(1, flags=SYN | ACK), self.seg(0),
                self.seg(0, rec(22, build_client_hello(ch))),
                self.seg(1, rec(22, build_server_hello(sh) + b"\x0b\x00\x00\x03abc")),
                self.seg(0, rec(20, b"\x01") + rec(22, b"F" * 40)),
                self.seg(1, rec(20, b"\x01") + rec(22, b"F" * 40))]

    def data(self, side, n=100):
        return self.seg(side, rec(23, b"d" * n))


def feed(table, segs, d):
    return [ev for s in segs if (ev := table.ingest(s, d)) is not None]


def test_flow_key_is_canonical():
    a = flow_key_of(5, 80, 3, 443)
    assert a == flow_key_of(3, 443, 5, 80) == FlowKey(3, 443, 5, 80)


@pytest.mark.parametrize("seed", range(10))
def test_robustness_trials(seed):
    assert reassembly_trial(seed) == []


def test_ready_at_threshold_with_hellos():
    c = Conv()
    table = FlowTable()
    segs = c.opening() + [c.data(0), c.data(1, 900), c.data(1, 50)]
    events = feed(table, segs, 3)
    assert len(events) == 1
    ev = events[0]
    st = ev.flow
    assert ev.reason == "threshold" and ev.ts_micros == segs[-1].ts_micros
    assert st.phase is FlowPhase.READY
    assert st.client_hello == CH and st.server_hello == SH and st.sni == "svc.example"
    assert [d for _, d, _ in st.handshake_pkts] == [FWD, BWD, FWD, BWD]
    assert [(d, n) for _, d, n in st.appdata_pkts] == [(FWD, 105), (BWD, 905), (BWD, 55)]
    assert st.oriented() == "10.0.0.1:50000-192.0.2.1:443"
    # later traffic is ignored
    assert feed(table, [c.data(0)], 3) == []
    assert len(st.appdata_pkts) == 3


def test_d_zero_fires_on_first_data_packet():
    c = Conv()
    events = feed(FlowTable(), c.opening() + [c.data(1)], 0)
    assert len(events) == 1 and len(events[0].flow.appdata_pkts) == 1


@pytest.mark.parametrize("closer,reason", [("fin", "fin"), ("rst", "rst")])
def test_late_event_on_close(closer, reason):
    c = Conv()
    segs = c.opening() + [c.data(0), c.data(1)]
    if closer == "fin":
        segs += [c.seg(0, flags=FIN | ACK), c.seg(1, flags=FIN | ACK)]
    else:
        segs += [c.seg(1, flags=RST)]
    table = FlowTable()
    events = feed(table, segs, 10)
    assert [e.reason for e in events] == [reason]
    assert len(events[0].flow.appdata_pkts) == 2
    assert table.stats["flows_ready_late"] == 1


def test_single_fin_does_not_close():
    c = Conv()
    table = FlowTable()
    assert feed(table, c.opening() + [c.data(0), c.seg(0, flags=FIN | ACK)], 10) == []
    assert feed(table, [c.data(1)], 10) == []
    assert table.drain(c.t)[0].reason == "evict"


def test_close_without_data_is_invalid():
    c = Conv()
    table = FlowTable()
    segs = c.opening() + [c.seg(0, flags=FIN | ACK), c.seg(1, flags=FIN | ACK)]
    assert feed(table, segs, 5) == []
    st = table.get(FlowKey(*CLIENT, *SERVER))
    assert st.phase is FlowPhase.INVALID and st.invalid_reason == "no_appdata"


def test_threshold_segment_carrying_fin_is_not_reported_twice():
    c = Conv()
    table = FlowTable()
    segs = c.opening() + [c.data(0), c.seg(1, flags=FIN | ACK)]
    last = c.seg(0, rec(23, b"x"), flags=FIN | ACK)
    events = feed(table, segs + [last], 2)
    assert [e.reason for e in events] == ["threshold"]


def test_direction_swap_when_responder_sends_client_hello():
    c = Conv()
    # the 443 side opens the connection but the other side speaks first as TLS client
    c.ep = (SERVER, CLIENT)
    segs = [c.seg(0, flags=SYN), c.seg(1, flags=SYN | ACK),
            c.seg(1, rec(22, build_client_hello(CH))),
            c.seg(0, rec(22, build_server_hello(SH))),
            c.seg(1, rec(23, b"q" * 10))]
    table = FlowTable()
    events = feed(table, segs, 1)
    st = events[0].flow
    assert st.swapped and st.client == CLIENT and st.server == SERVER
    assert [d for _, d, _ in st.handshake_pkts] == [FWD, BWD]
    assert st.appdata_pkts[0][1] == FWD
    assert table.stats["direction_swaps"] == 1


def test_reorder_overflow_invalidates():
    c = Conv()
    table = FlowTable()
    feed(table, c.opening(), 100)
    gap = c.data(0)  # never delivered
    held = [c.data(0, 10) for _ in range(REORDER_LIMIT + 1)]
    feed(table, held, 100)
    st = table.get(FlowKey(*CLIENT, *SERVER))
    assert st.phase is FlowPhase.INVALID and st.invalid_reason == "reorder_overflow"
    assert all(not h.reorder for h in st.halves)
    assert feed(table, [gap], 100) == []


def test_reorder_at_limit_recovers():
    c = Conv()
    table = FlowTable()
    feed(table, c.opening(), 100)
    first = c.data(0, 10)
    held = [c.data(0, 10) for _ in range(REORDER_LIMIT)]
    feed(table, held, 100)
    feed(table, [first], 100)
    st = table.get(FlowKey(*CLIENT, *SERVER))
    assert st.phase is FlowPhase.DATA and len(st.appdata_pkts) == REORDER_LIMIT + 1
    # delivered in sequence order, each with its own capture time
    assert [t for t, _, _ in st.appdata_pkts] == [first.ts_micros] + [h.ts_micros for h in held]


def test_partial_overlap_is_trimmed():
    c = Conv()
    table = FlowTable()
    feed(table, c.opening(), 5)
    a = c.data(0, 20)   # 25 bytes
    b = c.data(0, 20)
    overlap = TcpSegmentView(b.ts_micros + 1, *CLIENT[:1], *SERVER[:1], CLIENT[1], SERVER[1],
                             a.seq + 10, ACK, a.payload[10:] + b.payload)
    feed(table, [a, overlap], 5)
    st = table.get(FlowKey(*CLIENT, *SERVER))
    assert [n for _, _, n in st.appdata_pkts] == [25, 25]
    assert table.stats["segments_trimmed"] == 1


def test_sequence_wraparound():
    c = Conv(isn=(0xFFFFFF00, 0xFFFFFFF0))
    table = FlowTable()
    segs = c.opening() + [c.data(0, 300), c.data(1, 300), c.data(0, 300)]
    assert c.seq[0] < 0x1000  # wrapped
    events = feed(table, segs, 3)
    assert len(events) == 1 and events[0].flow.client_hello == CH


def test_malformed_record_invalidates():
    c = Conv()
    table = FlowTable()
    feed(table, c.opening() + [c.seg(0, b"\x99\x03\x03\x00\x01x")], 5)
    st = table.get(FlowKey(*CLIENT, *SERVER))
    assert st.invalid_reason == "malformed_record"


def test_bad_client_hello_counts_error_but_flow_continues():
    c = Conv()
    table = FlowTable()
    segs = [c.seg(0, flags=SYN), c.seg(1, flags=SYN | ACK),
            c.seg(0, rec(22, b"\x01\x00\x00\x02ab")), c.seg(1, rec(22, build_server_hello(SH))),
            c.data(0)]
    events = feed(table, segs, 1)
    st = events[0].flow
    assert st.client_hello is None and st.server_hello == SH and st.hello_errors == 1


def test_hello_split_over_segments():
    c = Conv()
    msg = rec(22, build_client_hello(CH))
    segs = [c.seg(0, flags=SYN), c.seg(1, flags=SYN | ACK)]
    segs += [c.seg(0, msg[i:i + 7]) for i in range(0, len(msg), 7)]
    segs += [c.seg(1, rec(22, build_server_hello(SH))), c.data(0)]
    st = feed(FlowTable(), segs, 1)[0].flow
    assert st.client_hello == CH
    assert len(st.handshake_pkts) == len(range(0, len(msg), 7)) + 1


def test_recently_accessed_first_and_eviction():
    table = FlowTable(capacity=2, idle_timeout_micros=1_000)
    convs = [Conv(client=(0x0A000001, 40000 + i)) for i in range(3)]
    for i, c in enumerate(convs):
        c.t = 10 * i
        table.ingest(c.seg(0, flags=SYN, dt=0), 5)
    keys = [FlowKey(*SERVER, *c.ep[0]) if SERVER < c.ep[0] else FlowKey(*c.ep[0], *SERVER)
            for c in convs]
    assert table.touch_order() == keys[::-1]
    convs[0].t = 30
    table.ingest(convs[0].seg(0, dt=0), 5)
    assert table.touch_order()[0] == keys[0]
    table.evict(30)  # capacity 2 drops the least recently touched
    assert table.touch_order() == [keys[0], keys[2]]
    assert table.evict(30 + 1_000) == []  # nobody idle beyond the timeout yet
    table.evict(20 + 1_001)
    assert table.touch_order() == [keys[0]]
    assert table.stats["flows_evicted"] == 2 and table.peak_size == 3


def test_evicted_flow_with_data_gets_late_event():
    c = Conv()
    table = FlowTable(idle_timeout_micros=500)
    feed(table, c.opening() + [c.data(0)], 5)
    pending = table.evict(c.t + 501)
    assert len(pending) == 1
    ev = table.late_event(pending[0][1], c.t + 501)
    assert ev.reason == "evict" and len(table) == 0


def test_flow_reuse_after_close():
    c = Conv()
    table = FlowTable()
    first = feed(table, c.opening() + [c.data(0), c.seg(0, flags=FIN | ACK),
                                       c.seg(1, flags=FIN | ACK)], 5)
    assert first[0].reason == "fin"
    c.seq = [90000, 70000]
    second = feed(table, c.opening() + [c.data(1)], 1)
    assert len(second) == 1 and second[0].flow is not first[0].flow
    assert table.stats["flows_created"] == 2


def test_retransmitted_syn_does_not_move_stream_origin():
    c = Conv()
    segs = c.opening() + [c.data(0)]
    # a duplicate SYN after the ClientHello must not rewind the expected sequence
    events = feed(FlowTable(), segs[:4] + [segs[0]] + segs[4:], 1)
    assert len(events) == 1 and events[0].flow.client_hello == CH


def test_mid_stream_pickup_without_syn():
    c = Conv()
    segs = c.opening()[3:] + [c.data(0)]
    ev = feed(FlowTable(), segs, 1)[0]
    assert ev.flow.client == CLIENT and ev.flow.client_hello == CH


def test_table_rejects_zero_capacity():
    with pytest.raises(ValueError):
        FlowTable(capacity=0)


def test_interleaved_trace_matches_per_flow_replay_exactly():
    trace = small_trace(42, services=4, flows=5)
    segments = segments_of(trace.pcap)
    _, mixed = run_table(segments, 5)
    alone = []
    for group in by_flow(segments).values():
        alone += run_table(group, 5)[1]
    key = lambda e: e.flow.oriented()
    assert sorted(map(flow_record, (e.flow for e in mixed)), key=str) == \
        sorted(map(flow_record, (e.flow for e in alone)), key=str)
    assert {key(e) for e in mixed} == {f.manifest_key for f in trace.flows}

import io

import numpy as np
import pytest

from earlytls.capture import PacketStream, PcapWriter, TruncatedRecord
from earlytls.classifier import Dataset, TrainParams, train
from earlytls.fastpath import ready_flow_of, run_batch
from earlytls.features import extract
from earlytls.pipeline import process_trace
from earlytls.reassembly import FlowTable

from _util import small_trace


def reference(pcap, d, feature_d=None, **kw):
    table = FlowTable(kw.pop("capacity", 1_000_000), kw.pop("idle", 60_000_000))
    events = process_trace(pcap, d, table=table, **kw).events
    fd = d if feature_d is None else feature_d
    X = np.vstack([extract(ev.flow, fd) for ev in events]) if events else np.zeros((0, 36))
    return events, X


def assert_same(pcap, d, feature_d=None, capacity=1_000_000, idle=60_000_000, **kw):
    events, X = reference(pcap, d, feature_d, capacity=capacity, idle=idle, **kw)
    b = run_batch(pcap, d, feature_d=feature_d, capacity=capacity, idle_timeout_micros=idle, **kw)
    assert len(b) == len(events)
    assert b.flows() == [ready_flow_of(ev) for ev in events]
    assert [b.oriented(i) for i in range(len(b))] == [ev.flow.oriented() for ev in events]
    np.testing.assert_allclose(b.features, X, rtol=1e-12, atol=0)
    return b


def rewrite(packets, order=None, ts=None):
    buf = io.BytesIO()
    w = PcapWriter(buf)
    order = range(len(packets)) if order is None else order
    for k, i in enumerate(order):
        w.write(packets[i].ts_micros if ts is None else ts[k], packets[i].data)
    return buf.getvalue()


@pytest.mark.parametrize("d", [0, 1, 3, 5, 50])
def test_clean_trace_equivalence(d):
    b = assert_same(small_trace(4, services=5, flows=6, archetypes=2).pcap, d)
    assert b.n_fallback == 0 and b.n_flows == len(b)


def test_feature_depth_can_differ_from_threshold():
    pcap = small_trace(6, services=3, flows=5).pcap
    assert_same(pcap, 1, feature_d=7)
    assert_same(pcap, 8, feature_d=2)


@pytest.mark.parametrize("seed", range(6))
def test_perturbed_traces_match_reference(seed):
    rng = np.random.default_rng(seed)
    packets = list(PacketStream.from_bytes(small_trace(seed, services=3, flows=4).pcap))
    n = len(packets)
    order = list(range(n))
    # local swaps, drops and duplicates
    for _ in range(n // 6):
        i = int(rng.integers(0, n - 1))
        order[i], order[i + 1] = order[i + 1], order[i]
    order = [i for i in order if rng.random() > 0.03]
    order += [int(i) for i in rng.choice(n, size=n // 20)]
    b = assert_same(rewrite(packets, order), int(rng.integers(0, 6)))
    assert b.n_fallback > 0


def test_idle_gaps_and_capacity_pressure():
    packets = list(PacketStream.from_bytes(small_trace(11, services=3, flows=6).pcap))
    # stretch time so flows sit idle between packets
    ts = [p.ts_micros + k * 3_000_000 for k, p in enumerate(packets)]
    pcap = rewrite(packets, ts=ts)
    assert_same(pcap, 3, idle=20_000_000)
    assert_same(pcap, 3, capacity=4)


def test_foreign_frames_and_port_filter():
    packets = list(PacketStream.from_bytes(small_trace(2).pcap))
    buf = io.BytesIO()
    w = PcapWriter(buf)
    for k, p in enumerate(packets):
        w.write(p.ts_micros, p.data)
        if k % 7 == 0:
            w.write(p.ts_micros, b"\x00" * 12 + b"\x86\xdd" + b"\x00" * 40)
    pcap = buf.getvalue()
    b = assert_same(pcap, 2)
    assert b.decode_stats["not_ipv4"] == len(range(0, len(packets), 7))
    assert len(run_batch(pcap, 2, port_filter=8443)) == 0
    assert_same(pcap, 2, port_filter=None)


def test_truncated_capture_raises():
    pcap = small_trace(1).pcap
    with pytest.raises(TruncatedRecord):
        run_batch(pcap[:-3], 5)
    with pytest.raises(ValueError):
        run_batch(pcap, -1)


def test_empty_capture():
    buf = io.BytesIO()
    PcapWriter(buf)
    b = run_batch(buf.getvalue(), 5)
    assert len(b) == 0 and b.features.shape == (0, 36)


def test_predictions_match_tree(tmp_path):
    trace = small_trace(3, services=4, flows=10)
    events, X = reference(trace.pcap, 5)
    labels = [{f.manifest_key: f.label for f in trace.flows}[ev.flow.oriented()] for ev in events]
    tree = train(Dataset(X, labels), TrainParams(categorical_features={22}))
    path = tmp_path / "t.pcap"
    path.write_bytes(trace.pcap)
    b = run_batch(path, 5, model=tree)
    assert [tree.labels[i] for i in b.predictions] == tree.predict_labels(X)
    assert b.sni(0) == events[0].flow.client_hello.sni

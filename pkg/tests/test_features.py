import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlytls.features import (CIPHER_SUITE_INDEX, FEATURE_NAMES, INTEGER_FEATURES, N_FEATURES,
                               EmptyInput, LabeledInstance, NotReady, SchemaMismatch, extract,
                               iat_percentiles, percentile, read_feature_csv, size_stats,
                               write_feature_csv)
from earlytls.pipeline import FlowStore, process_trace
from earlytls.reassembly import FlowPhase

from _util import small_trace
from oracles import batch_features, random_ready_flow


def brute_percentile(values, p):
    # smallest v such that at least p% of the values are <= v
    for v in sorted(values):
        if 100 * sum(1 for x in values if x <= v) >= p * len(values):
            return v


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=40), st.integers(0, 100))
def test_percentile_is_nearest_rank(values, p):
    want = brute_percentile(values, p) if p else min(values)
    assert percentile(values, p) == want


def test_percentile_examples_and_errors():
    assert percentile([15, 20, 35, 40, 50], 25) == 20
    assert percentile([15, 20, 35, 40, 50], 50) == 35
    assert percentile([15, 20, 35, 40, 50], 100) == 50
    assert percentile([7], 75) == 7
    with pytest.raises(EmptyInput):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1], 101)


def test_size_and_iat_blocks():
    assert size_stats([]) == (0.0, 0, 0, 0, 0.0, 0)
    mean, p25, p50, p75, var, mx = size_stats([100, 300, 200, 400])
    assert (mean, p25, p50, p75, var, mx) == (250.0, 100, 200, 300, 12500.0, 400)
    assert iat_percentiles([5]) == (0, 0, 0)
    assert iat_percentiles([0, 10, 30, 60, 100]) == (10, 20, 30)


def test_layout():
    assert N_FEATURES == len(FEATURE_NAMES) == 36
    assert CIPHER_SUITE_INDEX == 22 and FEATURE_NAMES[22] == "sh_cipher_suite"
    assert len(set(FEATURE_NAMES)) == 36
    assert {i for i in range(36) if i not in INTEGER_FEATURES} == {0, 4, 9, 13, 24, 28, 30, 34}


def test_random_flows_match_batch_recomputation():
    rng = np.random.default_rng(20)
    for _ in range(300):
        flow = random_ready_flow(rng)
        d = int(rng.integers(0, 12))
        got = extract(flow, d)
        want, is_int = batch_features(flow, d)
        assert np.array_equal(got[is_int], want[is_int])
        np.testing.assert_allclose(got[~is_int], want[~is_int], rtol=1e-9, atol=0)


def test_pipeline_flows_match_generator_truth():
    trace = small_trace(8, services=4, flows=4)
    events = process_trace(trace.pcap, 10**6).events
    truth = {f.manifest_key: f for f in trace.flows}
    for ev in events:
        t = truth[ev.flow.oriented()]
        for d in (0, 1, 3, 5):
            want, _ = batch_features(_as_flow(t, ev.flow), d)
            np.testing.assert_allclose(extract(ev.flow, d), want, rtol=1e-12)


def _as_flow(truth, like):
    """A ready flow built from generator truth alone."""
    import copy
    st = copy.copy(like)
    st.handshake_pkts = list(truth.handshake_pkts)
    st.appdata_pkts = list(truth.appdata_pkts)
    st.client_hello, st.server_hello = truth.client_hello, truth.server_hello
    return st


def test_missing_parts_are_zero():
    rng = np.random.default_rng(1)
    flow = random_ready_flow(rng)
    flow.handshake_pkts, flow.appdata_pkts = [], []
    flow.client_hello = flow.server_hello = None
    assert not extract(flow, 5).any()


def test_extract_requires_ready():
    flow = random_ready_flow(np.random.default_rng(0))
    flow.phase = FlowPhase.DATA
    with pytest.raises(NotReady):
        extract(flow, 5)
    flow.phase = FlowPhase.READY
    with pytest.raises(ValueError):
        extract(flow, -1)


def test_threshold_limits_data_packets():
    flow = random_ready_flow(np.random.default_rng(3))
    flow.appdata_pkts = [(10 * i, i % 2, 100 + i) for i in range(8)]
    flow.handshake_pkts = []
    v = extract(flow, 3)
    assert v[FEATURE_NAMES.index("fwd_app_pkt_size_max")] == 102
    assert v[FEATURE_NAMES.index("bwd_app_pkt_size_max")] == 101
    assert np.array_equal(extract(flow, 8), extract(flow, 100))


def test_csv_roundtrip(tmp_path):
    store = FlowStore.from_trace(small_trace(2, services=3, flows=3).pcap, 5)
    inst = store.instances(5)
    buf = io.StringIO()
    assert write_feature_csv(buf, inst) == len(inst)
    back = read_feature_csv(io.StringIO(buf.getvalue()))
    assert [b.label for b in back] == [i.label for i in inst]
    for a, b in zip(inst, back):
        ints = sorted(INTEGER_FEATURES)
        assert np.array_equal(a.features[ints], b.features[ints])
        np.testing.assert_allclose(a.features, b.features, rtol=1e-8)
        assert b.meta["flow"] == a.meta["flow"]
    path = tmp_path / "f.csv"
    write_feature_csv(path, inst)
    assert path.read_text() == buf.getvalue()


def test_csv_schema_errors():
    good = io.StringIO()
    write_feature_csv(good, [LabeledInstance(np.zeros(36), "a")])
    text = good.getvalue()
    with pytest.raises(SchemaMismatch):
        read_feature_csv(io.StringIO(""))
    header, row = text.splitlines()
    short = ",".join(header.split(",")[1:]) + "\n" + ",".join(row.split(",")[1:]) + "\n"
    with pytest.raises(SchemaMismatch):
        read_feature_csv(io.StringIO(short))
    with pytest.raises(SchemaMismatch):
        read_feature_csv(io.StringIO(header + "\n" + row.replace("0", "x", 1) + "\n"))
    with pytest.raises(SchemaMismatch):
        read_feature_csv(io.StringIO(header + "\n" + row + ",extra\n"))


def test_labeled_instance_needs_label():
    with pytest.raises(ValueError):
        LabeledInstance(np.zeros(36), "")


def test_variance_is_exact_for_large_values():
    flow = random_ready_flow(np.random.default_rng(9))
    flow.handshake_pkts = []
    flow.appdata_pkts = [(i, 0, 65535 - (i % 2)) for i in range(10)]
    v = extract(flow, 10)
    assert math.isclose(v[4], 0.25, rel_tol=1e-12)

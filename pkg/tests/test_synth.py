import dataclasses
import hashlib
import io

import dpkt
import numpy as np
import pytest

from earlytls.pipeline import FlowStore, process_trace
from earlytls.synth import (MSS, SizeLaw, SpecInvalid, make_service_specs, service_names,
                            synth_generate)

from _util import small_trace


def test_byte_identical_for_equal_seeds():
    a = small_trace(3, services=4, flows=3, archetypes=2)
    b = small_trace(3, services=4, flows=3, archetypes=2)
    c = small_trace(4, services=4, flows=3, archetypes=2)
    assert hashlib.sha256(a.pcap).digest() == hashlib.sha256(b.pcap).digest()
    assert a.manifest_lines() == b.manifest_lines()
    assert a.pcap != c.pcap


def test_counts_and_manifest(tmp_path):
    trace = small_trace(0, services=5, flows=20)
    assert len(trace.flows) == 100
    lines = trace.manifest_lines()
    assert len(lines) == len(set(lines)) == 100
    trace.write(tmp_path / "t.pcap", tmp_path / "t.manifest")
    assert (tmp_path / "t.pcap").read_bytes() == trace.pcap
    assert (tmp_path / "t.manifest").read_text().splitlines() == lines


def test_frames_are_well_formed():
    trace = small_trace(1, services=3, flows=4)
    last = 0
    for ts, buf in dpkt.pcap.Reader(io.BytesIO(trace.pcap)):
        assert ts >= last
        last = ts
        ip = dpkt.ethernet.Ethernet(buf).data
        raw_ip = bytes(buf[14:14 + ip.hl * 4])
        assert dpkt.in_cksum(raw_ip) == 0
        tcp = ip.data
        pseudo = ip.src + ip.dst + bytes([0, 6]) + (ip.len - ip.hl * 4).to_bytes(2, "big")
        assert dpkt.in_cksum(pseudo + bytes(buf[14 + ip.hl * 4:14 + ip.len])) == 0
        assert len(tcp.data) <= MSS
        assert 443 in (tcp.sport, tcp.dport)


def test_every_flow_becomes_ready_with_truth():
    trace = small_trace(2, services=4, flows=6, archetypes=3)
    res = process_trace(trace.pcap, 10**6)
    truth = {f.manifest_key: f for f in trace.flows}
    assert len(res.events) == len(truth) and res.table_stats["flows_invalid"] == 0
    for ev in res.events:
        t = truth[ev.flow.oriented()]
        assert ev.flow.sni == t.label
        assert ev.flow.client_hello == t.client_hello
        assert ev.flow.server_hello == t.server_hello
        assert ev.flow.appdata_pkts == t.appdata_pkts
        assert 2 <= len(t.appdata_pkts) <= 20


def test_sni_labels_match_manifest():
    trace = small_trace(6, services=3, flows=5)
    by_sni = FlowStore.from_trace(trace.pcap, 5)
    manifest = dict(line.split() for line in trace.manifest_lines())
    by_manifest = FlowStore.from_trace(trace.pcap, 5, manifest)
    assert sorted(by_sni.labels) == sorted(by_manifest.labels)


def test_spec_validation():
    spec = make_service_specs(1)[0]
    spec.validate()
    bad = [
        dataclasses.replace(spec, name=""),
        dataclasses.replace(spec, count_p=0.0),
        dataclasses.replace(spec, count_min=0),
        dataclasses.replace(spec, count_min=30),
        dataclasses.replace(spec, bwd_share=1.5),
        dataclasses.replace(spec, fwd_iat_mean=0),
        dataclasses.replace(spec, fwd_lead=SizeLaw(5.0, 0.0)),
        dataclasses.replace(spec, bwd_bulk=SizeLaw(5.0, 0.1, 100, 50)),
    ]
    for b in bad:
        with pytest.raises(SpecInvalid):
            b.validate()
    with pytest.raises(SpecInvalid):
        synth_generate([spec, spec], 1)
    with pytest.raises(SpecInvalid):
        synth_generate([spec], -1)
    with pytest.raises(SpecInvalid):
        make_service_specs(0)
    with pytest.raises(SpecInvalid):
        make_service_specs(3, difficulty=1.5)


def test_catalogue_shape():
    specs = make_service_specs(7, 3, seed=1)
    assert len(specs) == 21
    assert len({(s.name, s.archetype) for s in specs}) == 21
    assert len(set(service_names(40))) == 40
    assert len({len(n) for n in service_names(40)}) == 1


def test_difficulty_pulls_laws_together():
    def spread(difficulty):
        specs = make_service_specs(6, 2, difficulty, seed=0)
        return np.ptp([s.bwd_bulk.mu for s in specs])
    assert spread(0.0) > spread(0.5) > spread(0.9) > 0
    assert spread(1.0) == pytest.approx(0.0, abs=1e-12)


def test_size_law_clipping():
    rng = np.random.default_rng(0)
    sizes = SizeLaw(np.log(1000), 2.0, 10, 1448).draw(rng, 2000)
    assert sizes.min() >= 10 and sizes.max() <= 1448


def test_empty_generation():
    trace = synth_generate(make_service_specs(2), 0)
    assert trace.flows == [] and len(trace.pcap) == 24

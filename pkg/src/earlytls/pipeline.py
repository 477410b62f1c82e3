"""Trace-level plumbing: pcap -> ready flows -> labeled feature vectors."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .capture import PacketSource, decode_frame, open_pcap, PacketStream
from .classifier import Dataset
from .features import LabeledInstance, extract
from .reassembly import FlowReadyEvent, FlowState, FlowTable

__all__ = [
    "TraceResult",
    "LabeledFlow",
    "FlowStore",
    "process_trace",
    "read_manifest",
    "label_events",
]

EVICT_INTERVAL = 1_000_000

PathLike = Union[str, os.PathLike]


@dataclass
class TraceResult:
    events: list
    table_stats: Counter
    decode_stats: Counter
    packets: int = 0
    segments: int = 0
    peak_flows: int = 0

    def summary(self) -> dict:
        t = self.table_stats
        return {
            "packets": self.packets,
            "tcp_segments": self.segments,
            "undecodable": sum(self.decode_stats.values()),
            "flows_created": t["flows_created"],
            "flows_ready": t["flows_ready"],
            "flows_invalid": t["flows_invalid"],
            "flows_evicted": t["flows_evicted"],
            "segments_duplicate": t["segments_duplicate"],
            "peak_flows": self.peak_flows,
        }


def _open(source) -> PacketSource:
    if isinstance(source, (str, os.PathLike)):
        return open_pcap(source)
    if isinstance(source, (bytes, bytearray)):
        return PacketStream.from_bytes(bytes(source))
    return source


def process_trace(source, d_threshold: int, *, port_filter: Optional[int] = 443,
                  table: Optional[FlowTable] = None,
                  on_ready: Optional[Callable[[FlowReadyEvent], None]] = None) -> TraceResult:
    """Run a whole capture through decoding and reassembly.

    ``source`` is a pcap path, raw pcap bytes, or any :class:`PacketSource`.
    Flows still open at the end of the trace are drained, so short flows get
    their late readiness events. Events are returned in emission order and
    also handed to ``on_ready`` as they happen.
    """
    stream = _open(source)
    table = FlowTable() if table is None else table
    decode_stats: Counter = Counter()
    events = []
    emit = events.append if on_ready is None else (lambda e: (events.append(e), on_ready(e)))
    link = stream.link_type
    packets = segments = 0
    next_evict = None
    now = 0
    try:
        while True:
            pkt = stream.next_packet()
            if pkt is None:
                break
            packets += 1
            seg = decode_frame(pkt, link, decode_stats)
            if seg is None:
                continue
            if port_filter is not None and seg.src_port != port_filter \
                    and seg.dst_port != port_filter:
                decode_stats["port_filtered"] += 1
                continue
            segments += 1
            now = seg.ts_micros
            ev = table.ingest(seg, d_threshold)
            if ev is not None:
                emit(ev)
            if next_evict is None:
                next_evict = now + EVICT_INTERVAL
            if now >= next_evict or len(table) > table.capacity:
                next_evict = now + EVICT_INTERVAL
                for _, st in table.evict(now):
                    late = table.late_event(st, now)
                    if late is not None:
                        emit(late)
    finally:
        if hasattr(stream, "close"):
            stream.close()
    peak = table.peak_size
    for ev in table.drain(now):
        emit(ev)
    return TraceResult(events, table.stats, decode_stats, packets, segments, peak)


def read_manifest(path: PathLike) -> dict[str, str]:
    """``<src_ip>:<src_port>-<dst_ip>:<dst_port> <label>`` per line -> mapping."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or "-" not in parts[0]:
                raise ValueError(f"{path}:{lineno}: expected '<flow> <label>'")
            out[parts[0]] = parts[1]
    return out


def _reverse(flow: str) -> str:
    a, b = flow.split("-")
    return f"{b}-{a}"


@dataclass
class LabeledFlow:
    flow: FlowState
    label: str
    meta: dict = field(default_factory=dict)

    def instance(self, d: int) -> LabeledInstance:
        meta = dict(self.meta)
        meta["appdata_available"] = min(d, len(self.flow.appdata_pkts))
        return LabeledInstance(extract(self.flow, d), self.label, meta)


def label_events(events: Iterable[FlowReadyEvent], labels: Union[str, dict] = "sni",
                 trace_id: str = "") -> tuple[list[LabeledFlow], int]:
    """Attach ground-truth labels; returns (labeled flows, count of unlabeled)."""
    out = []
    unlabeled = 0
    for ev in events:
        st = ev.flow
        key = st.oriented()
        if labels == "sni":
            label = st.sni
        else:
            label = labels.get(key) or labels.get(_reverse(key))
        if not label:
            unlabeled += 1
            continue
        out.append(LabeledFlow(st, label, {"flow": key, "trace": trace_id}))
    return out, unlabeled


class FlowStore:
    """Ready flows recorded up to ``max_d`` data packets, re-extractable at any d <= max_d."""

    def __init__(self, flows: Sequence[LabeledFlow], max_d: int):
        self.flows = list(flows)
        self.max_d = max_d
        self._cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_trace(cls, source, max_d: int, labels: Union[str, dict] = "sni", *,
                   port_filter: Optional[int] = 443, trace_id: str = "") -> "FlowStore":
        result = process_trace(source, max_d, port_filter=port_filter)
        flows, _ = label_events(result.events, labels, trace_id)
        store = cls(flows, max_d)
        store.trace_result = result
        return store

    def __len__(self) -> int:
        return len(self.flows)

    @property
    def labels(self) -> list[str]:
        return [f.label for f in self.flows]

    def matrix(self, d: int) -> np.ndarray:
        if d > self.max_d:
            raise ValueError(f"flows were captured with d <= {self.max_d}, asked for {d}")
        if d not in self._cache:
            self._cache[d] = (np.vstack([extract(f.flow, d) for f in self.flows])
                              if self.flows else np.zeros((0, 36)))
        return self._cache[d]

    def dataset(self, d: int, vocabulary=None) -> Dataset:
        return Dataset(self.matrix(d), self.labels, vocabulary)

    def instances(self, d: int) -> list[LabeledInstance]:
        return [f.instance(d) for f in self.flows]

    def filter_min_instances(self, minimum: int) -> "FlowStore":
        counts = Counter(self.labels)
        keep = [f for f in self.flows if counts[f.label] >= minimum]
        return FlowStore(keep, self.max_d)

    def select(self, predicate: Callable[[LabeledFlow], bool]) -> "FlowStore":
        return FlowStore([f for f in self.flows if predicate(f)], self.max_d)

"""Per-flow demultiplexing of TCP segments and TLS phase tracking.

A :class:`FlowTable` maps canonical 4-tuples to :class:`FlowState` objects and
keeps them in most-recently-touched-first order, so the head of the table is
always the flow that just received a segment and the tail is the eviction
candidate. Each direction's payload is put back in sequence order before it
reaches the TLS record scanner.
"""

from __future__ import annotations

import enum
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .capture import TcpSegmentView, ip_to_str
from .tls_wire import (
    ALERT,
    APPLICATION_DATA,
    CHANGE_CIPHER_SPEC,
    HANDSHAKE,
    ClientHelloSummary,
    Malformed,
    MalformedRecord,
    RecordCursor,
    ServerHelloSummary,
    parse_client_hello,
    parse_server_hello,
    scan_segment,
)

__all__ = [
    "FWD",
    "BWD",
    "REORDER_LIMIT",
    "FlowKey",
    "FlowPhase",
    "FlowState",
    "FlowReadyEvent",
    "FlowTable",
    "flow_key_of",
]

FWD = 0
BWD = 1

REORDER_LIMIT = 32
HELLO_BUFFER_LIMIT = 1 << 16
DEFAULT_IDLE_TIMEOUT = 60_000_000
DEFAULT_CAPACITY = 1_000_000

_SEQ_MASK = 0xFFFFFFFF
_FIN, _SYN, _RST, _ACK = 0x01, 0x02, 0x04, 0x10


class FlowKey(NamedTuple):
    """Canonical 4-tuple: ``(ip_a, port_a)`` is the smaller endpoint."""

    ip_a: int
    port_a: int
    ip_b: int
    port_b: int

    def __str__(self) -> str:
        return (f"{ip_to_str(self.ip_a)}:{self.port_a}-"
                f"{ip_to_str(self.ip_b)}:{self.port_b}")


def flow_key_of(src_ip: int, src_port: int, dst_ip: int, dst_port: int) -> FlowKey:
    if (src_ip, src_port) <= (dst_ip, dst_port):
        return FlowKey(src_ip, src_port, dst_ip, dst_port)
    return FlowKey(dst_ip, dst_port, src_ip, src_port)


class FlowPhase(enum.Enum):
    AWAITING_HANDSHAKE = "awaiting_handshake"
    HANDSHAKING = "handshaking"
    DATA = "data"
    READY = "ready"
    INVALID = "invalid"


class _Half:
    """Stream state for the bytes sent by one endpoint."""

    __slots__ = ("cursor", "next_seq", "reorder", "fin", "ccs_seen", "hello_buf", "hello_done")

    def __init__(self) -> None:
        self.cursor = RecordCursor()
        self.next_seq: Optional[int] = None
        self.reorder: dict[int, tuple[int, bytes]] = {}
        self.fin = False
        self.ccs_seen = False
        self.hello_buf = bytearray()
        self.hello_done = False


@dataclass(eq=False)
class FlowState:
    """Everything recorded about one flow.

    Packet lists hold ``(ts_micros, direction, payload_len)`` with direction
    :data:`FWD` (client to server) or :data:`BWD`.
    """

    key: FlowKey
    initiator: tuple[int, int]
    first_seen: int
    last_activity: int = 0
    handshake_pkts: list = field(default_factory=list)
    appdata_pkts: list = field(default_factory=list)
    client_hello: Optional[ClientHelloSummary] = None
    server_hello: Optional[ServerHelloSummary] = None
    phase: FlowPhase = FlowPhase.AWAITING_HANDSHAKE
    closed: bool = False
    client_side: int = 0  # 0: the initiator is the TLS client, 1: the responder is
    swapped: bool = False
    alert_after_data: bool = False
    hello_errors: int = 0
    invalid_reason: Optional[str] = None
    halves: tuple = field(default_factory=lambda: (_Half(), _Half()))

    @property
    def fwd(self) -> _Half:
        return self.halves[self.client_side]

    @property
    def bwd(self) -> _Half:
        return self.halves[self.client_side ^ 1]

    @property
    def client(self) -> tuple[int, int]:
        if self.client_side == 0:
            return self.initiator
        k = self.key
        a = (k.ip_a, k.port_a)
        return (k.ip_b, k.port_b) if a == self.initiator else a

    @property
    def server(self) -> tuple[int, int]:
        k = self.key
        a = (k.ip_a, k.port_a)
        return (k.ip_b, k.port_b) if a == self.client else a

    @property
    def sni(self) -> Optional[str]:
        return self.client_hello.sni if self.client_hello else None

    def oriented(self) -> str:
        """``client_ip:port-server_ip:port``, the label-manifest spelling."""
        (ci, cp), (si, sp) = self.client, self.server
        return f"{ip_to_str(ci)}:{cp}-{ip_to_str(si)}:{sp}"


@dataclass(frozen=True)
class FlowReadyEvent:
    key: FlowKey
    flow: FlowState
    ts_micros: int
    reason: str  # "threshold", "fin", "rst" or "evict"


class FlowTable:
    """Flow demultiplexer with Recently-Accessed-First ordering.

    Single writer. ``capacity`` is enforced by :meth:`evict`, which the caller
    runs as often as it likes (the pipeline does so whenever the table grows
    past capacity or the clock moves on by a second).
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY,
                 idle_timeout_micros: int = DEFAULT_IDLE_TIMEOUT):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.idle_timeout_micros = idle_timeout_micros
        self._flows: OrderedDict[FlowKey, FlowState] = OrderedDict()
        self.stats: Counter = Counter()
        self.peak_size = 0

    def __len__(self) -> int:
        return len(self._flows)

    def __contains__(self, key) -> bool:
        return key in self._flows

    def get(self, key) -> Optional[FlowState]:
        return self._flows.get(key)

    def touch_order(self) -> list[FlowKey]:
        return list(self._flows)

    def flows(self) -> list[FlowState]:
        return list(self._flows.values())

    # -- ingest -----------------------------------------------------------

    def ingest(self, seg: TcpSegmentView, d_threshold: int) -> Optional[FlowReadyEvent]:
        src = (seg.src_ip, seg.src_port)
        dst = (seg.dst_ip, seg.dst_port)
        key = src + dst if src <= dst else dst + src
        flows = self._flows
        st = flows.get(key)
        flags = seg.flags
        ts = seg.ts_micros
        if st is None or (st.closed and flags & (_SYN | _ACK) == _SYN):
            st = FlowState(FlowKey(*key), src, ts)
            flows[st.key] = st
            self.stats["flows_created"] += 1
            if len(flows) > self.peak_size:
                self.peak_size = len(flows)
        flows.move_to_end(key, last=False)
        st.last_activity = ts
        if st.closed:
            return None

        side = 0 if src == st.initiator else 1
        half = st.halves[side]
        event = None
        phase = st.phase
        if phase is not FlowPhase.READY and phase is not FlowPhase.INVALID:
            if flags & _SYN and half.next_seq is None:
                half.next_seq = (seg.seq + 1) & _SEQ_MASK
            if seg.payload:
                event = self._sequence(st, side, half, seg, d_threshold)
        if flags & _RST:
            half.fin = True
            return event or self._terminate(st, ts, "rst")
        if flags & _FIN:
            half.fin = True
            other = st.halves[side ^ 1]
            if other.fin:
                return event or self._terminate(st, ts, "fin")
        return event

    def _sequence(self, st: FlowState, side: int, half: _Half, seg: TcpSegmentView,
                  d_threshold: int) -> Optional[FlowReadyEvent]:
        payload = seg.payload
        seq = seg.seq
        if half.next_seq is None:
            half.next_seq = seq
        diff = ((seq - half.next_seq + 0x80000000) & _SEQ_MASK) - 0x80000000
        if diff > 0:
            held = half.reorder.get(seq)
            if held is None or len(held[1]) < len(payload):
                half.reorder[seq] = (seg.ts_micros, payload)
            self.stats["segments_reordered"] += 1
            if len(half.reorder) > REORDER_LIMIT:
                self._invalidate(st, "reorder_overflow")
            return None
        if diff < 0:
            if -diff >= len(payload):
                self.stats["segments_duplicate"] += 1
                return None
            self.stats["segments_trimmed"] += 1
            payload = payload[-diff:]
        event = self._deliver(st, side, half, seg.ts_micros, payload, d_threshold)
        while half.reorder and st.phase is not FlowPhase.INVALID and event is None:
            nxt = self._pop_next(half)
            if nxt is None:
                break
            ts, data = nxt
            event = self._deliver(st, side, half, ts, data, d_threshold)
        if st.phase is FlowPhase.READY:
            half.reorder.clear()
        return event

    def _pop_next(self, half: _Half) -> Optional[tuple[int, bytes]]:
        """Take the held segment that continues the stream, dropping stale ones."""
        expected = half.next_seq
        while half.reorder:
            if expected in half.reorder:
                return half.reorder.pop(expected)
            for seq in sorted(half.reorder):
                diff = ((seq - expected + 0x80000000) & _SEQ_MASK) - 0x80000000
                if diff < 0:
                    ts, data = half.reorder.pop(seq)
                    if -diff < len(data):
                        return ts, data[-diff:]
                    self.stats["segments_duplicate"] += 1
                    break
            else:
                return None
        return None

    def _deliver(self, st: FlowState, side: int, half: _Half, ts: int, data: bytes,
                 d_threshold: int) -> Optional[FlowReadyEvent]:
        try:
            scan = scan_segment(half.cursor, data)
        except MalformedRecord:
            self._invalidate(st, "malformed_record")
            return None
        half.cursor = scan.cursor
        half.next_seq = (half.next_seq + len(data)) & _SEQ_MASK
        types = scan.content_types

        if not half.hello_done and not half.ccs_seen and (HANDSHAKE in types
                                                          or CHANGE_CIPHER_SPEC in types):
            self._collect_hello(st, side, half, data, scan.runs)

        direction = side ^ st.client_side
        if APPLICATION_DATA in types:
            st.appdata_pkts.append((ts, direction, len(data)))
            st.phase = FlowPhase.DATA
            if len(st.appdata_pkts) >= max(d_threshold, 1):
                st.phase = FlowPhase.READY
                self.stats["flows_ready"] += 1
                return FlowReadyEvent(st.key, st, ts, "threshold")
        elif st.phase is FlowPhase.DATA:
            if ALERT in types:
                st.alert_after_data = True
        elif types:
            st.handshake_pkts.append((ts, direction, len(data)))
            st.phase = FlowPhase.HANDSHAKING
        return None

    def _collect_hello(self, st: FlowState, side: int, half: _Half, data: bytes,
                       runs: list) -> None:
        buf = half.hello_buf
        for start, end, ctype in runs:
            if ctype == CHANGE_CIPHER_SPEC:
                half.ccs_seen = True  # later handshake records are encrypted
                break
            if ctype == HANDSHAKE:
                buf += data[start:end]
        while len(buf) >= 4 and not half.hello_done:
            msg_len = 4 + int.from_bytes(buf[1:4], "big")
            if len(buf) < msg_len:
                if msg_len > HELLO_BUFFER_LIMIT:
                    half.hello_done = True
                    st.hello_errors += 1
                break
            msg = bytes(buf[:msg_len])
            del buf[:msg_len]
            try:
                if msg[0] == 1 and st.client_hello is None:
                    st.client_hello = parse_client_hello(msg)
                    half.hello_done = True
                    if side != st.client_side and not st.swapped and st.server_hello is None:
                        self._swap(st)
                elif msg[0] == 2 and st.server_hello is None:
                    st.server_hello = parse_server_hello(msg)
                    half.hello_done = True
            except Malformed:
                st.hello_errors += 1
                half.hello_done = True
                self.stats["hello_malformed"] += 1
        if half.hello_done or half.ccs_seen:
            half.hello_buf = bytearray()

    def _swap(self, st: FlowState) -> None:
        st.client_side ^= 1
        st.swapped = True
        st.handshake_pkts = [(t, d ^ 1, n) for t, d, n in st.handshake_pkts]
        st.appdata_pkts = [(t, d ^ 1, n) for t, d, n in st.appdata_pkts]
        self.stats["direction_swaps"] += 1

    def _invalidate(self, st: FlowState, reason: str) -> None:
        st.phase = FlowPhase.INVALID
        st.invalid_reason = reason
        for half in st.halves:
            half.reorder.clear()
            half.hello_buf = bytearray()
        self.stats["flows_invalid"] += 1
        self.stats["invalid_" + reason] += 1

    def _terminate(self, st: FlowState, ts: int, reason: str) -> Optional[FlowReadyEvent]:
        st.closed = True
        self.stats["flows_terminated"] += 1
        return self._finish(st, ts, reason)

    def _finish(self, st: FlowState, ts: int, reason: str) -> Optional[FlowReadyEvent]:
        if st.phase is FlowPhase.READY or st.phase is FlowPhase.INVALID:
            return None
        if st.appdata_pkts:
            st.phase = FlowPhase.READY
            self.stats["flows_ready"] += 1
            self.stats["flows_ready_late"] += 1
            return FlowReadyEvent(st.key, st, ts, reason)
        self._invalidate(st, "no_appdata")
        return None

    # -- eviction ---------------------------------------------------------

    def evict(self, now: int) -> list[tuple[FlowKey, FlowState]]:
        """Drop idle flows, then trim to capacity from the least-recent end.

        Returns evicted flows that hold application data but never became
        ready; pass them to :meth:`late_event` to emit their readiness.
        """
        flows = self._flows
        out = []
        limit = now - self.idle_timeout_micros
        while flows:
            key = next(reversed(flows))
            if flows[key].last_activity >= limit:
                break
            self._evicted(key, flows.pop(key), out)
        while len(flows) > self.capacity:
            key, st = flows.popitem(last=True)
            self._evicted(key, st, out)
        return out

    def _evicted(self, key: FlowKey, st: FlowState, out: list) -> None:
        self.stats["flows_evicted"] += 1
        if st.closed or st.phase is FlowPhase.READY or st.phase is FlowPhase.INVALID:
            return
        if st.appdata_pkts:
            out.append((key, st))
        else:
            self._invalidate(st, "no_appdata")

    def late_event(self, state: FlowState, now: int) -> Optional[FlowReadyEvent]:
        return self._finish(state, now, "evict")

    def drain(self, now: int) -> list[FlowReadyEvent]:
        """Evict everything (end of trace) and return the late events."""
        flows = self._flows
        pending = []
        while flows:
            key, st = flows.popitem(last=True)
            self._evicted(key, st, pending)
        events = []
        for _, st in pending:
            ev = self.late_event(st, now)
            if ev is not None:
                events.append(ev)
        return events

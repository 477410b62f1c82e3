"""Batch engine: a whole pcap to ready flows, features and predictions.

The streaming path in :mod:`earlytls.pipeline` handles one segment at a time
through Python objects. This module does the same work on a complete capture
held in memory, in a handful of compiled passes over flat arrays:

1. index the pcap records,
2. decode Ethernet/IPv4/TCP headers,
3. group segments by canonical 4-tuple,
4. run each flow's TCP/TLS state machine and Hello parsers,
5. compute the feature matrix of every ready flow,
6. classify all rows at once.

Step 4 only covers the common case: in-order streams, a ClientHello from the
initiator and a ServerHello from the responder each held in one record, no
gaps long enough for idle eviction, no reuse of a closed 4-tuple. A flow that
strays outside that envelope is marked and its segments are replayed through
the reference :class:`~earlytls.reassembly.FlowTable`, with eviction run at
the same points of the trace as the streaming pipeline would. The result is
the same set of ready flows, in the same emission order, with the same
features as :func:`earlytls.pipeline.process_trace` followed by
:func:`earlytls.features.extract`.
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numba as nb
import numpy as np

from .capture import PacketStream, TcpSegmentView, TruncatedRecord, ip_to_str
from .features import N_FEATURES, extract
from .pipeline import EVICT_INTERVAL, process_trace
from .reassembly import (
    DEFAULT_CAPACITY,
    DEFAULT_IDLE_TIMEOUT,
    FlowReadyEvent,
    FlowTable,
)
from .tls_wire import ClientHelloSummary, ServerHelloSummary, normalize_sni

__all__ = ["BatchResult", "ReadyFlow", "run_batch", "ready_flow_of", "warm_up"]

DECODE_REASONS = ("", "short_ethernet", "short_vlan", "not_ipv4", "unsupported_linktype",
                  "short_ip", "bad_ip_length", "ip_fragment", "not_tcp", "short_tcp",
                  "bad_tcp_offset")
REASONS = ("threshold", "fin", "rst", "evict")

# flow outcomes of the compiled state machine
_NO_EVENT, _EVENT, _FALLBACK = 0, 1, 2
# packet roles
_ROLE_NONE, _ROLE_HANDSHAKE, _ROLE_APPDATA = 0, 1, 2

_MASK32 = 0xFFFFFFFF
_MAX_RECORD = 2**14 + 2048


# -- pass 1 and 2: records and headers ----------------------------------------

@nb.njit(cache=True)
def _u32(buf, off, big):
    b0, b1, b2, b3 = (np.int64(buf[off]), np.int64(buf[off + 1]),
                      np.int64(buf[off + 2]), np.int64(buf[off + 3]))
    if big:
        return (b0 << 24) | (b1 << 16) | (b2 << 8) | b3
    return (b3 << 24) | (b2 << 16) | (b1 << 8) | b0


@nb.njit(cache=True)
def _index_records(buf, big, nsec):
    n = buf.size
    pos = 24
    count = 0
    while pos + 16 <= n:
        incl = _u32(buf, pos + 8, big)
        if pos + 16 + incl > n:
            break
        count += 1
        pos += 16 + incl
    truncated = pos != n
    offs = np.empty(count, np.int64)
    lens = np.empty(count, np.int64)
    ts = np.empty(count, np.int64)
    pos = 24
    for i in range(count):
        sec = _u32(buf, pos, big)
        frac = _u32(buf, pos + 4, big)
        if nsec:
            frac //= 1000
        incl = _u32(buf, pos + 8, big)
        ts[i] = sec * 1_000_000 + frac
        offs[i] = pos + 16
        lens[i] = incl
        pos += 16 + incl
    return offs, lens, ts, truncated


@nb.njit(cache=True)
def _decode(buf, offs, lens, link):
    m = offs.size
    reason = np.zeros(m, np.int8)
    src = np.zeros(m, np.int64)
    dst = np.zeros(m, np.int64)
    sport = np.zeros(m, np.int64)
    dport = np.zeros(m, np.int64)
    seq = np.zeros(m, np.int64)
    flags = np.zeros(m, np.int64)
    poff = np.zeros(m, np.int64)
    plen = np.zeros(m, np.int64)
    for i in range(m):
        base = offs[i]
        n = lens[i]
        if link == 1:
            if n < 14:
                reason[i] = 1
                continue
            etype = np.int64(buf[base + 12]) << 8 | buf[base + 13]
            off = 14
            if etype == 0x8100:
                if n < 18:
                    reason[i] = 2
                    continue
                etype = np.int64(buf[base + 16]) << 8 | buf[base + 17]
                off = 18
            if etype != 0x0800:
                reason[i] = 3
                continue
        elif link == 101 or link == 12:
            off = 0
        else:
            reason[i] = 4
            continue
        if n - off < 20:
            reason[i] = 5
            continue
        ip = base + off
        vihl = np.int64(buf[ip])
        if vihl >> 4 != 4:
            reason[i] = 3
            continue
        ihl = (vihl & 15) * 4
        total = np.int64(buf[ip + 2]) << 8 | buf[ip + 3]
        if ihl < 20 or total < ihl or off + total > n:
            reason[i] = 6
            continue
        frag = np.int64(buf[ip + 6]) << 8 | buf[ip + 7]
        if frag & 0x3FFF:
            reason[i] = 7
            continue
        if buf[ip + 9] != 6:
            reason[i] = 8
            continue
        if total - ihl < 20:
            reason[i] = 9
            continue
        t = ip + ihl
        doff = (np.int64(buf[t + 12]) >> 4) * 4
        if doff < 20 or ihl + doff > total:
            reason[i] = 10
            continue
        src[i] = _u32(buf, ip + 12, True)
        dst[i] = _u32(buf, ip + 16, True)
        sport[i] = np.int64(buf[t]) << 8 | buf[t + 1]
        dport[i] = np.int64(buf[t + 2]) << 8 | buf[t + 3]
        seq[i] = _u32(buf, t + 4, True)
        flags[i] = buf[t + 13] & 0x1F
        poff[i] = t + doff
        plen[i] = ip + total - (t + doff)
    return reason, src, dst, sport, dport, seq, flags, poff, plen


@nb.njit(cache=True)
def _checkpoints(ts, interval):
    """Segment indices after which the streaming pipeline runs idle eviction."""
    out = np.empty(ts.size, np.int64)
    k = 0
    if ts.size:
        nxt = ts[0] + interval
        for i in range(ts.size):
            if ts[i] >= nxt:
                out[k] = i
                k += 1
                nxt = ts[i] + interval
    return out[:k]


# -- pass 4: per-flow state machine ------------------------------------------

@nb.njit(cache=True)
def _scan(buf, start, n, cur, side, runs):
    """Record walk over one in-order segment; mirrors tls_wire.scan_segment.

    ``cur[side]`` holds (remaining, ctype, stash_len, stash0..3). Returns
    (types bitmask, number of body runs, error flag).
    """
    remaining = cur[side, 0]
    ctype = cur[side, 1]
    slen = cur[side, 2]
    head = np.empty(5, np.int64)
    pos = 0
    types = 0
    nruns = 0
    while pos < n:
        if remaining:
            take = min(remaining, n - pos)
            runs[nruns, 0] = pos
            runs[nruns, 1] = pos + take
            runs[nruns, 2] = ctype
            nruns += 1
            types |= 1 << (ctype - 20)
            remaining -= take
            pos += take
            continue
        need = 5 - slen
        for j in range(slen):
            head[j] = cur[side, 3 + j]
        got = min(need, n - pos)
        for j in range(got):
            head[slen + j] = buf[start + pos + j]
        have = slen + got
        if head[0] < 20 or head[0] > 23:
            return 0, 0, True
        ctype = head[0]
        types |= 1 << (ctype - 20)
        if have < 5:
            for j in range(have):
                cur[side, 3 + j] = head[j]
            slen = have
            pos = n
            break
        length = head[3] << 8 | head[4]
        if length > _MAX_RECORD:
            return 0, 0, True
        pos += need
        slen = 0
        remaining = length
    cur[side, 0] = remaining
    cur[side, 1] = ctype
    cur[side, 2] = slen
    return types, nruns, False


@nb.njit(cache=True)
def _extensions(buf, body, end, pos):
    """(error, total length, block start) of an optional extensions block."""
    if pos == end:
        return False, 0, pos
    if pos + 2 > end:
        return True, 0, pos
    ext_len = np.int64(buf[pos]) << 8 | buf[pos + 1]
    pos += 2
    if pos + ext_len != end:
        return True, 0, pos
    return False, ext_len, pos


@nb.njit(cache=True)
def _client_hello(buf, msg, msg_len, out):
    """Parse a ClientHello starting at its handshake header; False when malformed.

    ``out`` receives session id length, suite count, extensions length, SNI
    offset and SNI length (-1 when absent).
    """
    body = msg + 4
    end = msg + msg_len
    pos = body + 34
    if pos + 1 > end:
        return False
    sid = np.int64(buf[pos])
    if sid > 32:
        return False
    pos += 1 + sid
    if pos + 2 > end:
        return False
    cs = np.int64(buf[pos]) << 8 | buf[pos + 1]
    pos += 2
    if cs < 2 or cs % 2:
        return False
    pos += cs
    if pos + 1 > end:
        return False
    pos += 1 + buf[pos]
    if pos > end:
        return False
    err, ext_len, q = _extensions(buf, body, end, pos)
    if err:
        return False
    out[0] = sid
    out[1] = cs // 2
    out[2] = ext_len
    out[3] = 0
    out[4] = -1
    block_end = q + ext_len
    while q < block_end:
        if q + 4 > block_end:
            return False
        etype = np.int64(buf[q]) << 8 | buf[q + 1]
        elen = np.int64(buf[q + 2]) << 8 | buf[q + 3]
        q += 4
        if q + elen > block_end:
            return False
        if etype == 0 and elen >= 2:
            list_len = np.int64(buf[q]) << 8 | buf[q + 1]
            r = q + 2
            lend = min(q + 2 + list_len, q + elen)
            while r + 3 <= lend:
                name_type = buf[r]
                name_len = np.int64(buf[r + 1]) << 8 | buf[r + 2]
                r += 3
                if r + name_len > lend:
                    return False
                if name_type == 0:
                    out[3] = r
                    out[4] = name_len
                    return True
                r += name_len
        q += elen
    return True


@nb.njit(cache=True)
def _server_hello(buf, msg, msg_len, out):
    body = msg + 4
    end = msg + msg_len
    pos = body + 34
    if pos + 1 > end:
        return False
    sid = np.int64(buf[pos])
    if sid > 32:
        return False
    pos += 1 + sid
    if pos + 3 > end:
        return False
    suite = np.int64(buf[pos]) << 8 | buf[pos + 1]
    pos += 3
    err, ext_len, _ = _extensions(buf, body, end, pos)
    if err:
        return False
    out[5] = sid
    out[6] = suite
    out[7] = ext_len
    return True


@nb.njit(cache=True)
def _flows(buf, order, gstart, ts, src_ep, seq, flags, poff, plen, d, idle, end_ts,
           n_segments):
    """Run every flow's state machine.

    Per flow returns outcome, event segment index, event timestamp, reason
    code, last-touch segment index and hello fields; per segment the role
    (none/handshake/appdata).
    """
    n_groups = gstart.size - 1
    outcome = np.zeros(n_groups, np.int8)
    ev_at = np.zeros(n_groups, np.int64)
    ev_ts = np.zeros(n_groups, np.int64)
    ev_reason = np.zeros(n_groups, np.int8)
    last = np.zeros(n_groups, np.int64)
    hello = np.full((n_groups, 10), -1, np.int64)  # ch(5), sh(3), has_ch, has_sh
    role = np.zeros(n_segments, np.int8)
    cur = np.zeros((2, 7), np.int64)
    runs = np.zeros((1 << 14, 3), np.int64)
    need = max(d, 1)
    for gi in range(n_groups):
        lo, hi = gstart[gi], gstart[gi + 1]
        first = order[lo]
        init = src_ep[first]
        closed = False
        phase = 0  # 0 awaiting, 1 handshaking, 2 data, 3 ready, 4 invalid
        nseq0, nseq1 = np.int64(-1), np.int64(-1)
        fin0, fin1 = False, False
        done0, done1 = False, False
        ccs0, ccs1 = False, False
        have_ch, have_sh = False, False
        cur[:, :] = 0
        n_app = 0
        fallback = False
        prev_ts = ts[first]
        for k in range(lo, hi):
            g = order[k]
            if ts[g] - prev_ts > idle:
                fallback = True
                break
            prev_ts = ts[g]
            flg = flags[g]
            if closed:
                if flg & 0x12 == 0x02:
                    fallback = True
                    break
                continue
            side = 0 if src_ep[g] == init else 1
            event = False
            if phase != 3 and phase != 4:
                if flg & 0x02:
                    if side == 0 and nseq0 < 0:
                        nseq0 = (seq[g] + 1) & _MASK32
                    elif side == 1 and nseq1 < 0:
                        nseq1 = (seq[g] + 1) & _MASK32
                n = plen[g]
                if n > 0:
                    nseq = nseq0 if side == 0 else nseq1
                    if nseq < 0:
                        nseq = seq[g]
                    if seq[g] != nseq:
                        fallback = True
                        break
                    if n > runs.shape[0] * 5 - 10:
                        runs = np.zeros((n // 5 + 4, 3), np.int64)
                    start = poff[g]
                    types, nruns, bad = _scan(buf, start, n, cur, side, runs)
                    if bad:
                        fallback = True
                        break
                    nseq = (nseq + n) & _MASK32
                    if side == 0:
                        nseq0 = nseq
                    else:
                        nseq1 = nseq
                    done = done0 if side == 0 else done1
                    ccs = ccs0 if side == 0 else ccs1
                    if not done and not ccs and types & 0b0101:
                        # hello collection: the first handshake message must sit
                        # whole at the start of the first handshake run
                        msg = -1
                        msg_room = 0
                        for r in range(nruns):
                            if runs[r, 2] == 20:
                                ccs = True
                                break
                            if runs[r, 2] == 22:
                                msg = start + runs[r, 0]
                                msg_room = runs[r, 1] - runs[r, 0]
                                break
                        if msg >= 0:
                            if msg_room < 4:
                                fallback = True
                                break
                            mlen = 4 + (np.int64(buf[msg + 1]) << 16
                                        | np.int64(buf[msg + 2]) << 8 | buf[msg + 3])
                            if mlen > msg_room:
                                fallback = True
                                break
                            mtype = buf[msg]
                            if side == 0 and mtype == 1 and not have_ch:
                                if not _client_hello(buf, msg, mlen, hello[gi]):
                                    fallback = True
                                    break
                                have_ch = True
                                done0 = True
                            elif side == 1 and mtype == 2 and not have_sh:
                                if not _server_hello(buf, msg, mlen, hello[gi]):
                                    fallback = True
                                    break
                                have_sh = True
                                done1 = True
                            else:
                                fallback = True
                                break
                        elif ccs:
                            if side == 0:
                                ccs0 = True
                            else:
                                ccs1 = True
                    if types & 0b1000:
                        role[g] = _ROLE_APPDATA
                        n_app += 1
                        phase = 2
                        if n_app >= need:
                            phase = 3
                            event = True
                            outcome[gi] = _EVENT
                            ev_at[gi] = g
                            ev_ts[gi] = ts[g]
                            ev_reason[gi] = 0
                    elif phase == 2:
                        pass
                    elif types:
                        role[g] = _ROLE_HANDSHAKE
                        phase = 1
            terminate = -1
            if flg & 0x04:
                if side == 0:
                    fin0 = True
                else:
                    fin1 = True
                if not event:
                    terminate = 2
            elif flg & 0x01:
                if side == 0:
                    fin0 = True
                else:
                    fin1 = True
                if fin0 and fin1 and not event:
                    terminate = 1
            if terminate >= 0:
                closed = True
                if phase != 3 and phase != 4:
                    if n_app:
                        phase = 3
                        outcome[gi] = _EVENT
                        ev_at[gi] = g
                        ev_ts[gi] = ts[g]
                        ev_reason[gi] = terminate
                    else:
                        phase = 4
        last[gi] = order[hi - 1]
        if not fallback and end_ts - ts[order[hi - 1]] > idle:
            fallback = True
        if fallback:
            outcome[gi] = _FALLBACK
            for k in range(lo, hi):
                role[order[k]] = _ROLE_NONE
            continue
        hello[gi, 8] = 1 if have_ch else 0
        hello[gi, 9] = 1 if have_sh else 0
        if not closed and phase != 3 and phase != 4 and n_app:
            outcome[gi] = _EVENT
            ev_at[gi] = n_segments
            ev_ts[gi] = end_ts
            ev_reason[gi] = 3
    return outcome, ev_at, ev_ts, ev_reason, last, hello, role


# -- pass 5: features --------------------------------------------------------

@nb.njit(cache=True)
def _rank(ordered, p):
    n = ordered.size
    return ordered[max(1, (p * n + 99) // 100) - 1]


@nb.njit(cache=True)
def _size_stats(vals, n, out, at):
    if n == 0:
        return
    s = np.sort(vals[:n])
    s1 = 0
    s2 = 0
    for x in s:
        s1 += x
        s2 += x * x
    out[at] = s1 / n
    out[at + 1] = _rank(s, 25)
    out[at + 2] = _rank(s, 50)
    out[at + 3] = _rank(s, 75)
    out[at + 4] = (n * s2 - s1 * s1) / (n * n)
    out[at + 5] = s[-1]


@nb.njit(cache=True)
def _iat(stamps, n, out, at):
    if n < 2:
        return
    t = np.sort(stamps[:n])
    gaps = np.sort(t[1:] - t[:-1])
    out[at] = _rank(gaps, 25)
    out[at + 1] = _rank(gaps, 50)
    out[at + 2] = _rank(gaps, 75)


@nb.njit(cache=True)
def _features(groups, order, gstart, role, src_ep, init_ep, ts, plen, hello, d):
    X = np.zeros((groups.size, 36))
    for row in range(groups.size):
        gi = groups[row]
        lo, hi = gstart[gi], gstart[gi + 1]
        m = hi - lo
        c_size = np.empty((2, m), np.int64)
        c_ts = np.empty((2, m), np.int64)
        a_size = np.empty((2, m), np.int64)
        nc = np.zeros(2, np.int64)
        na = np.zeros(2, np.int64)
        used = 0
        for k in range(lo, hi):
            g = order[k]
            r = role[g]
            if r == _ROLE_NONE:
                continue
            side = 0 if src_ep[g] == init_ep[row] else 1
            if r == _ROLE_APPDATA:
                if used >= d:
                    continue
                used += 1
                a_size[side, na[side]] = plen[g]
                na[side] += 1
            c_size[side, nc[side]] = plen[g]
            c_ts[side, nc[side]] = ts[g]
            nc[side] += 1
        out = X[row]
        for side in range(2):
            _size_stats(c_size[side], nc[side], out, 9 * side)
            _iat(c_ts[side], nc[side], out, 9 * side + 6)
            _size_stats(a_size[side], na[side], out, 24 + 6 * side)
        h = hello[gi]
        if h[8] == 1:
            out[18], out[19], out[20] = h[0], h[1], h[2]
        if h[9] == 1:
            out[21], out[22], out[23] = h[5], h[6], h[7]
    return X


# -- driver --------------------------------------------------------------------

class ReadyFlow(NamedTuple):
    """Engine-neutral view of one ready flow (for comparisons and labels)."""

    client: tuple
    server: tuple
    ts_micros: int
    reason: str
    client_hello: Optional[ClientHelloSummary]
    server_hello: Optional[ServerHelloSummary]
    handshake_pkts: tuple
    appdata_pkts: tuple

    def oriented(self) -> str:
        (ci, cp), (si, sp) = self.client, self.server
        return f"{ip_to_str(ci)}:{cp}-{ip_to_str(si)}:{sp}"


def ready_flow_of(ev: FlowReadyEvent) -> ReadyFlow:
    st = ev.flow
    return ReadyFlow(st.client, st.server, ev.ts_micros, ev.reason, st.client_hello,
                     st.server_hello, tuple(st.handshake_pkts), tuple(st.appdata_pkts))


@dataclass
class BatchResult:
    """Ready flows in emission order with their features (and predictions)."""

    features: np.ndarray
    client_ep: np.ndarray  # ip << 16 | port
    server_ep: np.ndarray
    ts_micros: np.ndarray
    reason: np.ndarray  # index into REASONS
    packets: int = 0
    segments: int = 0
    n_flows: int = 0
    n_fallback: int = 0
    decode_stats: Counter = field(default_factory=Counter)
    predictions: Optional[np.ndarray] = None
    # internals used to rebuild ReadyFlow views on demand: row i comes from the
    # compiled machine (source 0, index into its flows) or the replay (source 1,
    # index into the replayed events)
    _source: np.ndarray = field(default=None, repr=False)
    _index: np.ndarray = field(default=None, repr=False)
    _fast: Optional["_FastViews"] = field(default=None, repr=False)
    _slow: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.features)

    def oriented(self, i: int) -> str:
        c, s = int(self.client_ep[i]), int(self.server_ep[i])
        return f"{ip_to_str(c >> 16)}:{c & 0xFFFF}-{ip_to_str(s >> 16)}:{s & 0xFFFF}"

    def flow(self, i: int) -> ReadyFlow:
        if self._source[i] == 0:
            return self._fast.build(int(self._index[i]), self.ts_micros[i], self.reason[i])
        return ready_flow_of(self._slow[self._index[i]])

    def flows(self) -> list[ReadyFlow]:
        return [self.flow(i) for i in range(len(self))]

    def sni(self, i: int) -> Optional[str]:
        ch = self.flow(i).client_hello
        return ch.sni if ch else None


def _read(source) -> tuple[bytes, np.ndarray, int, bool, bool]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = bytes(source)
    stream = PacketStream.from_bytes(data[:24])  # validates the global header
    buf = np.frombuffer(data, dtype=np.uint8)
    return data, buf, stream.link_type, stream.byteorder == ">", stream.nanosecond


def _replay(raw, keep_idx, ts, src, dst, sport, dport, seq, flags, poff, plen, segs,
            checkpoints, d, capacity, idle):
    """Reference state machine over a subset of segments; returns keyed events."""
    table = FlowTable(capacity, idle)
    out = []
    last_g: dict[int, int] = {}
    cps = list(checkpoints)
    ci = 0
    for g in segs:
        while ci < len(cps) and cps[ci] < g:
            _evict_into(table, cps[ci], ts[keep_idx[cps[ci]]], last_g, out)
            ci += 1
        i = keep_idx[g]
        seg = TcpSegmentView(int(ts[i]), int(src[i]), int(dst[i]), int(sport[i]),
                             int(dport[i]), int(seq[i]), int(flags[i]),
                             raw[poff[i]:poff[i] + plen[i]])
        ev = table.ingest(seg, d)
        key = (seg.src_ip, seg.src_port, seg.dst_ip, seg.dst_port)
        st = table.get(key if key[:2] <= key[2:] else key[2:] + key[:2])
        last_g[id(st)] = g
        if ev is not None:
            out.append(((g, 0, 0), ev))
        if ci < len(cps) and cps[ci] == g:
            _evict_into(table, g, seg.ts_micros, last_g, out)
            ci += 1
    while ci < len(cps):
        _evict_into(table, cps[ci], ts[keep_idx[cps[ci]]], last_g, out)
        ci += 1
    return table, last_g, out


def _evict_into(table, g, now, last_g, out):
    for _, st in table.evict(int(now)):
        ev = table.late_event(st, int(now))
        if ev is not None:
            out.append(((g, 1, last_g[id(st)]), ev))


def run_batch(source, d_threshold: int, *, port_filter: Optional[int] = 443,
              capacity: int = DEFAULT_CAPACITY, idle_timeout_micros: int = DEFAULT_IDLE_TIMEOUT,
              feature_d: Optional[int] = None, model=None) -> BatchResult:
    """Process a whole capture (path or bytes) in compiled passes.

    ``feature_d`` defaults to ``d_threshold``. With a ``model`` (a
    :class:`~earlytls.classifier.DecisionTree`) every ready flow is classified
    and ``predictions`` holds label indices.
    """
    if d_threshold < 0:
        raise ValueError("d_threshold must be >= 0")
    feature_d = d_threshold if feature_d is None else feature_d
    data, buf, link, big, nsec = _read(source)
    offs, lens, ts_all, truncated = _index_records(buf, big, nsec)
    if truncated:
        raise TruncatedRecord(f"pcap ends inside record {len(offs)}")
    reason, src, dst, sport, dport, seq, flags, poff, plen = _decode(buf, offs, lens, link)
    decode_stats: Counter = Counter()
    for code, count in zip(*np.unique(reason, return_counts=True)):
        if code:
            decode_stats[DECODE_REASONS[code]] += int(count)
    keep = reason == 0
    if port_filter is not None:
        ported = keep & ((sport == port_filter) | (dport == port_filter))
        if (keep & ~ported).any():
            decode_stats["port_filtered"] += int((keep & ~ported).sum())
        keep = ported
    keep_idx = np.flatnonzero(keep)
    n_seg = keep_idx.size
    ts = ts_all[keep_idx]
    s_ep = src[keep_idx] << 16 | sport[keep_idx]
    d_ep = dst[keep_idx] << 16 | dport[keep_idx]
    lo_ep = np.minimum(s_ep, d_ep)
    hi_ep = np.maximum(s_ep, d_ep)
    order = np.lexsort((hi_ep, lo_ep))
    if n_seg:
        brk = np.flatnonzero((np.diff(lo_ep[order]) != 0) | (np.diff(hi_ep[order]) != 0)) + 1
        gstart = np.concatenate(([0], brk, [n_seg])).astype(np.int64)
    else:
        gstart = np.zeros(1, np.int64)
    n_groups = gstart.size - 1
    end_ts = int(ts[-1]) if n_seg else 0
    checkpoints = _checkpoints(ts, EVICT_INTERVAL)

    if n_groups > capacity:
        # capacity eviction couples all flows; leave it to the reference machine
        return _reference(data, d_threshold, port_filter, capacity, idle_timeout_micros,
                          feature_d, model, int(offs.size), int(n_seg), n_groups)
    outcome, ev_at, ev_ts, ev_reason, last, hello, role = _flows(
        buf, order, gstart, ts, s_ep, seq[keep_idx], flags[keep_idx],
        poff[keep_idx], plen[keep_idx], d_threshold, idle_timeout_micros, end_ts, n_seg)

    # fast flows
    fast = np.flatnonzero(outcome == _EVENT)
    init_ep = s_ep[order[gstart[fast]]]
    X_fast = _features(fast, order, gstart, role, s_ep, init_ep, ts, plen[keep_idx],
                       hello, feature_d)
    resp_ep = np.where(lo_ep[order[gstart[fast]]] == init_ep,
                       hi_ep[order[gstart[fast]]], lo_ep[order[gstart[fast]]])

    # fallback flows through the reference machine
    slow = np.flatnonzero(outcome == _FALLBACK)
    slow_segs = (np.sort(np.concatenate([order[gstart[g]:gstart[g + 1]] for g in slow]))
                 if slow.size else np.zeros(0, np.int64))
    table, last_g, slow_events = _replay(
        data, keep_idx, ts_all, src, dst, sport, dport, seq, flags, poff, plen,
        slow_segs.tolist(), checkpoints.tolist(), d_threshold, capacity,
        idle_timeout_micros)
    for ev in table.drain(end_ts):
        slow_events.append(((n_seg, 1, last_g[id(ev.flow)]), ev))

    # merge in emission order: (segment index, in-segment before eviction, last touch)
    at = ev_at[fast]
    late = at >= n_seg
    k0 = np.concatenate([at, [k[0] for k, _ in slow_events]]).astype(np.int64)
    k1 = np.concatenate([late, [k[1] for k, _ in slow_events]]).astype(np.int64)
    k2 = np.concatenate([np.where(late, last[fast], 0),
                         [k[2] for k, _ in slow_events]]).astype(np.int64)
    perm = np.lexsort((k2, k1, k0))
    events = [ev for _, ev in slow_events]
    X_slow = (np.vstack([extract(ev.flow, feature_d) for ev in events])
              if events else np.zeros((0, N_FEATURES)))
    c_slow, s_slow = [], []
    for ev in events:
        (ci, cp), (si, sp) = ev.flow.client, ev.flow.server
        c_slow.append(ci << 16 | cp)
        s_slow.append(si << 16 | sp)
    X = np.vstack([X_fast, X_slow])[perm]
    c_ep = np.concatenate([init_ep, np.array(c_slow, np.int64)])[perm]
    sv_ep = np.concatenate([resp_ep, np.array(s_slow, np.int64)])[perm]
    t_out = np.concatenate([ev_ts[fast], [ev.ts_micros for ev in events]]).astype(np.int64)[perm]
    r_out = np.concatenate([ev_reason[fast],
                            [REASONS.index(ev.reason) for ev in events]]).astype(np.int8)[perm]
    source_of = (perm >= fast.size).astype(np.int8)
    index = np.where(source_of == 0, perm, perm - fast.size)
    fast_view = _FastViews(buf, order, gstart, role, s_ep, ts, plen[keep_idx], hello,
                           fast, init_ep, resp_ep)
    result = BatchResult(X, c_ep, sv_ep, t_out, r_out, int(offs.size), int(n_seg),
                         n_groups, int(slow.size), decode_stats, None,
                         source_of, index, fast_view, events)
    if model is not None:
        result.predictions = model.predict_indices(X)
    return result


def _reference(data, d, port_filter, capacity, idle, feature_d, model, packets, segments,
               n_groups) -> BatchResult:
    res = process_trace(data, d, port_filter=port_filter, table=FlowTable(capacity, idle))
    events = res.events
    n = len(events)
    X = (np.vstack([extract(ev.flow, feature_d) for ev in events])
         if events else np.zeros((0, N_FEATURES)))
    ends = [(ev.flow.client, ev.flow.server) for ev in events]
    c_ep = np.array([ci << 16 | cp for (ci, cp), _ in ends], np.int64)
    s_ep = np.array([si << 16 | sp for _, (si, sp) in ends], np.int64)
    t_out = np.array([ev.ts_micros for ev in events], np.int64)
    r_out = np.array([REASONS.index(ev.reason) for ev in events], np.int8)
    result = BatchResult(X, c_ep, s_ep, t_out, r_out, packets, segments, n_groups,
                         n_groups, res.decode_stats, None, np.ones(n, np.int8),
                         np.arange(n), None, events)
    if model is not None:
        result.predictions = model.predict_indices(X)
    return result


class _FastViews:
    """Rebuilds ReadyFlow tuples for flows finished by the compiled machine."""

    def __init__(self, buf, order, gstart, role, s_ep, ts, plen, hello, groups, client,
                 server):
        self.buf, self.order, self.gstart, self.role = buf, order, gstart, role
        self.s_ep, self.ts, self.plen, self.hello = s_ep, ts, plen, hello
        self.groups, self.client, self.server = groups, client, server

    def build(self, i: int, ts: int, reason: int) -> ReadyFlow:
        g = self.groups[i]
        client, server = int(self.client[i]), int(self.server[i])
        h = self.hello[g]
        ch = sh = None
        if h[8] == 1:
            sni = None
            if h[4] >= 0:
                sni = normalize_sni(self.buf[h[3]:h[3] + h[4]].tobytes())
            ch = ClientHelloSummary(int(h[0]), int(h[1]), int(h[2]), sni)
        if h[9] == 1:
            sh = ServerHelloSummary(int(h[5]), int(h[6]), int(h[7]))
        hs, app = [], []
        for k in range(self.gstart[g], self.gstart[g + 1]):
            s = self.order[k]
            r = self.role[s]
            if r:
                pkt = (int(self.ts[s]), 0 if self.s_ep[s] == client else 1, int(self.plen[s]))
                (hs if r == _ROLE_HANDSHAKE else app).append(pkt)
        return ReadyFlow((client >> 16, client & 0xFFFF), (server >> 16, server & 0xFFFF),
                         int(ts), REASONS[reason], ch, sh, tuple(hs), tuple(app))


def warm_up() -> None:
    """Compile (or load from cache) every kernel on a tiny synthetic capture."""
    from .synth import make_service_specs, synth_generate

    trace = synth_generate(make_service_specs(2, 1, seed=0), 2, seed=0)
    run_batch(trace.pcap, 5)

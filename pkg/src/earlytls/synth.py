"""Deterministic synthetic HTTPS traces.

Each synthetic flow is a complete TLS 1.2-style session over IPv4/TCP:
three-way handshake, ClientHello carrying the service hostname as SNI, a
server flight (ServerHello, Certificate, ServerHelloDone) split at the MSS,
client key exchange with ChangeCipherSpec and Finished, the server's
ChangeCipherSpec and Finished, a run of application-data records, and a
FIN/FIN/ACK close. Flows are interleaved by timestamp into one classic pcap.

Services are grouped onto a few shared "server stacks" (same certificate
chain, same ServerHello shape, same RTT), so the handshake alone cannot tell
every service apart. Application traffic is drawn per (service, client
archetype); the first packet in each direction has its own size law, which
makes statistics over the first few data packets drift as more packets are
included.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .capture import LINKTYPE_ETHERNET, PcapWriter, ip_to_str
from .tls_wire import ClientHelloSummary, ServerHelloSummary

__all__ = [
    "SpecInvalid",
    "SizeLaw",
    "HandshakeProfile",
    "SynthServiceSpec",
    "FlowTruth",
    "SynthTrace",
    "build_client_hello",
    "build_server_hello",
    "make_service_specs",
    "synth_generate",
    "MSS",
]

MSS = 1448
SERVER_PORT = 443

_CIPHER_POOL = (
    0xC02B, 0xC02F, 0xC02C, 0xC030, 0xCCA9, 0xCCA8, 0xC013, 0xC014, 0x009C, 0x009D,
    0x002F, 0x0035, 0x000A, 0x1301, 0x1302, 0x1303, 0xC009, 0xC00A, 0x0033, 0x0039,
    0x0067, 0x006B, 0x009E, 0x009F, 0xC023, 0xC024, 0xC027, 0xC028, 0x003C, 0x003D,
)

_WORDS = (
    "alpha", "bravo", "cobra", "delta", "ember", "fable", "gamma", "haven", "indie",
    "jolly", "koala", "lemon", "mango", "noble", "olive", "pixel", "quilt", "radar",
    "sable", "tango", "ultra", "vivid", "waltz", "xenon", "yacht", "zebra",
)


class SpecInvalid(ValueError):
    pass


@dataclass(frozen=True)
class SizeLaw:
    """Log-normal payload size law, clipped to ``[lo, hi]`` bytes."""

    mu: float
    sigma: float
    lo: int = 6
    hi: int = MSS

    def draw(self, rng: np.random.Generator, n: Optional[int] = None):
        x = np.rint(rng.lognormal(self.mu, self.sigma, n))
        return np.clip(x, self.lo, self.hi).astype(int)


@dataclass(frozen=True)
class HandshakeProfile:
    ch_session_id_len: int
    ch_cipher_suites: int
    ch_extensions_len: int
    sh_session_id_len: int
    sh_cipher_suite: int
    sh_extensions_len: int
    certificate_len: int
    certificate_jitter: int = 0
    ch_extension_jitter: Sequence[int] = (0,)
    session_ticket: bool = False
    rtt_micros: float = 20_000.0


@dataclass(frozen=True)
class SynthServiceSpec:
    name: str
    archetype: str
    handshake: HandshakeProfile
    fwd_lead: SizeLaw
    bwd_lead: SizeLaw
    fwd_bulk: SizeLaw
    bwd_bulk: SizeLaw
    bwd_share: float = 0.7  # chance that a data packet after the lead pair is server-sent
    count_p: float = 0.12   # geometric parameter of the data packet count
    count_min: int = 2      # a request and its response at least
    count_max: int = 20
    fwd_iat_mean: float = 3_000.0
    bwd_iat_mean: float = 1_500.0
    server_ip: int = 0xC6336401

    def validate(self) -> None:
        if not self.name:
            raise SpecInvalid("empty service name")
        for law in (self.fwd_lead, self.bwd_lead, self.fwd_bulk, self.bwd_bulk):
            if law.sigma <= 0 or law.lo < 6 or law.hi < law.lo:
                raise SpecInvalid(f"{self.name}: bad size law {law}")
        if not 0 < self.count_p <= 1 or not 1 <= self.count_min <= self.count_max:
            raise SpecInvalid(f"{self.name}: bad packet count law")
        if not 0 <= self.bwd_share <= 1:
            raise SpecInvalid(f"{self.name}: bwd_share outside [0, 1]")
        if self.fwd_iat_mean <= 0 or self.bwd_iat_mean <= 0 or self.handshake.rtt_micros <= 0:
            raise SpecInvalid(f"{self.name}: timing parameters must be positive")


@dataclass
class FlowTruth:
    """What the generator put on the wire for one flow."""

    label: str
    archetype: str
    client: tuple
    server: tuple
    client_hello: ClientHelloSummary
    server_hello: ServerHelloSummary
    handshake_pkts: list = field(default_factory=list)  # (ts, dir, payload_len)
    appdata_pkts: list = field(default_factory=list)

    @property
    def manifest_key(self) -> str:
        (ci, cp), (si, sp) = self.client, self.server
        return f"{ip_to_str(ci)}:{cp}-{ip_to_str(si)}:{sp}"


@dataclass
class SynthTrace:
    pcap: bytes
    flows: list

    def manifest_lines(self) -> list[str]:
        return [f"{f.manifest_key} {f.label}" for f in self.flows]

    def write(self, pcap_path: Union[str, os.PathLike],
              manifest_path: Optional[Union[str, os.PathLike]] = None) -> None:
        with open(pcap_path, "wb") as fh:
            fh.write(self.pcap)
        if manifest_path is not None:
            with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
                fh.writelines(line + "\n" for line in self.manifest_lines())


# -- TLS message builders -----------------------------------------------------

def _handshake(msg_type: int, body: bytes) -> bytes:
    return bytes([msg_type]) + len(body).to_bytes(3, "big") + body


def _ext(etype: int, data: bytes) -> bytes:
    return struct.pack("!HH", etype, len(data)) + data


def _client_extensions(total: int, sni: Optional[str]) -> bytes:
    block = b""
    if sni is not None:
        name = sni.encode("ascii")
        entry = b"\x00" + struct.pack("!H", len(name)) + name
        block += _ext(0, struct.pack("!H", len(entry)) + entry)
    room = total - len(block)
    if room == 12 or room >= 16:  # never leave 1-3 bytes, too few for an extension
        groups = struct.pack("!HHH", 0x001D, 0x0017, 0x0018)
        block += _ext(10, struct.pack("!H", len(groups)) + groups)
        room = total - len(block)
    if room >= 4:
        block += _ext(21, bytes(room - 4))
    if len(block) != total:
        raise SpecInvalid(f"extensions length {total} cannot be laid out"
                          f"{' around the SNI' if sni else ''}")
    return block


def build_client_hello(summary: ClientHelloSummary, random: bytes = bytes(32),
                       ciphers: Optional[Sequence[int]] = None) -> bytes:
    """ClientHello handshake message (header included) with exactly the given summary."""
    sid, count, ext_len, sni = (summary.session_id_len, summary.cipher_suites_count,
                                summary.extensions_total_len, summary.sni)
    if not 0 <= sid <= 32:
        raise SpecInvalid("session id length must be 0..32")
    if not 1 <= count <= 0x7FFF:
        raise SpecInvalid("cipher suite count must be 1..32767")
    if not 0 <= ext_len <= 0xFFFF:
        raise SpecInvalid("extensions length must be 0..65535")
    if sni is not None and (not sni or sni != sni.lower() or sni.endswith(".")
                            or not sni.isascii()):
        raise SpecInvalid("SNI must be a non-empty normalized ASCII hostname")
    if ciphers is None:
        ciphers = [(_CIPHER_POOL[i] if i < len(_CIPHER_POOL) else 0x0100 + i)
                   for i in range(count)]
    body = b"\x03\x03" + random[:32].ljust(32, b"\0")
    body += bytes([sid]) + bytes(range(1, sid + 1))
    body += struct.pack("!H", 2 * count) + b"".join(struct.pack("!H", c) for c in ciphers)
    body += b"\x01\x00"
    if ext_len or sni is not None:
        body += struct.pack("!H", ext_len) + _client_extensions(ext_len, sni)
    return _handshake(1, body)


def build_server_hello(summary: ServerHelloSummary, random: bytes = bytes(32)) -> bytes:
    sid, suite, ext_len = (summary.session_id_len, summary.chosen_cipher_suite,
                           summary.extensions_total_len)
    if not 0 <= sid <= 32:
        raise SpecInvalid("session id length must be 0..32")
    if ext_len and ext_len < 4:
        raise SpecInvalid("a non-empty extensions block needs at least 4 bytes")
    body = b"\x03\x03" + random[:32].ljust(32, b"\0")
    body += bytes([sid]) + bytes(range(100, 100 + sid)) + struct.pack("!H", suite) + b"\x00"
    if ext_len:
        body += struct.pack("!H", ext_len) + _ext(0xFF01, bytes(ext_len - 4))
    return _handshake(2, body)


def _record(ctype: int, body: bytes, version: bytes = b"\x03\x03") -> bytes:
    return bytes([ctype]) + version + struct.pack("!H", len(body)) + body


# -- service catalogue ----------------------------------------------------------

def service_names(n: int) -> list[str]:
    """``n`` distinct hostnames of identical length."""
    names = []
    for i in range(n):
        word = _WORDS[i % len(_WORDS)]
        names.append(f"{word}{i // len(_WORDS):02d}.example.com")
    return names


_ARCHETYPE_CLIENTS = (
    # (session id len, cipher suite count, extensions length, extension jitter)
    (32, 15, 411, (0, 4, 8)),
    (0, 9, 198, (0, 16)),
    (32, 23, 290, (0, 12)),
    (0, 18, 512, (0,)),
    (32, 11, 145, (0, 6, 20)),
)


def make_service_specs(n_services: int, n_archetypes: int = 1, difficulty: float = 0.0,
                       seed: int = 0, n_stacks: Optional[int] = None) -> list[SynthServiceSpec]:
    """Catalogue of ``n_services`` x ``n_archetypes`` service specs.

    ``difficulty`` in [0, 1] pulls every (service, archetype) size law toward a
    common centre: 0 keeps them well separated, 1 makes them identical.
    """
    if n_services < 1 or n_archetypes < 1:
        raise SpecInvalid("need at least one service and one archetype")
    if not 0.0 <= difficulty <= 1.0:
        raise SpecInvalid("difficulty must be within [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EC5]))
    names = service_names(n_services)
    n_stacks = n_stacks or max(1, math.ceil(n_services / 3))
    stack_of = [i % n_stacks for i in range(n_services)]
    stacks = []
    for s in range(n_stacks):
        stacks.append(dict(
            sh_sid=int(rng.choice([0, 32])),
            cert=int(rng.integers(1800, 4200)),
            cert_jitter=int(rng.integers(0, 3)) * 8,
            ticket=bool(rng.integers(0, 2)),
            rtt=float(rng.uniform(8_000, 60_000)),
            ip_base=0xC6336400 + 16 * s,  # 198.51.100.0/24
        ))

    # Size levels in log space. Lead packets (the first client and the first
    # server data packet) live below the bulk packets. The client lead only takes
    # a few levels, so it is ambiguous on its own; the server lead and both bulk
    # laws are unique per (service, archetype). At difficulty 0 every law is
    # truncated at 3 sigma and neighbouring levels do not overlap.
    shrink = 1.0 - difficulty
    sigma = 0.012 + 0.25 * difficulty
    lead_lo, lead_hi = math.log(60), math.log(330)
    bulk_lo, bulk_hi = math.log(420), math.log(1400)
    centre = (lead_lo + bulk_hi) / 2

    def levels(lo: float, hi: float, k: int) -> np.ndarray:
        return np.linspace(lo, hi, k) if k > 1 else np.array([(lo + hi) / 2])

    n_clusters = n_services * n_archetypes
    fwd_lead_levels = levels(lead_lo, lead_hi, max(1, math.ceil(n_services / 2)))
    bwd_lead = rng.permutation(levels(lead_lo, lead_hi, n_clusters))
    fwd_bulk = rng.permutation(levels(bulk_lo, bulk_hi, n_clusters))
    bwd_bulk = rng.permutation(levels(bulk_lo, bulk_hi, n_clusters))
    fwd_lead_pick = [rng.permutation(n_services) % len(fwd_lead_levels)
                     for _ in range(n_archetypes)]

    def law(x: float) -> SizeLaw:
        mu = centre + shrink * (x - centre)
        if difficulty > 0:
            return SizeLaw(mu, sigma)
        return SizeLaw(mu, sigma, max(6, math.ceil(math.exp(mu - 3 * sigma))),
                       min(MSS, math.floor(math.exp(mu + 3 * sigma))))

    specs = []
    for a in range(n_archetypes):
        sid, count, ext, jitter = _ARCHETYPE_CLIENTS[a % len(_ARCHETYPE_CLIENTS)]
        count += 2 * (a // len(_ARCHETYPE_CLIENTS))
        for i, name in enumerate(names):
            st = stacks[stack_of[i]]
            c = a * n_services + i
            laws = [law(fwd_lead_levels[fwd_lead_pick[a][i]]),
                    law(bwd_lead[c]),
                    law(fwd_bulk[c]), law(bwd_bulk[c])]
            offered = count
            suite = _CIPHER_POOL[(stack_of[i] * 3 + a) % min(offered, len(_CIPHER_POOL))]
            hs = HandshakeProfile(
                ch_session_id_len=sid, ch_cipher_suites=count, ch_extensions_len=ext,
                sh_session_id_len=st["sh_sid"], sh_cipher_suite=suite,
                sh_extensions_len=(5 + 4 * ((stack_of[i] + a) % 3)),
                certificate_len=st["cert"], certificate_jitter=st["cert_jitter"],
                ch_extension_jitter=jitter, session_ticket=st["ticket"],
                rtt_micros=st["rtt"],
            )
            specs.append(SynthServiceSpec(
                name=name, archetype=f"client{a}", handshake=hs,
                fwd_lead=laws[0], bwd_lead=laws[1], fwd_bulk=laws[2], bwd_bulk=laws[3],
                bwd_share=float(0.55 + 0.3 * rng.random()),
                count_p=0.12, count_max=20,
                fwd_iat_mean=float(rng.uniform(500, 6000)),
                bwd_iat_mean=float(rng.uniform(200, 3000)),
                server_ip=st["ip_base"] + i % 16,
            ))
    return specs


# -- trace generation -----------------------------------------------------------

_ETH_HEADER = bytes.fromhex("0200000000010200000000020800")
_ip_header = struct.Struct("!BBHHHBBH4s4s")
_tcp_header = struct.Struct("!HHIIBBHHH")
_FIN, _SYN, _RST, _PSH, _ACK = 0x01, 0x02, 0x04, 0x08, 0x10


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _frame(src: int, dst: int, sport: int, dport: int, seq: int, ack: int, flags: int,
           payload: bytes, ident: int) -> bytes:
    total = 40 + len(payload)
    s, d = src.to_bytes(4, "big"), dst.to_bytes(4, "big")
    ip = _ip_header.pack(0x45, 0, total, ident & 0xFFFF, 0x4000, 64, 6, 0, s, d)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    tcp = _tcp_header.pack(sport, dport, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4,
                           flags, 65535, 0, 0)
    pseudo = s + d + struct.pack("!HH", 6, total - 20)
    tcp = tcp[:16] + struct.pack("!H", _checksum(pseudo + tcp + payload)) + tcp[18:]
    return _ETH_HEADER + ip + tcp + payload


class _Conn:
    """Emits the frames of one connection while tracking both sequence spaces."""

    def __init__(self, rng: np.random.Generator, client: tuple, server: tuple, out: list,
                 flow_index: int):
        self.ep = (client, server)
        self.seq = [int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32))]
        self.out = out
        self.idx = flow_index
        self.n = 0

    def send(self, ts: int, direction: int, flags: int, payload: bytes = b"") -> None:
        (sip, sport), (dip, dport) = self.ep[direction], self.ep[direction ^ 1]
        ack = self.seq[direction ^ 1] if flags & _ACK else 0
        frame = _frame(sip, dip, sport, dport, self.seq[direction], ack, flags, payload,
                       self.idx * 64 + self.n)
        self.out.append((ts, self.idx, self.n, frame))
        self.n += 1
        self.seq[direction] += len(payload) + (1 if flags & (_SYN | _FIN) else 0)


def _geometric_count(rng: np.random.Generator, p: float, low: int, cap: int) -> int:
    weights = (1 - p) ** np.arange(cap - low + 1)
    return int(rng.choice(np.arange(low, cap + 1), p=weights / weights.sum()))


def _emit_flow(rng: np.random.Generator, spec: SynthServiceSpec, client: tuple, start: int,
               flow_index: int, out: list) -> FlowTruth:
    hs = spec.handshake
    server = (spec.server_ip, SERVER_PORT)
    conn = _Conn(rng, client, server, out, flow_index)
    rtt = hs.rtt_micros
    half = max(1, int(rtt / 2))
    t = start

    def step(mean: float) -> int:
        return 1 + int(rng.exponential(mean))

    conn.send(t, 0, _SYN)
    t += half + step(50)
    conn.send(t, 1, _SYN | _ACK)
    t += half + step(50)
    conn.send(t, 0, _ACK)

    ch = ClientHelloSummary(hs.ch_session_id_len, hs.ch_cipher_suites,
                            hs.ch_extensions_len + int(rng.choice(hs.ch_extension_jitter)),
                            spec.name)
    sh = ServerHelloSummary(hs.sh_session_id_len, hs.sh_cipher_suite, hs.sh_extensions_len)
    truth = FlowTruth(spec.name, spec.archetype, client, server, ch, sh)

    def data(direction: int, payload: bytes, bucket: list) -> None:
        nonlocal t
        conn.send(t, direction, _PSH | _ACK, payload)
        bucket.append((t, direction, len(payload)))

    t += step(100)
    data(0, _record(22, build_client_hello(ch, rng.bytes(32)), b"\x03\x01"),
         truth.handshake_pkts)

    cert_len = hs.certificate_len + int(rng.integers(0, hs.certificate_jitter + 1))
    flight = build_server_hello(sh, rng.bytes(32)) + _handshake(11, rng.bytes(cert_len)) \
        + _handshake(14, b"")
    flight = _record(22, flight)
    t += half + step(300)
    for k in range(0, len(flight), MSS):
        if k:
            t += step(40)
        data(1, flight[k:k + MSS], truth.handshake_pkts)
    t += step(200)
    conn.send(t, 0, _ACK)

    t += half + step(500)
    cke = _record(22, _handshake(16, b"\x41" + rng.bytes(65)))
    data(0, cke + _record(20, b"\x01") + _record(22, rng.bytes(40)), truth.handshake_pkts)

    t += half + step(300)
    tail = _record(22, _handshake(4, rng.bytes(170))) if hs.session_ticket else b""
    data(1, tail + _record(20, b"\x01") + _record(22, rng.bytes(40)), truth.handshake_pkts)

    # application data
    n = _geometric_count(rng, spec.count_p, spec.count_min, spec.count_max)
    dirs = [0, 1][:n] + [int(rng.random() < spec.bwd_share) for _ in range(max(0, n - 2))]
    sizes = []
    for j, d in enumerate(dirs):
        lead = j < 2
        law = (spec.fwd_lead if lead else spec.fwd_bulk) if d == 0 else \
            (spec.bwd_lead if lead else spec.bwd_bulk)
        sizes.append(int(law.draw(rng)))
    j = 0
    t += step(spec.fwd_iat_mean)
    while j < n:
        d = dirs[j]
        if d == 1 and j >= 2:
            # consecutive server bulk packets share one record spanning segments
            # (a new record starts once the current one would pass 2^14 bytes)
            k, total = j, 0
            while k < n and dirs[k] == 1 and (k == j or total + sizes[k] <= 2**14 + 5):
                total += sizes[k]
                k += 1
            seg_sizes = sizes[j:k]
            record = _record(23, rng.bytes(sum(seg_sizes) - 5))
            pos = 0
            for m, sz in enumerate(seg_sizes):
                if m:
                    t += step(spec.bwd_iat_mean / 4)
                data(1, record[pos:pos + sz], truth.appdata_pkts)
                pos += sz
            j = k
        else:
            data(d, _record(23, rng.bytes(sizes[j] - 5)), truth.appdata_pkts)
            j += 1
        if rng.random() < 0.5:
            t += step(40)
            conn.send(t, d ^ 1, _ACK)
        if j < n:
            t += step(spec.bwd_iat_mean if dirs[j] == 1 else spec.fwd_iat_mean)

    t += step(5000)
    conn.send(t, 0, _FIN | _ACK)
    t += half + step(50)
    conn.send(t, 1, _FIN | _ACK)
    t += half + step(50)
    conn.send(t, 0, _ACK)
    return truth


def synth_generate(specs: Sequence[SynthServiceSpec], flows_per_service: int, seed: int = 0,
                   *, start_micros: int = 1_500_000_000_000_000,
                   window_micros: Optional[int] = None,
                   client_net: int = 0x0A000000) -> SynthTrace:
    """Generate ``flows_per_service`` flows for every spec into one pcap.

    Byte-identical output for equal arguments. The returned trace carries the
    pcap bytes plus per-flow ground truth (manifest entries).
    """
    if flows_per_service < 0:
        raise SpecInvalid("flows_per_service must be >= 0")
    seen = set()
    for s in specs:
        s.validate()
        if (s.name, s.archetype) in seen:
            raise SpecInvalid(f"duplicate spec {s.name}/{s.archetype}")
        seen.add((s.name, s.archetype))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A3E]))
    total = len(specs) * flows_per_service
    window = window_micros if window_micros is not None else max(1, total) * 2_000
    jobs = [s for s in specs for _ in range(flows_per_service)]
    order = rng.permutation(len(jobs))
    used = set()
    out: list = []
    truths = []
    archetypes = sorted({s.archetype for s in specs})
    for flow_index, j in enumerate(order):
        spec = jobs[j]
        a = archetypes.index(spec.archetype)
        while True:
            cip = client_net | (a & 0xFF) << 16 | int(rng.integers(1, 0xFFFF))
            cport = int(rng.integers(1024, 65536))
            ident = (cip, cport, spec.server_ip)
            if ident not in used:
                used.add(ident)
                break
        start = start_micros + int(rng.integers(0, window))
        truths.append(_emit_flow(rng, spec, (cip, cport), start, flow_index, out))
    out.sort(key=lambda r: (r[0], r[1], r[2]))
    buf = io.BytesIO()
    writer = PcapWriter(buf, LINKTYPE_ETHERNET)
    for ts, _, _, frame in out:
        writer.write(ts, frame)
    return SynthTrace(buf.getvalue(), truths)

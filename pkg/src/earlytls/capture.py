"""Packet ingestion: classic pcap files and Ethernet/IPv4/TCP frame decoding.

Everything downstream works on :class:`TcpSegmentView` objects with integer
microsecond timestamps. Only the classic libpcap container is supported;
frames that are not IPv4+TCP decode to ``None``.
"""

from __future__ import annotations

import enum
import io
import os
import struct
from collections import Counter
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional, Protocol, Union

__all__ = [
    "LINKTYPE_ETHERNET",
    "LINKTYPE_RAW",
    "LINKTYPE_RAW_ALT",
    "CaptureError",
    "UnknownMagic",
    "TruncatedHeader",
    "TruncatedRecord",
    "TcpFlag",
    "RawPacket",
    "TcpSegmentView",
    "PacketSource",
    "PacketStream",
    "IterablePacketSource",
    "PcapWriter",
    "open_pcap",
    "next_packet",
    "decode_frame",
    "ip_to_str",
    "ip_from_str",
]

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_RAW_ALT = 12

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

_GLOBAL_HEADER_LEN = 24
_RECORD_HEADER_LEN = 16

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100
IPPROTO_TCP = 6


class CaptureError(Exception):
    """Base class for pcap container errors."""


class UnknownMagic(CaptureError):
    pass


class TruncatedHeader(CaptureError):
    pass


class TruncatedRecord(CaptureError):
    pass


class TcpFlag(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10


@dataclass(slots=True)
class RawPacket:
    ts_micros: int
    captured_len: int
    original_len: int
    data: bytes


@dataclass(slots=True)
class TcpSegmentView:
    ts_micros: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    seq: int
    flags: int
    payload: bytes

    def has(self, flag: int) -> bool:
        return bool(self.flags & flag)


def ip_to_str(ip: int) -> str:
    return f"{ip >> 24 & 255}.{ip >> 16 & 255}.{ip >> 8 & 255}.{ip & 255}"


def ip_from_str(text: str) -> int:
    parts = [int(p) for p in text.split(".")]
    if len(parts) != 4 or any(not 0 <= p <= 255 for p in parts):
        raise ValueError(f"not an IPv4 address: {text!r}")
    return parts[0] << 24 | parts[1] << 16 | parts[2] << 8 | parts[3]


class PacketSource(Protocol):
    """Anything that yields raw frames; a live capture backend implements this."""

    link_type: int

    def next_packet(self) -> Optional[RawPacket]: ...


class PacketStream:
    """Sequential reader over a classic pcap container.

    Single consumer. Use :func:`open_pcap` or :meth:`from_bytes` to construct.
    """

    def __init__(self, fh: BinaryIO, *, close_fh: bool = True):
        self._fh = fh
        self._close_fh = close_fh
        self._done = False
        header = fh.read(_GLOBAL_HEADER_LEN)
        if len(header) < 4:
            raise TruncatedHeader(f"pcap global header is {len(header)} bytes, need 24")
        magic_le = struct.unpack_from("<I", header)[0]
        if magic_le in (MAGIC_USEC, MAGIC_NSEC):
            self.byteorder = "<"
            magic = magic_le
        else:
            magic = struct.unpack_from(">I", header)[0]
            if magic not in (MAGIC_USEC, MAGIC_NSEC):
                raise UnknownMagic(f"unrecognized pcap magic 0x{magic_le:08x}")
            self.byteorder = ">"
        if len(header) < _GLOBAL_HEADER_LEN:
            raise TruncatedHeader(f"pcap global header is {len(header)} bytes, need 24")
        self.nanosecond = magic == MAGIC_NSEC
        (_, self.version_major, self.version_minor, self.thiszone, self.sigfigs,
         self.snaplen, self.link_type) = struct.unpack(self.byteorder + "IHHiIII", header)
        self._rec = struct.Struct(self.byteorder + "IIII")
        self.records_read = 0

    @classmethod
    def from_bytes(cls, data: bytes) -> "PacketStream":
        return cls(io.BytesIO(data))

    def next_packet(self) -> Optional[RawPacket]:
        if self._done:
            return None
        hdr = self._fh.read(_RECORD_HEADER_LEN)
        if not hdr:
            self._finish()
            return None
        if len(hdr) < _RECORD_HEADER_LEN:
            self._finish()
            raise TruncatedRecord(
                f"record {self.records_read}: header has {len(hdr)} of 16 bytes")
        ts_sec, ts_frac, incl_len, orig_len = self._rec.unpack(hdr)
        data = self._fh.read(incl_len)
        if len(data) < incl_len:
            self._finish()
            raise TruncatedRecord(
                f"record {self.records_read}: claims {incl_len} bytes, {len(data)} remain")
        if self.nanosecond:
            ts_frac //= 1000  # truncate, never round
        self.records_read += 1
        return RawPacket(ts_sec * 1_000_000 + ts_frac, incl_len, max(orig_len, incl_len), data)

    def __iter__(self) -> Iterator[RawPacket]:
        while True:
            pkt = self.next_packet()
            if pkt is None:
                return
            yield pkt

    def _finish(self) -> None:
        self._done = True
        self.close()

    def close(self) -> None:
        if self._close_fh:
            self._fh.close()

    def __enter__(self) -> "PacketStream":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class IterablePacketSource:
    """Adapts any iterable of RawPacket (e.g. a live capture callback queue)."""

    def __init__(self, packets: Iterable[RawPacket], link_type: int = LINKTYPE_ETHERNET):
        self._it = iter(packets)
        self.link_type = link_type

    def next_packet(self) -> Optional[RawPacket]:
        return next(self._it, None)

    def __iter__(self) -> Iterator[RawPacket]:
        return self._it


def open_pcap(path: Union[str, os.PathLike]) -> PacketStream:
    fh = open(path, "rb")
    try:
        return PacketStream(fh)
    except CaptureError:
        fh.close()
        raise


def next_packet(stream: PacketSource) -> Optional[RawPacket]:
    return stream.next_packet()


_unpack_ip = struct.Struct("!BBHHHBBH4s4s").unpack_from
_unpack_tcp = struct.Struct("!HHIIBB").unpack_from


def decode_frame(pkt: RawPacket, link_type: int,
                 stats: Optional[Counter] = None) -> Optional[TcpSegmentView]:
    """Decode one frame into a TCP segment view, or ``None`` if it is not IPv4/TCP.

    Undecodable frames bump ``stats[reason]`` when a counter is supplied.
    """
    data = pkt.data
    n = len(data)
    if link_type == LINKTYPE_ETHERNET:
        if n < 14:
            return _reject(stats, "short_ethernet")
        ethertype = data[12] << 8 | data[13]
        off = 14
        if ethertype == ETHERTYPE_VLAN:
            if n < 18:
                return _reject(stats, "short_vlan")
            ethertype = data[16] << 8 | data[17]
            off = 18
        if ethertype != ETHERTYPE_IPV4:
            return _reject(stats, "not_ipv4")
    elif link_type in (LINKTYPE_RAW, LINKTYPE_RAW_ALT):
        off = 0
    else:
        return _reject(stats, "unsupported_linktype")

    if n - off < 20:
        return _reject(stats, "short_ip")
    vihl, _tos, total_len, _ident, frag, _ttl, proto, _csum, src, dst = _unpack_ip(data, off)
    if vihl >> 4 != 4:
        return _reject(stats, "not_ipv4")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or total_len < ihl or off + total_len > n:
        return _reject(stats, "bad_ip_length")
    if frag & 0x3FFF:
        return _reject(stats, "ip_fragment")
    if proto != IPPROTO_TCP:
        return _reject(stats, "not_tcp")
    t = off + ihl
    if total_len - ihl < 20:
        return _reject(stats, "short_tcp")
    sport, dport, seq, _ack, doff_byte, flags = _unpack_tcp(data, t)
    doff = (doff_byte >> 4) * 4
    if doff < 20 or ihl + doff > total_len:
        return _reject(stats, "bad_tcp_offset")
    return TcpSegmentView(
        pkt.ts_micros,
        int.from_bytes(src, "big"),
        int.from_bytes(dst, "big"),
        sport,
        dport,
        seq,
        flags & 0x1F,
        data[t + doff: off + total_len],
    )


def _reject(stats: Optional[Counter], reason: str) -> None:
    if stats is not None:
        stats[reason] += 1
    return None


class PcapWriter:
    """Writes classic pcap files; microsecond resolution unless ``nanosecond``."""

    def __init__(self, fh: BinaryIO, link_type: int = LINKTYPE_ETHERNET, *,
                 snaplen: int = 262144, byteorder: str = "<", nanosecond: bool = False):
        self._fh = fh
        self._bo = byteorder
        self._ns = nanosecond
        magic = MAGIC_NSEC if nanosecond else MAGIC_USEC
        fh.write(struct.pack(byteorder + "IHHiIII", magic, 2, 4, 0, 0, snaplen, link_type))
        self._rec = struct.Struct(byteorder + "IIII")

    def write(self, ts_micros: int, frame: bytes, original_len: Optional[int] = None) -> None:
        sec, usec = divmod(ts_micros, 1_000_000)
        frac = usec * 1000 if self._ns else usec
        self._fh.write(self._rec.pack(sec, frac, len(frame), original_len or len(frame)))
        self._fh.write(frame)

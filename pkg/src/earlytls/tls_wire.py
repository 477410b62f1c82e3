"""TLS record-layer scanning and Hello message summaries.

:func:`scan_segment` walks the record headers of one direction's TCP byte
stream, one segment at a time, and reports which record types the segment's
bytes belong to. The Hello parsers pull the six handshake-header features
(and the SNI hostname) out of ClientHello/ServerHello messages.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

__all__ = [
    "CHANGE_CIPHER_SPEC",
    "ALERT",
    "HANDSHAKE",
    "APPLICATION_DATA",
    "MAX_RECORD_LEN",
    "TlsError",
    "MalformedRecord",
    "Malformed",
    "SegmentPhase",
    "RecordEvent",
    "RecordCursor",
    "SegmentScan",
    "ClientHelloSummary",
    "ServerHelloSummary",
    "scan_segment",
    "parse_client_hello",
    "parse_server_hello",
    "normalize_sni",
]

CHANGE_CIPHER_SPEC = 20
ALERT = 21
HANDSHAKE = 22
APPLICATION_DATA = 23
CONTENT_TYPES = frozenset((CHANGE_CIPHER_SPEC, ALERT, HANDSHAKE, APPLICATION_DATA))

MAX_RECORD_LEN = 2**14 + 2048
RECORD_HEADER_LEN = 5

HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2
EXT_SERVER_NAME = 0


class TlsError(Exception):
    pass


class MalformedRecord(TlsError):
    """A record header with an unknown content type or an absurd length."""


class Malformed(TlsError):
    """A Hello message whose internal lengths disagree with the bytes present."""


class SegmentPhase(enum.Enum):
    HANDSHAKE = "handshake"
    APPLICATION_DATA = "application_data"
    CONTINUATION = "continuation"


@dataclass(frozen=True, slots=True)
class RecordEvent:
    """A record header seen in a segment; ``start``/``end`` bound its bytes there."""

    content_type: int
    version_major: int
    version_minor: int
    declared_len: int
    start: int
    end: int
    header_offset: int  # may be negative when the header began in an earlier segment


@dataclass(slots=True)
class RecordCursor:
    bytes_remaining_in_record: int = 0
    current_content_type: Optional[int] = None
    header_stash: bytes = b""

    def copy(self) -> "RecordCursor":
        return RecordCursor(self.bytes_remaining_in_record, self.current_content_type,
                            self.header_stash)


@dataclass(slots=True)
class SegmentScan:
    events: list
    cursor: RecordCursor
    phase: SegmentPhase
    # record types owning at least one byte (header or body) of the segment
    content_types: frozenset
    # (start, end, content_type) for every run of record-body bytes in the segment
    runs: list


def scan_segment(cursor: RecordCursor, payload: bytes) -> SegmentScan:
    """Attribute the bytes of ``payload`` to TLS records.

    ``payload`` must be the next in-order bytes of one direction's stream. The
    input cursor is not mutated; the returned scan carries the updated one.
    Raises :class:`MalformedRecord` on an invalid record header.
    """
    remaining = cursor.bytes_remaining_in_record
    ctype = cursor.current_content_type
    stash = cursor.header_stash
    n = len(payload)
    pos = 0
    events = []
    runs = []
    types = set()
    opened = False  # a record header started inside this segment

    while pos < n:
        if remaining:
            take = min(remaining, n - pos)
            runs.append((pos, pos + take, ctype))
            types.add(ctype)
            remaining -= take
            pos += take
            continue
        if not stash:
            opened = True
        need = RECORD_HEADER_LEN - len(stash)
        head = stash + payload[pos:pos + need]
        if head[0] not in CONTENT_TYPES:
            raise MalformedRecord(f"content type {head[0]} at offset {pos - len(stash)}")
        ctype = head[0]
        types.add(ctype)
        if len(head) < RECORD_HEADER_LEN:
            stash = head
            pos = n
            break
        length = head[3] << 8 | head[4]
        if length > MAX_RECORD_LEN:
            raise MalformedRecord(f"record length {length} at offset {pos - len(stash)}")
        header_offset = pos - len(stash)
        pos += need
        stash = b""
        remaining = length
        events.append(RecordEvent(ctype, head[1], head[2], length,
                                  pos, min(n, pos + length), header_offset))

    if APPLICATION_DATA in types:
        phase = SegmentPhase.APPLICATION_DATA
    elif not opened and not events:
        phase = SegmentPhase.CONTINUATION
    else:
        phase = SegmentPhase.HANDSHAKE
    return SegmentScan(events, RecordCursor(remaining, ctype, stash), phase,
                       frozenset(types), runs)


@dataclass(frozen=True, slots=True)
class ClientHelloSummary:
    session_id_len: int
    cipher_suites_count: int
    extensions_total_len: int
    sni: Optional[str] = None


@dataclass(frozen=True, slots=True)
class ServerHelloSummary:
    session_id_len: int
    chosen_cipher_suite: int
    extensions_total_len: int


def normalize_sni(raw: bytes) -> str:
    name = raw.decode("utf-8", errors="replace").lower()
    if name.endswith("."):
        name = name[:-1]
    return name


def _hello_body(data: bytes, expected_type: int, what: str) -> bytes:
    if len(data) < 4:
        raise Malformed(f"{what}: handshake header truncated")
    if data[0] != expected_type:
        raise Malformed(f"{what}: handshake type {data[0]}, expected {expected_type}")
    length = int.from_bytes(data[1:4], "big")
    if len(data) - 4 < length:
        raise Malformed(f"{what}: declares {length} bytes, {len(data) - 4} present")
    return data[4:4 + length]


def _need(body: bytes, pos: int, count: int, what: str, field: str) -> None:
    if pos + count > len(body):
        raise Malformed(f"{what}: {field} overruns message ({pos + count} > {len(body)})")


def _extensions(body: bytes, pos: int, what: str) -> tuple[int, bytes]:
    """Return (total length, raw block) of the optional trailing extensions block."""
    if pos == len(body):
        return 0, b""
    _need(body, pos, 2, what, "extensions length")
    ext_len = body[pos] << 8 | body[pos + 1]
    pos += 2
    _need(body, pos, ext_len, what, "extensions block")
    if pos + ext_len != len(body):
        raise Malformed(f"{what}: {len(body) - pos - ext_len} trailing bytes after extensions")
    return ext_len, body[pos:pos + ext_len]


def _find_sni(block: bytes, what: str) -> Optional[str]:
    pos = 0
    n = len(block)
    while pos < n:
        if pos + 4 > n:
            raise Malformed(f"{what}: extension header truncated")
        etype = block[pos] << 8 | block[pos + 1]
        elen = block[pos + 2] << 8 | block[pos + 3]
        pos += 4
        if pos + elen > n:
            raise Malformed(f"{what}: extension {etype} overruns block")
        if etype == EXT_SERVER_NAME and elen >= 2:
            data = block[pos:pos + elen]
            list_len = data[0] << 8 | data[1]
            q, end = 2, min(2 + list_len, len(data))
            while q + 3 <= end:
                name_type = data[q]
                name_len = data[q + 1] << 8 | data[q + 2]
                q += 3
                if q + name_len > end:
                    raise Malformed(f"{what}: server_name entry overruns list")
                if name_type == 0:
                    return normalize_sni(data[q:q + name_len])
                q += name_len
        pos += elen
    return None


def parse_client_hello(handshake_body: bytes) -> ClientHelloSummary:
    """Summarize a ClientHello; ``handshake_body`` starts at the handshake header."""
    what = "ClientHello"
    body = _hello_body(handshake_body, HS_CLIENT_HELLO, what)
    pos = 2 + 32  # legacy_version, random
    _need(body, pos, 1, what, "session id length")
    sid_len = body[pos]
    if sid_len > 32:
        raise Malformed(f"{what}: session id length {sid_len} > 32")
    pos += 1
    _need(body, pos, sid_len, what, "session id")
    pos += sid_len
    _need(body, pos, 2, what, "cipher suites length")
    cs_len = body[pos] << 8 | body[pos + 1]
    pos += 2
    if cs_len < 2 or cs_len % 2:
        raise Malformed(f"{what}: cipher suites length {cs_len}")
    _need(body, pos, cs_len, what, "cipher suites")
    pos += cs_len
    _need(body, pos, 1, what, "compression methods length")
    comp_len = body[pos]
    pos += 1
    _need(body, pos, comp_len, what, "compression methods")
    pos += comp_len
    ext_len, block = _extensions(body, pos, what)
    return ClientHelloSummary(sid_len, cs_len // 2, ext_len, _find_sni(block, what))


def parse_server_hello(handshake_body: bytes) -> ServerHelloSummary:
    """Summarize a ServerHello; ``handshake_body`` starts at the handshake header."""
    what = "ServerHello"
    body = _hello_body(handshake_body, HS_SERVER_HELLO, what)
    pos = 2 + 32
    _need(body, pos, 1, what, "session id length")
    sid_len = body[pos]
    if sid_len > 32:
        raise Malformed(f"{what}: session id length {sid_len} > 32")
    pos += 1
    _need(body, pos, sid_len, what, "session id")
    pos += sid_len
    _need(body, pos, 3, what, "cipher suite")
    suite = body[pos] << 8 | body[pos + 1]
    pos += 3  # cipher suite + compression method
    ext_len, _ = _extensions(body, pos, what)
    return ServerHelloSummary(sid_len, suite, ext_len)

"""GTP-U (user plane) header codec.

Mandatory header, 8 octets, big-endian::

    0        1        2        3
    +--------+--------+--------+--------+
    |V V V P r E S N  |  msg  |   length        |
    +--------+--------+--------+--------+
    |              TEID (32 bit)              |
    +--------+--------+--------+--------+

If any of E/S/N is set, a 4-octet block follows (sequence:16, N-PDU:8,
next extension type:8).  ``length`` counts every octet after the mandatory
header, optional block and extension headers included.

Extension headers are stepped over and kept verbatim so that encoding a
parsed packet reproduces the original bytes.
"""
from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, replace
from typing import Optional

HEADER_LEN = 8
OPTIONAL_LEN = 4
MAX_PAYLOAD = 0xFFFF
GTPU_PORT = 2152

MSG_ECHO_REQUEST = 1
MSG_ECHO_RESPONSE = 2
MSG_END_MARKER = 254
MSG_GPDU = 255

PROTO_TCP = 6
PROTO_UDP = 17

_FLAG_PT = 0x10
_FLAG_SPARE = 0x08
_FLAG_E = 0x04
_FLAG_S = 0x02
_FLAG_PN = 0x01

_MANDATORY = struct.Struct(">BBHI")
_OPTIONAL = struct.Struct(">HBB")


class GtpuError(ValueError):
    """Base class for every decode/encode failure raised by this module."""


class TooShort(GtpuError):
    pass


class BadVersion(GtpuError):
    pass


class LengthMismatch(GtpuError):
    pass


class PayloadTooLarge(GtpuError):
    pass


class MalformedHeader(GtpuError):
    """Protocol-type bit clear, or an extension header chain that overruns the packet."""


@dataclass(frozen=True)
class InnerFlowKey:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    protocol: int

    def reversed(self) -> "InnerFlowKey":
        return InnerFlowKey(self.dst_addr, self.src_addr, self.dst_port, self.src_port, self.protocol)

    def as_tuple(self) -> tuple:
        return (self.src_addr, self.dst_addr, self.src_port, self.dst_port, self.protocol)


@dataclass(frozen=True)
class GtpuHeader:
    teid: int
    message_type: int = MSG_GPDU
    payload_length: int = 0
    version: int = 1
    protocol_type: int = 1
    has_extension: bool = False
    has_sequence: bool = False
    has_npdu: bool = False
    spare: int = 0
    # Raw optional block; present iff any of the three flags is set.
    sequence: Optional[int] = None
    npdu_number: Optional[int] = None
    next_extension_type: Optional[int] = None
    # (type, content) pairs; content excludes the length and next-type octets.
    extensions: tuple[tuple[int, bytes], ...] = ()

    @property
    def has_optional(self) -> bool:
        return self.has_extension or self.has_sequence or self.has_npdu

    def header_len(self) -> int:
        n = HEADER_LEN
        if self.has_optional:
            n += OPTIONAL_LEN
            n += sum(len(content) + 2 for _, content in self.extensions)
        return n


@dataclass(frozen=True)
class GtpuPacket:
    header: GtpuHeader
    payload: bytes = b""
    inner_flow: Optional[InnerFlowKey] = None

    @property
    def teid(self) -> int:
        return self.header.teid

    @classmethod
    def build(
        cls,
        teid: int,
        payload: bytes = b"",
        *,
        message_type: int = MSG_GPDU,
        sequence: Optional[int] = None,
        npdu_number: Optional[int] = None,
        extensions: tuple[tuple[int, bytes], ...] = (),
    ) -> "GtpuPacket":
        """Assemble a packet with a consistent length field and derived inner flow."""
        has_ext = bool(extensions)
        has_seq = sequence is not None
        has_pn = npdu_number is not None
        optional = has_ext or has_seq or has_pn
        header = GtpuHeader(
            teid=teid,
            message_type=message_type,
            has_extension=has_ext,
            has_sequence=has_seq,
            has_npdu=has_pn,
            sequence=(sequence or 0) if optional else None,
            npdu_number=(npdu_number or 0) if optional else None,
            next_extension_type=(extensions[0][0] if has_ext else 0) if optional else None,
            extensions=tuple(extensions),
        )
        length = header.header_len() - HEADER_LEN + len(payload)
        if length > MAX_PAYLOAD:
            raise PayloadTooLarge(f"payload length {length} exceeds {MAX_PAYLOAD}")
        header = replace(header, payload_length=length)
        inner = parse_inner_flow(payload) if message_type == MSG_GPDU else None
        return cls(header=header, payload=bytes(payload), inner_flow=inner)


def extract_teid(data: bytes) -> int:
    """Read the TEID straight from octets 4-7 without decoding anything else."""
    if len(data) < HEADER_LEN:
        raise TooShort(f"need {HEADER_LEN} bytes, got {len(data)}")
    return struct.unpack_from(">I", data, 4)[0]


def parse_gtpu(data: bytes) -> GtpuPacket:
    data = bytes(data)
    if len(data) < HEADER_LEN:
        raise TooShort(f"need {HEADER_LEN} bytes, got {len(data)}")
    flags, msg_type, length, teid = _MANDATORY.unpack_from(data, 0)
    version = flags >> 5
    if version != 1:
        raise BadVersion(f"GTP version {version}, expected 1")
    if not flags & _FLAG_PT:
        raise MalformedHeader("protocol type 0 (GTP') is not GTP-U")
    end = HEADER_LEN + length
    if end > len(data):
        raise LengthMismatch(f"declared length {length} exceeds {len(data) - HEADER_LEN} available bytes")

    has_ext = bool(flags & _FLAG_E)
    has_seq = bool(flags & _FLAG_S)
    has_pn = bool(flags & _FLAG_PN)
    sequence = npdu = next_type = None
    extensions: list[tuple[int, bytes]] = []
    pos = HEADER_LEN
    if has_ext or has_seq or has_pn:
        if pos + OPTIONAL_LEN > end:
            raise LengthMismatch("optional field block overruns declared length")
        sequence, npdu, next_type = _OPTIONAL.unpack_from(data, pos)
        pos += OPTIONAL_LEN
        ext_type = next_type if has_ext else 0
        while ext_type != 0:
            if pos >= end:
                raise MalformedHeader("extension header overruns declared length")
            units = data[pos]
            if units == 0:
                raise MalformedHeader("extension header with zero length")
            ext_end = pos + 4 * units
            if ext_end > end:
                raise MalformedHeader("extension header overruns declared length")
            extensions.append((ext_type, data[pos + 1 : ext_end - 1]))
            ext_type = data[ext_end - 1]
            pos = ext_end

    header = GtpuHeader(
        teid=teid,
        message_type=msg_type,
        payload_length=length,
        version=version,
        protocol_type=1,
        has_extension=has_ext,
        has_sequence=has_seq,
        has_npdu=has_pn,
        spare=(flags & _FLAG_SPARE) >> 3,
        sequence=sequence,
        npdu_number=npdu,
        next_extension_type=next_type,
        extensions=tuple(extensions),
    )
    payload = data[pos:end]
    inner = parse_inner_flow(payload) if msg_type == MSG_GPDU else None
    return GtpuPacket(header=header, payload=payload, inner_flow=inner)


def encode_gtpu(packet: GtpuPacket) -> bytes:
    h = packet.header
    if h.version != 1:
        raise BadVersion(f"GTP version {h.version}, expected 1")
    length = h.header_len() - HEADER_LEN + len(packet.payload)
    if length > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload length {length} exceeds {MAX_PAYLOAD}")
    if h.payload_length != length:
        raise LengthMismatch(f"header declares {h.payload_length} octets, content is {length}")
    flags = (
        (h.version << 5)
        | (_FLAG_PT if h.protocol_type else 0)
        | (h.spare << 3)
        | (_FLAG_E if h.has_extension else 0)
        | (_FLAG_S if h.has_sequence else 0)
        | (_FLAG_PN if h.has_npdu else 0)
    )
    out = bytearray(_MANDATORY.pack(flags, h.message_type, length, h.teid))
    if h.has_optional:
        out += _OPTIONAL.pack(h.sequence or 0, h.npdu_number or 0, h.next_extension_type or 0)
        for i, (_, content) in enumerate(h.extensions):
            if (len(content) + 2) % 4:
                raise MalformedHeader("extension content must pad to a multiple of 4 octets")
            nxt = h.extensions[i + 1][0] if i + 1 < len(h.extensions) else 0
            out.append((len(content) + 2) // 4)
            out += content
            out.append(nxt)
    out += packet.payload
    return bytes(out)


def parse_inner_flow(payload: bytes) -> Optional[InnerFlowKey]:
    """Flow key of an inner IPv4 UDP/TCP datagram; None for anything else."""
    if len(payload) < 20 or payload[0] >> 4 != 4:
        return None
    ihl = (payload[0] & 0x0F) * 4
    if ihl < 20 or len(payload) < ihl + 4:
        return None
    proto = payload[9]
    if proto not in (PROTO_UDP, PROTO_TCP):
        return None
    frag_offset = struct.unpack_from(">H", payload, 6)[0] & 0x1FFF
    if frag_offset:
        return None
    sport, dport = struct.unpack_from(">HH", payload, ihl)
    return InnerFlowKey(
        src_addr=socket.inet_ntoa(payload[12:16]),
        dst_addr=socket.inet_ntoa(payload[16:20]),
        src_port=sport,
        dst_port=dport,
        protocol=proto,
    )


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f">{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_ipv4_udp(flow: InnerFlowKey, payload: bytes, ident: int = 0, ttl: int = 64) -> bytes:
    """Build an IPv4/UDP datagram for ``flow`` (UDP checksum left at zero)."""
    udp = struct.pack(">HHHH", flow.src_port, flow.dst_port, 8 + len(payload), 0) + payload
    total = 20 + len(udp)
    src = socket.inet_aton(flow.src_addr)
    dst = socket.inet_aton(flow.dst_addr)
    hdr = struct.pack(">BBHHHBBH4s4s", 0x45, 0, total, ident & 0xFFFF, 0, ttl, PROTO_UDP, 0, src, dst)
    hdr = hdr[:10] + struct.pack(">H", _checksum(hdr)) + hdr[12:]
    return hdr + udp

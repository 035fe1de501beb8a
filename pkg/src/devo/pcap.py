"""Minimal libpcap reader producing :class:`~devo.flows.PacketEvent` objects.

Handles both byte orders, microsecond and nanosecond timestamp magics, and
Ethernet (with 802.1Q tags), raw IP and Linux cooked link types. Only IPv4
and IPv6 carrying TCP or UDP are decoded; IPv6 extension headers are not
walked.
"""

from __future__ import annotations

import ipaddress
import struct
from collections.abc import Iterator

from .flows import IngestError, IngestStats, PacketEvent, Transport

MAGIC_US = 0xA1B2C3D4
MAGIC_NS = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
_RAW_ALIASES = {12, 14, LINKTYPE_RAW}

_ETH_IPV4 = 0x0800
_ETH_IPV6 = 0x86DD
_ETH_VLAN = {0x8100, 0x88A8}


class PcapFormatError(IngestError):
    pass


def _read_header(fh) -> tuple[str, int, int]:
    raw = fh.read(24)
    if len(raw) < 24:
        raise PcapFormatError("truncated pcap global header")
    for endian in ("<", ">"):
        (magic,) = struct.unpack(endian + "I", raw[:4])
        if magic in (MAGIC_US, MAGIC_NS):
            linktype = struct.unpack(endian + "I", raw[20:24])[0]
            divisor = 1 if magic == MAGIC_US else 1000
            return endian, linktype & 0x0FFFFFFF, divisor
    raise PcapFormatError(f"bad pcap magic {raw[:4].hex()}")


def _ip_offset(frame: bytes, linktype: int) -> tuple[int, int] | None:
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        off = 12
        ethertype = struct.unpack_from("!H", frame, off)[0]
        while ethertype in _ETH_VLAN and len(frame) >= off + 6:
            off += 4
            ethertype = struct.unpack_from("!H", frame, off)[0]
        return off + 2, ethertype
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            return None
        return 16, struct.unpack_from("!H", frame, 14)[0]
    if linktype in _RAW_ALIASES:
        if not frame:
            return None
        version = frame[0] >> 4
        return 0, {4: _ETH_IPV4, 6: _ETH_IPV6}.get(version, 0)
    raise PcapFormatError(f"unsupported link type {linktype}")


def _decode(frame: bytes, linktype: int):
    loc = _ip_offset(frame, linktype)
    if loc is None:
        return None
    off, ethertype = loc
    if ethertype == _ETH_IPV4:
        if len(frame) < off + 20:
            return None
        ihl = (frame[off] & 0x0F) * 4
        total_len = struct.unpack_from("!H", frame, off + 2)[0]
        proto = frame[off + 9]
        src = ipaddress.IPv4Address(frame[off + 12:off + 16])
        dst = ipaddress.IPv4Address(frame[off + 16:off + 20])
        l4 = off + ihl
        l4_len = total_len - ihl
    elif ethertype == _ETH_IPV6:
        if len(frame) < off + 40:
            return None
        l4_len = struct.unpack_from("!H", frame, off + 4)[0]
        proto = frame[off + 6]
        src = ipaddress.IPv6Address(frame[off + 8:off + 24])
        dst = ipaddress.IPv6Address(frame[off + 24:off + 40])
        l4 = off + 40
    else:
        return None
    if proto == 6:
        if len(frame) < l4 + 13:
            return None
        sport, dport = struct.unpack_from("!HH", frame, l4)
        hdr = (frame[l4 + 12] >> 4) * 4
        transport = Transport.TCP
    elif proto == 17:
        if len(frame) < l4 + 4:
            return None
        sport, dport = struct.unpack_from("!HH", frame, l4)
        hdr = 8
        transport = Transport.UDP
    else:
        return None
    # Lengths come from the IP header, so snaplen truncation does not matter.
    return str(src), sport, str(dst), dport, transport, max(l4_len - hdr, 0)


def read_pcap(path, stats: IngestStats | None = None) -> Iterator[PacketEvent]:
    if stats is None:
        stats = IngestStats()
    with open(path, "rb") as fh:
        endian, linktype, divisor = _read_header(fh)
        rec_hdr = struct.Struct(endian + "IIII")
        while True:
            head = fh.read(16)
            if not head:
                return
            if len(head) < 16:
                raise PcapFormatError("truncated record header")
            sec, frac, incl, _orig = rec_hdr.unpack(head)
            frame = fh.read(incl)
            if len(frame) < incl:
                raise PcapFormatError("truncated packet data")
            decoded = _decode(frame, linktype)
            if decoded is None:
                stats.packets_skipped += 1
                continue
            src, sport, dst, dport, transport, plen = decoded
            yield PacketEvent(sec * 1_000_000 + frac // divisor, src, sport, dst, dport, transport, plen)


def _ipv4_frame(ev: PacketEvent) -> bytes:
    if ev.transport == Transport.TCP:
        l4 = struct.pack("!HHIIBBHHH", ev.src_port, ev.dst_port, 0, 0, 5 << 4, 0x18, 65535, 0, 0)
        proto = 6
    else:
        l4 = struct.pack("!HHHH", ev.src_port, ev.dst_port, 8 + ev.payload_len, 0)
        proto = 17
    payload = bytes(ev.payload_len)
    total = 20 + len(l4) + len(payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto, 0,
        ipaddress.IPv4Address(ev.src_addr).packed, ipaddress.IPv4Address(ev.dst_addr).packed,
    )
    eth = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack("!H", _ETH_IPV4)
    return eth + ip + l4 + payload


def write_pcap(path, events, byteorder: str = "<") -> None:
    """Write IPv4 events as an Ethernet pcap. Used to craft fixtures."""
    with open(path, "wb") as fh:
        fh.write(struct.pack(byteorder + "IHHiIII", MAGIC_US, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for ev in events:
            frame = _ipv4_frame(ev)
            sec, usec = divmod(ev.ts_us, 1_000_000)
            fh.write(struct.pack(byteorder + "IIII", sec, usec, len(frame), len(frame)))
            fh.write(frame)

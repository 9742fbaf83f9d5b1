"""Hand-packed capture bytes for ingest tests.

Frames are assembled field by field with struct.pack straight from the on-disk
layout, independently of the parser under test.
"""
import struct

MAC_A = bytes.fromhex("02a1a2a3a4a5")
MAC_B = bytes.fromhex("02b1b2b3b4b5")


def ipv4_checksum(header: bytes) -> int:
    s = 0
    for i in range(0, len(header), 2):
        s += (header[i] << 8) | header[i + 1]
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def ethernet(payload: bytes, ethertype: int, dst=MAC_B, src=MAC_A, vlan=None) -> bytes:
    if vlan is None:
        return dst + src + struct.pack(">H", ethertype) + payload
    return dst + src + struct.pack(">HH H", 0x8100, vlan, ethertype)[:6] + payload


def ipv4(payload: bytes, proto: int, src="192.168.0.1", dst="10.0.0.2",
         ttl=64, tos=0, ident=0x1234, flags_frag=0x4000, options=b"") -> bytes:
    import ipaddress
    ihl = 20 + len(options)
    assert ihl % 4 == 0
    total = ihl + len(payload)
    hdr = struct.pack(
        ">BBHHHBBH4s4s",
        (4 << 4) | (ihl // 4), tos, total, ident, flags_frag, ttl, proto, 0,
        ipaddress.ip_address(src).packed, ipaddress.ip_address(dst).packed,
    ) + options
    csum = ipv4_checksum(hdr)
    hdr = hdr[:10] + struct.pack(">H", csum) + hdr[12:]
    return hdr + payload


def tcp(payload: bytes = b"", sport=12345, dport=80, seq=0, ack=0, flags=0x02,
        window=65535, urgent=0, options=b"") -> bytes:
    assert len(options) % 4 == 0
    doff = (20 + len(options)) // 4
    return struct.pack(
        ">HHIIBBHHH", sport, dport, seq, ack, (doff << 4), flags, window, 0x1ac3, urgent
    ) + options + payload


def udp(payload: bytes = b"", sport=5353, dport=53) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0xbeef) + payload


def icmp_echo(payload: bytes = b"") -> bytes:
    return struct.pack(">BBHHH", 8, 0, 0, 1, 1) + payload


def pcap_bytes(packets, *, endian="<", nanosecond=False, linktype=1, snaplen=65535):
    """packets: iterable of (timestamp_float, frame_bytes) or (ts, frame, orig_len)."""
    magic = 0xA1B23C4D if nanosecond else 0xA1B2C3D4
    unit = 1e-9 if nanosecond else 1e-6
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype)
    for entry in packets:
        ts, frame = entry[0], entry[1]
        orig = entry[2] if len(entry) > 2 else len(frame)
        sec = int(ts)
        frac = round((ts - sec) / unit)
        out += struct.pack(endian + "IIII", sec, frac, len(frame), orig)
        out += frame
    return out


def write_pcap(path, packets, **kw):
    data = pcap_bytes(packets, **kw)
    with open(path, "wb") as fh:
        fh.write(data)
    return path

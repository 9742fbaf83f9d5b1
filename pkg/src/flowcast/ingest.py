"""Classic pcap ingest: frame decoding, flow assignment, CSV emission.

Reads the classic capture format (both byte orders, microsecond and nanosecond
time resolution), decodes Ethernet/IPv4/IPv6/TCP/UDP/ICMP headers, and fills
the fixed feature manifest for every packet. Per-packet decode failures
(truncated or nonsense headers) are skipped and counted, never raised; a file
that cannot be read at all raises MalformedCapture.
"""
from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field

from .errors import MalformedCapture
from .manifest import FIELD_NAMES, UNLABELED

# magic numbers as read little-endian from the first four bytes
_MAGICS = {
    0xA1B2C3D4: ("<", 1e-6),
    0xD4C3B2A1: (">", 1e-6),
    0xA1B23C4D: ("<", 1e-9),
    0x4D3CB2A1: (">", 1e-9),
}
_LINKTYPE_ETHERNET = 1

_ETH_NAMES = {0x0800: "ipv4", 0x86DD: "ipv6", 0x0806: "arp"}
_L4_NAMES = {6: "tcp", 17: "udp", 1: "icmp", 58: "icmpv6"}
_IP6_EXT = {0, 43, 44, 50, 51, 60, 135}


@dataclass
class PacketRecord:
    features: dict
    flow_index: int = -1
    label: str = UNLABELED


@dataclass
class FlowTable:
    """Bidirectional flow index: both directions of a 5-tuple share one id.

    Ids are dense and allocated in first-seen order. The first endpoint seen
    for a flow is remembered so later packets get a direction bit.
    """

    _index: dict = field(default_factory=dict)
    _initiator: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self._index)

    def assign(self, key_a, key_b, proto) -> tuple[int, int]:
        """Return (flow_index, direction) for a packet sent key_a -> key_b."""
        key = (min(key_a, key_b), max(key_a, key_b), proto)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._index)
            self._index[key] = idx
            self._initiator[idx] = key_a
        direction = 0 if self._initiator[idx] == key_a else 1
        return idx, direction


def assign_flow(table: FlowTable, src_ip, dst_ip, src_port, dst_port, proto) -> int:
    """Five-tuple interface over FlowTable.assign (index only)."""
    a = (src_ip, -1 if src_port is None else src_port)
    b = (dst_ip, -1 if dst_port is None else dst_port)
    idx, _ = table.assign(a, b, proto)
    return idx


@dataclass
class IngestResult:
    records: list[PacketRecord]
    skipped: int
    skip_reasons: dict
    time_resolution: float
    flow_count: int

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _be16(b, off=0):
    return (b[off] << 8) | b[off + 1]


def _be32(b, off=0):
    return (b[off] << 24) | (b[off + 1] << 16) | (b[off + 2] << 8) | b[off + 3]


def _empty_features() -> dict:
    return dict.fromkeys(FIELD_NAMES)


def _decode_tcp(seg: bytes, out: dict) -> bool:
    if len(seg) < 20:
        return False
    doff = (seg[12] >> 4) * 4
    if doff < 20 or len(seg) < doff:
        return False
    flags = seg[13]
    out["src_port"] = _be16(seg, 0)
    out["dst_port"] = _be16(seg, 2)
    out["tcp_seq"] = _be32(seg, 4)
    out["tcp_ack"] = _be32(seg, 8)
    out["tcp_data_offset"] = doff
    out["tcp_flags"] = flags
    out["tcp_flag_fin"] = flags & 1
    out["tcp_flag_syn"] = (flags >> 1) & 1
    out["tcp_flag_rst"] = (flags >> 2) & 1
    out["tcp_flag_psh"] = (flags >> 3) & 1
    out["tcp_flag_ack"] = (flags >> 4) & 1
    out["tcp_flag_urg"] = (flags >> 5) & 1
    out["tcp_flag_ece"] = (flags >> 6) & 1
    out["tcp_flag_cwr"] = (flags >> 7) & 1
    out["tcp_flag_count"] = bin(flags).count("1")
    out["window_size"] = _be16(seg, 14)
    out["tcp_checksum"] = _be16(seg, 16)
    out["tcp_urgent_ptr"] = _be16(seg, 18)
    out["tcp_opt_len"] = doff - 20
    out["l4_hdr_len"] = doff

    mss = wscale = None
    sack = tsopt = 0
    count = 0
    opts = seg[20:doff]
    i = 0
    while i < len(opts):
        kind = opts[i]
        if kind == 0:  # end of options
            break
        if kind == 1:  # nop
            i += 1
            continue
        if i + 1 >= len(opts):
            break
        length = opts[i + 1]
        if length < 2 or i + length > len(opts):
            break  # malformed option list: keep what we have
        body = opts[i + 2:i + length]
        count += 1
        if kind == 2 and len(body) == 2:
            mss = _be16(body)
        elif kind == 3 and len(body) == 1:
            wscale = body[0]
        elif kind == 4:
            sack = 1
        elif kind == 8:
            tsopt = 1
        i += length
    out["tcp_opt_count"] = count
    out["tcp_opt_mss"] = mss
    out["tcp_opt_wscale"] = wscale
    out["tcp_opt_sack_permitted"] = sack
    out["tcp_opt_timestamp_present"] = tsopt
    return True


def _decode_l4(proto: int, seg: bytes, out: dict) -> bool:
    """Fill transport fields. False means the packet should be skipped."""
    out["ip_proto"] = proto
    name = _L4_NAMES.get(proto, "other")
    out["l4_proto"] = name
    if name == "tcp":
        return _decode_tcp(seg, out)
    if name == "udp":
        if len(seg) < 8:
            return False
        out["src_port"] = _be16(seg, 0)
        out["dst_port"] = _be16(seg, 2)
        out["udp_len"] = _be16(seg, 4)
        out["udp_checksum"] = _be16(seg, 6)
        out["l4_hdr_len"] = 8
        return True
    if name in ("icmp", "icmpv6"):
        if len(seg) < 2:
            return False
        out["icmp_type"] = seg[0]
        out["icmp_code"] = seg[1]
        out["l4_hdr_len"] = 8
        return True
    return True  # unknown transport: header fields stay none


def decode_frame(timestamp: float, cap_len: int, orig_len: int, data: bytes) -> dict | None:
    """Decode one Ethernet frame into a manifest-keyed dict.

    Returns None when the frame is too damaged to describe (the caller counts
    it as skipped). Non-IP frames are fine: their L3/L4 fields stay none.
    """
    if len(data) < 14:
        return None
    out = _empty_features()
    out["timestamp"] = timestamp
    out["frame_len"] = orig_len
    out["cap_len"] = cap_len
    out["frame_padding"] = max(0, 60 - orig_len)
    dst = data[0:6]
    out["eth_dst_broadcast"] = int(dst == b"\xff" * 6)
    out["eth_dst_multicast"] = dst[0] & 1
    out["vlan_present"] = 0

    ethertype = _be16(data, 12)
    off = 14
    while ethertype in (0x8100, 0x88A8, 0x9100):
        if len(data) < off + 4:
            return None
        if out["vlan_present"] == 0:
            out["vlan_present"] = 1
            out["vlan_id"] = _be16(data, off) & 0x0FFF
        ethertype = _be16(data, off + 2)
        off += 4
    out["eth_type"] = _ETH_NAMES.get(ethertype, f"0x{ethertype:04x}")
    out["eth_payload_len"] = max(0, orig_len - off)
    out["_src_key"] = ("eth", data[6:12].hex())
    out["_dst_key"] = ("eth", dst.hex())
    out["_flow_proto"] = ethertype

    if ethertype == 0x0800:
        b = data[off:]
        if len(b) < 20 or b[0] >> 4 != 4:
            return None
        ihl = (b[0] & 0x0F) * 4
        if ihl < 20 or len(b) < ihl:
            return None
        tos = b[1]
        total_len = _be16(b, 2)
        ff = _be16(b, 6)
        frag_off = (ff & 0x1FFF) * 8
        src = ipaddress.ip_address(b[12:16])
        dst_ip = ipaddress.ip_address(b[16:20])
        out.update(
            ip_version="4", ip_hdr_len=ihl, ip_tos=tos, ip_dscp=tos >> 2,
            ip_ecn=tos & 3, ip_len=total_len, ip_id=_be16(b, 4),
            ip_flag_df=(ff >> 14) & 1, ip_flag_mf=(ff >> 13) & 1,
            ip_frag_offset=frag_off,
            is_fragment=int(bool((ff >> 13) & 1 or frag_off)),
            ttl=b[8], ip_opt_len=ihl - 20, ip_checksum=_be16(b, 10),
            ip_payload_len=max(0, total_len - ihl),
        )
        out["src_ip_private"] = int(src.is_private)
        out["dst_ip_private"] = int(dst_ip.is_private)
        out["src_ip_multicast"] = int(src.is_multicast)
        out["dst_ip_multicast"] = int(dst_ip.is_multicast)
        out["_src_key"] = ("ip", str(src))
        out["_dst_key"] = ("ip", str(dst_ip))
        out["_flow_proto"] = b[9]
        if frag_off == 0:
            if not _decode_l4(b[9], b[ihl:], out):
                return None
        else:
            out["ip_proto"] = b[9]
            out["l4_proto"] = _L4_NAMES.get(b[9], "other")
    elif ethertype == 0x86DD:
        b = data[off:]
        if len(b) < 40:
            return None
        word = _be32(b, 0)
        if word >> 28 != 6:
            return None
        payload_len = _be16(b, 4)
        nxt = b[6]
        src = ipaddress.ip_address(b[8:24])
        dst_ip = ipaddress.ip_address(b[24:40])
        out.update(
            ip_version="6", ip_hdr_len=40, ip_tos=(word >> 20) & 0xFF,
            ip_dscp=(word >> 22) & 0x3F, ip_ecn=(word >> 20) & 3,
            ip_len=40 + payload_len, ip6_flow_label=word & 0xFFFFF,
            ttl=b[7], ip_opt_len=0, is_fragment=0,
            ip_payload_len=payload_len,
        )
        out["src_ip_private"] = int(src.is_private)
        out["dst_ip_private"] = int(dst_ip.is_private)
        out["src_ip_multicast"] = int(src.is_multicast)
        out["dst_ip_multicast"] = int(dst_ip.is_multicast)
        out["_src_key"] = ("ip", str(src))
        out["_dst_key"] = ("ip", str(dst_ip))
        out["_flow_proto"] = nxt
        if nxt in _IP6_EXT:
            out["ip_proto"] = nxt
            out["l4_proto"] = "other"  # extension chain not walked
        elif not _decode_l4(nxt, b[40:], out):
            return None
    else:
        out["ip_version"] = "none"
        out["l4_proto"] = "none"

    # payload bookkeeping once the layers are known
    ip_hdr = out["ip_hdr_len"]
    l4_hdr = out["l4_hdr_len"]
    if ip_hdr is not None:
        header = off + ip_hdr + (l4_hdr or 0)
        out["header_len"] = header
        if out["l4_proto"] == "udp" and out["udp_len"] is not None:
            out["payload_len"] = max(0, out["udp_len"] - 8)
        elif l4_hdr is not None and out["ip_payload_len"] is not None:
            out["payload_len"] = max(0, out["ip_payload_len"] - l4_hdr)
        elif out["ip_payload_len"] is not None:
            out["payload_len"] = out["ip_payload_len"]
    else:
        out["header_len"] = off
    if out["payload_len"] is not None and orig_len:
        out["payload_ratio"] = out["payload_len"] / orig_len
    if out["src_port"] is not None:
        out["src_port_wellknown"] = int(out["src_port"] < 1024)
    if out["dst_port"] is not None:
        out["dst_port_wellknown"] = int(out["dst_port"] < 1024)
    return out


def parse_pcap(path, label: str = UNLABELED) -> IngestResult:
    """Parse a classic capture file into labeled PacketRecords.

    The same label is applied to every packet (capture-per-class labeling).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise MalformedCapture(f"{path}: global header truncated ({len(blob)} bytes)")
    magic_le = struct.unpack_from("<I", blob, 0)[0]
    if magic_le not in _MAGICS:
        raise MalformedCapture(f"{path}: unknown magic 0x{magic_le:08x}")
    endian, resolution = _MAGICS[magic_le]
    _, _, _, _, _, _, network = struct.unpack_from(endian + "IHHiIII", blob, 0)
    if network != _LINKTYPE_ETHERNET:
        raise MalformedCapture(f"{path}: unsupported link type {network}")

    records: list[PacketRecord] = []
    skip_reasons = {"truncated_header": 0, "truncated_data": 0, "bad_frame": 0}
    table = FlowTable()
    flow_last_ts: dict[int, float] = {}
    flow_count: dict[int, int] = {}
    flow_bytes: dict[int, int] = {}
    last_capture_ts = None

    pos = 24
    hdr = struct.Struct(endian + "IIII")
    while pos < len(blob):
        if pos + 16 > len(blob):
            skip_reasons["truncated_header"] += 1
            break
        ts_sec, ts_frac, incl_len, orig_len = hdr.unpack_from(blob, pos)
        pos += 16
        if pos + incl_len > len(blob):
            skip_reasons["truncated_data"] += 1
            break
        data = blob[pos:pos + incl_len]
        pos += incl_len
        ts = ts_sec + ts_frac * resolution
        feats = decode_frame(ts, incl_len, orig_len, data)
        if feats is None:
            skip_reasons["bad_frame"] += 1
            continue

        src_key = feats.pop("_src_key")
        dst_key = feats.pop("_dst_key")
        proto = feats.pop("_flow_proto")
        sport = feats["src_port"]
        dport = feats["dst_port"]
        a = (src_key, -1 if sport is None else sport)
        b = (dst_key, -1 if dport is None else dport)
        idx, direction = table.assign(a, b, proto)

        feats["direction"] = direction
        feats["iat_capture"] = 0.0 if last_capture_ts is None else ts - last_capture_ts
        last_capture_ts = ts
        prev = flow_last_ts.get(idx)
        feats["iat_flow"] = 0.0 if prev is None else ts - prev
        flow_last_ts[idx] = ts
        feats["flow_pkt_index"] = flow_count.get(idx, 0)
        feats["flow_bytes_before"] = flow_bytes.get(idx, 0)
        flow_count[idx] = feats["flow_pkt_index"] + 1
        flow_bytes[idx] = feats["flow_bytes_before"] + orig_len

        records.append(PacketRecord(features=feats, flow_index=idx, label=label))

    return IngestResult(
        records=records,
        skipped=sum(skip_reasons.values()),
        skip_reasons=skip_reasons,
        time_resolution=resolution,
        flow_count=len(table),
    )


# --- CSV emission / loading ---

CSV_EXTRA_COLUMNS = ["flow_index", "label"]


def _render_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(records, path) -> None:
    """One row per packet: the 71 manifest columns plus flow_index and label."""
    import csv as _csv

    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(FIELD_NAMES + CSV_EXTRA_COLUMNS)
        for rec in records:
            row = [_render_cell(rec.features.get(name)) for name in FIELD_NAMES]
            row.append(str(rec.flow_index))
            row.append(rec.label)
            w.writerow(row)


def read_csv(path) -> list[PacketRecord]:
    """Inverse of write_csv. Numeric cells come back as float, empty as None."""
    import csv as _csv

    from .manifest import CATEGORICAL

    cat = set(CATEGORICAL)
    with open(path, newline="") as fh:
        r = _csv.reader(fh)
        header = next(r)
        expected = FIELD_NAMES + CSV_EXTRA_COLUMNS
        if header != expected:
            raise MalformedCapture(f"{path}: unexpected CSV header")
        records = []
        for row in r:
            feats = {}
            for name, cell in zip(FIELD_NAMES, row):
                if cell == "":
                    feats[name] = None
                elif name in cat:
                    feats[name] = cell
                else:
                    feats[name] = float(cell)
            records.append(PacketRecord(
                features=feats,
                flow_index=int(row[len(FIELD_NAMES)]),
                label=row[len(FIELD_NAMES) + 1],
            ))
    return records

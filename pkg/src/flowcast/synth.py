"""Deterministic synthetic traffic with a closed-form next-packet rule.

Six traffic classes, each pinned to its own destination port, clock offset,
clock step, ttl, frame-length ramp, and per-position flag/direction tables.
Every field of every packet is a function of (class, variant, source-port
choice, position), and that tuple can be recovered from the four fields
(dst_port, timestamp, frame_len, src_port) alone.  That closed form is what
`NextPacketOracle` implements: it reads any rendered packet line and returns
the exact packet that must follow it, or None at end of flow.

Header-bookkeeping fields that carry no sequence information (checksums,
sequence numbers, fragment flags, ...) are held constant so the variance
filter removes them, keeping rendered lines short.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LineParseError
from .ingest import PacketRecord
from .manifest import FIELD_NAMES, LABELS
from .textio import parse_packet_line, serialize_packet_line

FLOW_LEN = 6
VARIANTS = 3
SRC_PORT_BASE = 30000
SRC_PORT_CLASS_STRIDE = 2000
SRC_PORT_CHOICE_STEP = 77

# mix used by the development pipeline; uniform-ish so pooled variances of
# the class-keyed columns clear the selection cutoff
DEV_MIX = {
    "Normal": 0.30,
    "DDoS": 0.14,
    "BrowserHijacking": 0.14,
    "CommandInjection": 0.14,
    "XSS": 0.14,
    "BackdoorMalware": 0.14,
}


@dataclass(frozen=True)
class ClassProfile:
    name: str
    proto: str                  # "tcp" or "udp"
    dst_port: int
    t0: float                   # flow clock offset, restarts every flow
    dt: float                   # inter-packet step
    ttl: int
    frame_base: int
    frame_inc: int              # per-position frame growth
    src_code: int               # scrambled class code behind the source port
    window_size: int | None     # tcp receive window, None for udp
    flags: tuple | None         # packed tcp flags by position, None for udp
    direction: tuple            # 0 = initiator, 1 = responder, by position


PROFILES: tuple[ClassProfile, ...] = (
    ClassProfile("Normal", "tcp", 443, 0.00, 0.010, 64, 120, 1, 4, 65535,
                 (0x02, 0x12, 0x10, 0x18, 0x18, 0x11), (0, 1, 0, 0, 1, 0)),
    ClassProfile("DDoS", "udp", 80, 0.15, 0.001, 255, 96, 2, 1, None,
                 None, (0, 0, 0, 0, 0, 0)),
    ClassProfile("BrowserHijacking", "tcp", 8080, 0.30, 0.020, 128, 60, 3, 3, 8192,
                 (0x02, 0x12, 0x18, 0x18, 0x10, 0x04), (0, 1, 0, 1, 1, 0)),
    ClassProfile("CommandInjection", "tcp", 9001, 0.45, 0.030, 64, 108, 1, 0, 4096,
                 (0x02, 0x12, 0x18, 0x18, 0x18, 0x10), (0, 1, 0, 0, 0, 1)),
    ClassProfile("XSS", "tcp", 8081, 0.60, 0.040, 32, 72, 2, 5, 1024,
                 (0x02, 0x12, 0x18, 0x10, 0x10, 0x11), (0, 1, 0, 1, 0, 1)),
    ClassProfile("BackdoorMalware", "tcp", 4444, 0.75, 0.050, 16, 84, 3, 2, 512,
                 (0x02, 0x12, 0x18, 0x18, 0x18, 0x18), (0, 1, 1, 1, 1, 1)),
)

assert tuple(p.name for p in PROFILES) == LABELS

_PORT_TO_CLASS = {p.dst_port: i for i, p in enumerate(PROFILES)}
assert len(_PORT_TO_CLASS) == len(PROFILES)  # ports must stay disjoint


def src_port_for(class_id: int, s: int) -> int:
    code = PROFILES[class_id].src_code
    return SRC_PORT_BASE + SRC_PORT_CLASS_STRIDE * code + SRC_PORT_CHOICE_STEP * s


def _flag_bit(flags: int | None, bit: int) -> int | None:
    if flags is None:
        return None
    return (flags >> bit) & 1


def make_record(class_id: int, v: int, s: int, p: int) -> dict:
    """All 71 raw fields of packet p in a (class_id, v, s) flow."""
    prof = PROFILES[class_id]
    if not (0 <= v < VARIANTS and s in (0, 1) and 0 <= p < FLOW_LEN):
        raise ConfigError(f"bad packet coordinates ({class_id}, {v}, {s}, {p})")
    tcp = prof.proto == "tcp"
    frame_len = prof.frame_base + 4 * v + prof.frame_inc * p
    header_len = 14 + 20 + (20 if tcp else 8)
    payload_len = frame_len - header_len
    flags = prof.flags[p] if tcp else None
    out = {
        "timestamp": prof.t0 + p * prof.dt,
        "frame_len": frame_len,
        "cap_len": frame_len,
        "frame_padding": 0,
        "eth_type": "ipv4",
        "eth_dst_broadcast": 0,
        "eth_dst_multicast": 0,
        "vlan_present": 0,
        "vlan_id": None,
        "eth_payload_len": frame_len - 14,
        "ip_version": "4",
        "ip_hdr_len": 20,
        "ip_tos": 0,
        "ip_dscp": 0,
        "ip_ecn": 0,
        "ip_len": frame_len - 14,
        "ip_id": 0,
        "ip_flag_df": 1,
        "ip_flag_mf": 0,
        "ip_frag_offset": 0,
        "is_fragment": 0,
        "ttl": prof.ttl,
        "ip_proto": 6 if tcp else 17,
        "ip_opt_len": 0,
        "ip_checksum": 0,
        "ip6_flow_label": None,
        "ip_payload_len": frame_len - 34,
        "src_ip_private": 1,
        "dst_ip_private": 1,
        "src_ip_multicast": 0,
        "dst_ip_multicast": 0,
        "l4_proto": prof.proto,
        "src_port": src_port_for(class_id, s),
        "dst_port": prof.dst_port,
        "l4_hdr_len": 20 if tcp else 8,
        "payload_len": payload_len,
        "header_len": header_len,
        "tcp_seq": 1000 if tcp else None,
        "tcp_ack": 2000 if tcp else None,
        "tcp_data_offset": 5 if tcp else None,
        "tcp_flags": flags,
        "tcp_flag_fin": _flag_bit(flags, 0),
        "tcp_flag_syn": _flag_bit(flags, 1),
        "tcp_flag_rst": _flag_bit(flags, 2),
        "tcp_flag_psh": _flag_bit(flags, 3),
        "tcp_flag_ack": _flag_bit(flags, 4),
        "tcp_flag_urg": _flag_bit(flags, 5),
        "tcp_flag_ece": _flag_bit(flags, 6),
        "tcp_flag_cwr": _flag_bit(flags, 7),
        "tcp_flag_count": bin(flags).count("1") if flags is not None else None,
        "window_size": prof.window_size,
        "tcp_checksum": 0 if tcp else None,
        "tcp_urgent_ptr": 0 if tcp else None,
        "tcp_opt_len": 0 if tcp else None,
        "tcp_opt_count": 0 if tcp else None,
        "tcp_opt_mss": None,
        "tcp_opt_wscale": None,
        "tcp_opt_sack_permitted": 0 if tcp else None,
        "tcp_opt_timestamp_present": 0 if tcp else None,
        "udp_len": None if tcp else frame_len - 34,
        "udp_checksum": None if tcp else 0,
        "icmp_type": None,
        "icmp_code": None,
        "iat_flow": prof.dt if p > 0 else 0.0,
        "iat_capture": prof.dt if p > 0 else 0.0,
        "direction": prof.direction[p],
        "flow_pkt_index": p,
        "flow_bytes_before": p * (prof.frame_base + 4 * v)
        + prof.frame_inc * p * (p - 1) // 2,
        "src_port_wellknown": 0,
        "dst_port_wellknown": 1 if prof.dst_port < 1024 else 0,
        "payload_ratio": payload_len / frame_len,
    }
    assert set(out) == set(FIELD_NAMES)
    return out


class NextPacketOracle:
    """Closed-form successor rule for synthetic packets.

    Works from raw value dicts or from rendered lines over any column
    subset that still contains dst_port, timestamp, frame_len, src_port.
    """

    def coords_from_values(self, values: dict) -> tuple[int, int, int, int]:
        missing = [k for k in ("dst_port", "timestamp", "frame_len", "src_port")
                   if k not in values]
        if missing:
            raise LineParseError(f"recovery fields absent: {missing}")
        port = values.get("dst_port")
        if port is None or int(port) not in _PORT_TO_CLASS:
            raise LineParseError(f"unknown dst_port {port!r}")
        c = _PORT_TO_CLASS[int(port)]
        prof = PROFILES[c]
        p = int(round((float(values["timestamp"]) - prof.t0) / prof.dt))
        if not 0 <= p < FLOW_LEN:
            raise LineParseError(f"timestamp {values['timestamp']} outside flow clock")
        v4 = int(values["frame_len"]) - prof.frame_base - prof.frame_inc * p
        if v4 % 4 or not 0 <= v4 // 4 < VARIANTS:
            raise LineParseError(f"frame_len {values['frame_len']} off the ramp")
        rem = int(values["src_port"]) - src_port_for(c, 0)
        if rem % SRC_PORT_CHOICE_STEP or rem // SRC_PORT_CHOICE_STEP not in (0, 1):
            raise LineParseError(f"src_port {values['src_port']} not in class range")
        return c, v4 // 4, rem // SRC_PORT_CHOICE_STEP, p

    def label_for_values(self, values: dict) -> str:
        return PROFILES[self.coords_from_values(values)[0]].name

    def next_values(self, values: dict) -> dict | None:
        c, v, s, p = self.coords_from_values(values)
        if p + 1 >= FLOW_LEN:
            return None
        return make_record(c, v, s, p + 1)

    def next_line(self, line: str, columns) -> str | None:
        values = parse_packet_line(line, columns)
        nxt = self.next_values(values)
        if nxt is None:
            return None
        return serialize_packet_line(nxt, columns)


@dataclass(frozen=True)
class SynthSpec:
    n_flows: int
    mix: dict = field(default_factory=lambda: dict(DEV_MIX))
    seed: int = 0


def _allocate_flows(n: int, mix: dict) -> list[int]:
    if n <= 0:
        raise ConfigError("n_flows must be positive")
    unknown = set(mix) - set(LABELS)
    if unknown:
        raise ConfigError(f"unknown classes in mix: {sorted(unknown)}")
    total = sum(mix.values())
    if total <= 0 or abs(total - 1.0) > 1e-6:
        raise ConfigError(f"mix fractions sum to {total}, expected 1")
    weights = [mix.get(name, 0.0) for name in LABELS]
    exact = [n * w for w in weights]
    counts = [int(np.floor(e)) for e in exact]
    leftovers = n - sum(counts)
    order = sorted(range(len(LABELS)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def generate(spec: SynthSpec) -> tuple[list[PacketRecord], NextPacketOracle]:
    """Emit n_flows complete flows as packet records, flow-major order.

    Flow order is a seeded shuffle; everything inside a flow is closed-form.
    flow_index is dense in emission order.
    """
    counts = _allocate_flows(spec.n_flows, spec.mix)
    slots = []
    for c, n_c in enumerate(counts):
        for f in range(n_c):
            slots.append((c, f % VARIANTS, (f // VARIANTS) % 2))
    rng = np.random.default_rng(spec.seed)
    rng.shuffle(slots)

    records: list[PacketRecord] = []
    for flow_index, (c, v, s) in enumerate(slots):
        for p in range(FLOW_LEN):
            records.append(PacketRecord(
                features=make_record(c, v, s, p),
                flow_index=flow_index,
                label=PROFILES[c].name,
            ))
    return records, NextPacketOracle()


def profile_table() -> dict:
    """JSON-ready description of the generating rule (dataset sidecar)."""
    return {
        "flow_len": FLOW_LEN,
        "variants": VARIANTS,
        "src_port_rule": {
            "base": SRC_PORT_BASE,
            "class_stride": SRC_PORT_CLASS_STRIDE,
            "choice_step": SRC_PORT_CHOICE_STEP,
        },
        "classes": [
            {
                "name": p.name,
                "proto": p.proto,
                "dst_port": p.dst_port,
                "t0": p.t0,
                "dt": p.dt,
                "ttl": p.ttl,
                "frame_base": p.frame_base,
                "frame_inc": p.frame_inc,
                "window_size": p.window_size,
                "flags": list(p.flags) if p.flags else None,
                "direction": list(p.direction),
            }
            for p in PROFILES
        ],
    }

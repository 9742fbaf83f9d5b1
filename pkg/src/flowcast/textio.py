"""Packet lines: the text bridge between feature tables and the tokenizer.

A packet line is "name=value" pairs joined by single spaces, in column order,
one packet per line. A serialized flow wraps its lines in begin/end markers:

    <FLOW_BEGIN>
    timestamp=0.01 frame_len=122 ...
    timestamp=0.02 frame_len=124 ...
    <FLOW_END>

Lines have a fixed field count (the selected columns), not a fixed token
count. Missing values render as "none".
"""
from __future__ import annotations

from .bpe import FLOW_BEGIN, FLOW_END
from .errors import LineParseError, MixedFlows, UnsafeValue
from .manifest import CATEGORICAL


def render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return format(v, ".6g")
    if isinstance(v, int):
        return str(v)
    s = str(v)
    if s == "" or any(ch in s for ch in " =\n\t"):
        raise UnsafeValue(f"value {s!r} cannot appear in a packet line")
    return s


def parse_value(text: str, column: str):
    if text == "none":
        return None
    if column in CATEGORICAL:
        return text
    try:
        return float(text)
    except ValueError:
        raise LineParseError(f"column {column!r}: bad numeric {text!r}") from None


def serialize_packet_line(values: dict, columns) -> str:
    return " ".join(f"{c}={render_value(values.get(c))}" for c in columns)


def parse_packet_line(line: str, columns) -> dict:
    """Strict inverse of serialize_packet_line for the same column list."""
    parts = line.split(" ")
    if len(parts) != len(columns):
        raise LineParseError(f"expected {len(columns)} fields, got {len(parts)}")
    out = {}
    for part, col in zip(parts, columns):
        name, eq, value = part.partition("=")
        if not eq or name != col or value == "":
            raise LineParseError(f"expected {col}=..., got {part!r}")
        out[col] = parse_value(value, col)
    return out


def flow_lines(records, columns) -> list[str]:
    """Packet lines for one flow (no markers). All records must share a flow."""
    flows = {r.flow_index for r in records}
    if len(flows) > 1:
        raise MixedFlows(f"records span flows {sorted(flows)}")
    return [serialize_packet_line(r.features, columns) for r in records]


def serialize_flow(records, columns) -> str:
    lines = flow_lines(records, columns)
    return "\n".join([FLOW_BEGIN] + lines + [FLOW_END])


def corpus_from_flows(flow_texts) -> str:
    """Join serialized flows into one training corpus string."""
    return "\n".join(flow_texts)

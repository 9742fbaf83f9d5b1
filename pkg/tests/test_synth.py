import numpy as np
import pytest

from flowcast.errors import ConfigError, LineParseError
from flowcast.features import fit_pipeline
from flowcast.manifest import FIELD_NAMES, LABELS
from flowcast.synth import (
    DEV_MIX, FLOW_LEN, PROFILES, VARIANTS, NextPacketOracle, SynthSpec,
    _allocate_flows, generate, make_record, profile_table, src_port_for,
)
from flowcast.textio import flow_lines, serialize_packet_line


def test_every_record_has_the_full_field_set():
    rec = make_record(0, 0, 0, 0)
    assert set(rec) == set(FIELD_NAMES)


def test_class_ports_are_disjoint_and_label_order_matches():
    ports = [p.dst_port for p in PROFILES]
    assert len(set(ports)) == len(ports)
    assert tuple(p.name for p in PROFILES) == LABELS


def test_allocate_flows_dev_mix():
    counts = _allocate_flows(360, DEV_MIX)
    assert sum(counts) == 360
    assert counts[0] == 108  # 0.30 * 360
    assert all(c in (50, 51) for c in counts[1:])


def test_allocate_flows_rejects_bad_mix():
    with pytest.raises(ConfigError):
        _allocate_flows(10, {"Normal": 0.5})
    with pytest.raises(ConfigError):
        _allocate_flows(10, {"Normal": 0.5, "Nope": 0.5})
    with pytest.raises(ConfigError):
        _allocate_flows(0, DEV_MIX)


def test_generate_is_seed_reproducible():
    a, _ = generate(SynthSpec(n_flows=30, seed=5))
    b, _ = generate(SynthSpec(n_flows=30, seed=5))
    assert len(a) == len(b) == 30 * FLOW_LEN
    assert all(x.features == y.features and x.flow_index == y.flow_index
               and x.label == y.label for x, y in zip(a, b))
    c, _ = generate(SynthSpec(n_flows=30, seed=6))
    assert any(x.label != y.label for x, y in zip(a, c))


def test_generate_flow_major_dense_indices():
    records, _ = generate(SynthSpec(n_flows=12, seed=0))
    seen = []
    for r in records:
        if not seen or r.flow_index != seen[-1]:
            seen.append(r.flow_index)
    assert seen == list(range(12))
    by_flow = {}
    for r in records:
        by_flow.setdefault(r.flow_index, []).append(r.features["flow_pkt_index"])
    assert all(v == list(range(FLOW_LEN)) for v in by_flow.values())


def test_labels_are_constant_within_flow_and_match_port():
    records, oracle = generate(SynthSpec(n_flows=24, seed=1))
    for r in records:
        assert oracle.label_for_values(r.features) == r.label


def test_depth_one_rule_separates_classes_perfectly():
    records, _ = generate(SynthSpec(n_flows=60, seed=2))
    port_to_label = {p.dst_port: p.name for p in PROFILES}
    hits = sum(port_to_label[r.features["dst_port"]] == r.label for r in records)
    assert hits == len(records)


def test_oracle_round_trips_all_coordinates():
    oracle = NextPacketOracle()
    for c in range(len(PROFILES)):
        for v in range(VARIANTS):
            for s in (0, 1):
                for p in range(FLOW_LEN):
                    rec = make_record(c, v, s, p)
                    assert oracle.coords_from_values(rec) == (c, v, s, p)


def test_oracle_next_values_matches_closed_form():
    oracle = NextPacketOracle()
    for c in range(len(PROFILES)):
        for p in range(FLOW_LEN - 1):
            rec = make_record(c, 1, 1, p)
            assert oracle.next_values(rec) == make_record(c, 1, 1, p + 1)
        assert oracle.next_values(make_record(c, 1, 1, FLOW_LEN - 1)) is None


def test_oracle_rejects_off_grammar_values():
    oracle = NextPacketOracle()
    rec = make_record(0, 0, 0, 0)
    bad = dict(rec, dst_port=9999)
    with pytest.raises(LineParseError):
        oracle.coords_from_values(bad)
    bad = dict(rec, frame_len=rec["frame_len"] + 1)
    with pytest.raises(LineParseError):
        oracle.coords_from_values(bad)
    bad = dict(rec, src_port=12345)
    with pytest.raises(LineParseError):
        oracle.coords_from_values(bad)
    bad = dict(rec, timestamp=99.0)
    with pytest.raises(LineParseError):
        oracle.coords_from_values(bad)


def test_src_port_rule_is_injective_over_classes_and_choices():
    ports = {src_port_for(c, s) for c in range(len(PROFILES)) for s in (0, 1)}
    assert len(ports) == len(PROFILES) * 2


# the pipeline interaction is what the rest of the system depends on: the
# recovery columns must survive selection, and the padding fields must not
def test_selection_keeps_recovery_columns_and_drops_bookkeeping():
    records, _ = generate(SynthSpec(n_flows=120, seed=3))
    fm, params = fit_pipeline(records)
    kept = set(params.selected)
    assert {"timestamp", "frame_len", "src_port", "dst_port"} <= kept
    for name in ("tcp_seq", "tcp_ack", "tcp_checksum", "ip_checksum",
                 "frame_padding", "vlan_id", "icmp_type", "tcp_opt_mss"):
        assert name not in kept
    # duplicates of frame_len go away via the correlation filter
    assert "eth_payload_len" not in kept
    assert "ip_len" not in kept
    assert "iat_capture" not in kept  # identical to iat_flow
    # lines should stay short enough to model
    assert len(params.selected) <= 20


def test_oracle_next_line_over_selected_columns():
    records, oracle = generate(SynthSpec(n_flows=120, seed=4))
    _, params = fit_pipeline(records)
    cols = params.selected
    flows = {}
    for r in records:
        flows.setdefault(r.flow_index, []).append(r)
    flow = flows[0]
    lines = flow_lines(flow, cols)
    for i in range(FLOW_LEN - 1):
        assert oracle.next_line(lines[i], cols) == lines[i + 1]
    assert oracle.next_line(lines[-1], cols) is None


def test_same_coordinates_render_identical_lines():
    # textual copies across flows are a property the pair sampler must handle
    records, _ = generate(SynthSpec(n_flows=120, seed=5))
    _, params = fit_pipeline(records)
    cols = params.selected
    a = serialize_packet_line(make_record(2, 1, 0, 3), cols)
    b = serialize_packet_line(make_record(2, 1, 0, 3), cols)
    assert a == b


def test_profile_table_is_json_ready():
    import json
    blob = json.dumps(profile_table(), sort_keys=True)
    assert "dst_port" in blob and "flow_len" in blob

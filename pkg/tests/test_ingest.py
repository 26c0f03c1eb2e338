"""Tests for NetFlow v5 parsing/serialization, flow CSV I/O and features."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowsentry import ingest
from flowsentry.errors import (
    RowParseError,
    SchemaMismatch,
    TooManyRecords,
    TruncatedDatagram,
    VersionMismatch,
)
from flowsentry.ingest import (
    FlowDataset,
    FlowRecord,
    Label,
    flow_features,
    feature_matrix,
    parse_netflow_v5,
    read_flow_csv,
    serialize_netflow_v5,
    write_flow_csv,
)


def be(value: int, width: int) -> bytes:
    return value.to_bytes(width, "big")


def hand_encoded_datagram() -> bytes:
    """One v5 datagram built field-by-field at the documented offsets."""
    header = (
        be(5, 2) + be(1, 2)          # version, count
        + be(123456, 4)              # sys_uptime
        + be(1_700_000_000, 4)       # unix_secs
        + be(0, 4)                   # unix_nsecs
        + be(42, 4)                  # flow_sequence
        + be(0, 1) + be(0, 1)        # engine_type, engine_id
        + be(0, 2)                   # sampling_interval
    )
    record = (
        bytes([10, 0, 0, 1])         # srcaddr 10.0.0.1
        + bytes([192, 168, 1, 5])    # dstaddr 192.168.1.5
        + be(0, 4)                   # nexthop
        + be(0, 2) + be(0, 2)        # input, output
        + be(10, 4)                  # dPkts
        + be(1500, 4)                # dOctets
        + be(1000, 4)                # First
        + be(2000, 4)                # Last
        + be(53, 2)                  # srcport
        + be(34567, 2)               # dstport
        + be(0, 1)                   # pad
        + be(0, 1)                   # tcp_flags
        + be(17, 1)                  # prot (UDP)
        + be(0, 1)                   # tos
        + be(0, 2) + be(0, 2)        # src_as, dst_as
        + be(0, 1) + be(0, 1)        # src_mask, dst_mask
        + be(0, 2)                   # pad
    )
    assert len(header) == 24 and len(record) == 48
    return header + record


class TestParseNetflowV5:
    def test_hand_encoded_datagram(self):
        flows = parse_netflow_v5(hand_encoded_datagram())
        assert len(flows) == 1
        f = flows[0]
        assert f.src_ip == "10.0.0.1"
        assert f.dst_ip == "192.168.1.5"
        assert f.src_port == 53
        assert f.dst_port == 34567
        assert f.protocol == 17
        assert f.packets == 10
        assert f.bytes == 1500
        assert f.first_ms == 1000
        assert f.last_ms == 2000
        assert f.tcp_flags == 0
        assert f.label is Label.UNLABELED

    def test_zero_record_datagram(self):
        datagram = be(5, 2) + be(0, 2) + bytes(20)
        assert parse_netflow_v5(datagram) == []

    def test_version_mismatch(self):
        datagram = be(9, 2) + be(0, 2) + bytes(20)
        with pytest.raises(VersionMismatch):
            parse_netflow_v5(datagram)

    def test_truncated_datagram(self):
        good = hand_encoded_datagram()
        with pytest.raises(TruncatedDatagram):
            parse_netflow_v5(good[:-1])
        with pytest.raises(TruncatedDatagram):
            parse_netflow_v5(good[:10])

    def test_count_inconsistent_with_length(self):
        # Header claims 2 records but only one follows.
        bad = be(5, 2) + be(2, 2) + bytes(20) + bytes(48)
        with pytest.raises(TruncatedDatagram):
            parse_netflow_v5(bad)


def ipv4_strategy():
    return st.integers(0, 2**32 - 1).map(
        lambda n: f"{n >> 24 & 255}.{n >> 16 & 255}.{n >> 8 & 255}.{n & 255}")


@st.composite
def flow_records(draw):
    t1 = draw(st.integers(0, 2**32 - 1))
    t2 = draw(st.integers(0, 2**32 - 1))
    return FlowRecord(
        src_ip=draw(ipv4_strategy()),
        dst_ip=draw(ipv4_strategy()),
        src_port=draw(st.integers(0, 65535)),
        dst_port=draw(st.integers(0, 65535)),
        protocol=draw(st.integers(0, 255)),
        first_ms=min(t1, t2),
        last_ms=max(t1, t2),
        packets=draw(st.integers(1, 2**32 - 1)),
        bytes=draw(st.integers(1, 2**32 - 1)),
        tcp_flags=draw(st.integers(0, 255)),
    )


flow_strategy = flow_records()


class TestSerializeNetflowV5:
    def test_round_trip_single(self):
        flows = parse_netflow_v5(hand_encoded_datagram())
        again = parse_netflow_v5(serialize_netflow_v5(flows))
        assert again == flows

    def test_empty_list(self):
        data = serialize_netflow_v5([])
        assert len(data) == 24
        assert parse_netflow_v5(data) == []

    def test_too_many_records(self):
        flows = parse_netflow_v5(hand_encoded_datagram()) * 31
        with pytest.raises(TooManyRecords):
            serialize_netflow_v5(flows)

    def test_thirty_records_ok(self):
        flows = parse_netflow_v5(hand_encoded_datagram()) * 30
        assert parse_netflow_v5(serialize_netflow_v5(flows)) == flows

    @settings(max_examples=100, deadline=None)
    @given(st.lists(flow_strategy, max_size=30))
    def test_round_trip_property(self, flows):
        assert parse_netflow_v5(serialize_netflow_v5(flows)) == flows

    def test_stream_of_datagrams(self):
        flows = parse_netflow_v5(hand_encoded_datagram())
        stream = serialize_netflow_v5(flows) + serialize_netflow_v5(flows * 2)
        assert list(ingest.iter_netflow_v5_stream(stream)) == flows * 3


SAMPLE_CSV = (
    "src_ip,dst_ip,src_port,dst_port,protocol,first_ms,last_ms,packets,bytes,tcp_flags,label,vector_tag\n"
    "10.0.0.1,192.168.1.5,53,34567,17,1000,2000,10,1500,0,Benign,\n"
)


class TestFlowCsv:
    def test_read_single_row(self):
        ds = read_flow_csv(SAMPLE_CSV)
        assert len(ds) == 1
        assert ds.flows[0].label is Label.BENIGN
        assert ds.flows[0].vector_tag is None

    def test_header_only(self):
        ds = read_flow_csv(SAMPLE_CSV.splitlines()[0] + "\n")
        assert len(ds) == 0

    def test_missing_column(self):
        with pytest.raises(SchemaMismatch):
            read_flow_csv("src_ip,dst_ip\n1.2.3.4,5.6.7.8\n")

    def test_row_parse_error_carries_row_number(self):
        bad = SAMPLE_CSV.replace(",10,1500,", ",ten,1500,")
        with pytest.raises(RowParseError) as err:
            read_flow_csv(bad)
        assert err.value.row == 2

    def test_unknown_columns_ignored(self):
        extra = SAMPLE_CSV.splitlines()
        text = extra[0] + ",note\n" + extra[1].rstrip("\n") + ",hello\n"
        assert len(read_flow_csv(text)) == 1

    def test_round_trip_with_labels_and_tags(self):
        flows = [
            FlowRecord("10.0.0.1", "192.168.1.5", 53, 34567, 17, 1000, 2000, 10,
                       1500, 0, Label.MALICIOUS, "DNS"),
            FlowRecord("172.16.0.9", "203.0.113.7", 40000, 443, 6, 5, 5, 1, 60,
                       ingest.TCP_SYN | ingest.TCP_ACK, Label.BENIGN, None),
        ]
        ds = FlowDataset(flows=flows, provenance="unit")
        text = write_flow_csv(ds)
        back = read_flow_csv(io.StringIO(text), provenance="unit")
        assert back.flows == flows
        assert back.provenance == ds.provenance

    @settings(max_examples=100, deadline=None)
    @given(st.lists(flow_strategy, max_size=20),
           st.sampled_from([Label.BENIGN, Label.MALICIOUS, Label.UNLABELED]),
           st.sampled_from([None, "DNS", "NTP", "weird tag"]))
    def test_round_trip_property(self, flows, label, tag):
        flows = [f.with_label(label, tag) for f in flows]
        text = write_flow_csv(FlowDataset(flows=flows))
        assert read_flow_csv(text).flows == flows


class TestFlowFeatures:
    def test_hand_arithmetic(self):
        f = FlowRecord("10.0.0.1", "192.168.1.5", 53, 34567, 17, 1000, 2000, 10, 1500)
        v = flow_features(f)
        assert v.shape == (12,)
        assert v[0] == pytest.approx(math.log(11))
        assert v[1] == pytest.approx(math.log(1501))
        assert v[2] == pytest.approx(1.0)        # duration_s
        assert v[3] == pytest.approx(150.0)      # mean packet size
        assert v[4] == pytest.approx(10.0)       # pps
        assert v[5] == pytest.approx(12000.0)    # bps
        assert v[6] == 0.0 and v[7] == 1.0 and v[8] == 0.0
        assert v[9] == 0.0                       # dst_port 34567 >= 1024
        assert v[10] == 1.0                      # src_port 53 < 1024

    def test_duration_clamp(self):
        f = FlowRecord("1.2.3.4", "5.6.7.8", 1024, 2048, 6, 500, 500, 7, 700)
        v = flow_features(f)
        assert v[2] == pytest.approx(0.001)
        assert v[4] == pytest.approx(7 / 0.001)

    def test_syn_only_tcp_flow(self):
        f = FlowRecord("1.2.3.4", "5.6.7.8", 4000, 80, 6, 0, 10, 1, 40,
                       tcp_flags=ingest.TCP_SYN)
        v = flow_features(f)
        assert v[11] == 1.0
        assert v[6] == 1.0

    @settings(max_examples=150, deadline=None)
    @given(flow_strategy)
    def test_always_finite_and_length_12(self, flow):
        v = flow_features(flow)
        assert v.shape == (12,)
        assert np.all(np.isfinite(v))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(flow_strategy, min_size=1, max_size=50))
    def test_feature_matrix_matches_scalar_path(self, flows):
        mat = feature_matrix(flows)
        ref = np.stack([flow_features(f) for f in flows])
        np.testing.assert_allclose(mat, ref, rtol=0, atol=0)

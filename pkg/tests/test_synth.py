"""Tests for the synthetic carpet-bombing scenario generator."""

from collections import Counter
from ipaddress import IPv4Address, IPv4Network

import pytest

from flowsentry.errors import ConfigurationError, EmptyVectorList
from flowsentry.ingest import Label, write_flow_csv
from flowsentry.synth import (
    AttackVectorTemplate,
    ScenarioConfig,
    builtin_vector_library,
    generate_scenario,
    scenario_from_json,
    vector_by_name,
)


def trio():
    return tuple(vector_by_name(n) for n in ("DNS", "NTP", "SYN"))


class TestVectorLibrary:
    def test_contains_canonical_trio(self):
        names = {t.name for t in builtin_vector_library()}
        assert {"DNS", "NTP", "SYN"} <= names

    def test_size_is_eleven(self):
        assert len(builtin_vector_library()) == 11

    def test_names_distinct(self):
        names = [t.name for t in builtin_vector_library()]
        assert len(set(names)) == len(names)

    def test_pinned_signatures(self):
        dns = vector_by_name("DNS")
        assert dns.protocol == 17 and dns.fixed_src_port == 53
        ntp = vector_by_name("NTP")
        assert ntp.protocol == 17 and ntp.fixed_src_port == 123
        syn = vector_by_name("SYN")
        assert syn.protocol == 6 and syn.tcp_flags & 0x02

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            vector_by_name("FRAGGLE")


class TestGenerateScenario:
    def test_benign_only(self):
        ds = generate_scenario(ScenarioConfig(n_benign_flows=100, seed=1))
        assert len(ds) == 100
        assert all(f.label is Label.BENIGN for f in ds)

    def test_determinism_byte_identical_csv(self):
        cfg = ScenarioConfig(vectors=trio(), n_attack_flows=50,
                             n_benign_flows=50, seed=7)
        a = write_flow_csv(generate_scenario(cfg))
        b = write_flow_csv(generate_scenario(cfg))
        assert a == b

    def test_different_seeds_differ(self):
        base = dict(vectors=trio(), n_attack_flows=50, n_benign_flows=50)
        a = write_flow_csv(generate_scenario(ScenarioConfig(seed=1, **base)))
        b = write_flow_csv(generate_scenario(ScenarioConfig(seed=2, **base)))
        assert a != b

    def test_round_robin_vector_counts(self):
        cfg = ScenarioConfig(vectors=trio(), n_attack_flows=300, seed=3)
        ds = generate_scenario(cfg)
        counts = Counter(f.vector_tag for f in ds if f.label is Label.MALICIOUS)
        assert counts == {"DNS": 100, "NTP": 100, "SYN": 100}

    def test_empty_vector_list_guard(self):
        with pytest.raises(EmptyVectorList):
            generate_scenario(ScenarioConfig(n_attack_flows=5, seed=0))

    def test_victim_prefix_membership_and_count(self):
        cfg = ScenarioConfig(victim_prefix="198.18.5.0/24", n_victims=4,
                             vectors=trio(), n_attack_flows=120,
                             n_benign_flows=40, seed=11)
        ds = generate_scenario(cfg)
        net = IPv4Network("198.18.5.0/24")
        attack_dsts = {f.dst_ip for f in ds if f.label is Label.MALICIOUS}
        assert all(IPv4Address(ip) in net for ip in attack_dsts)
        assert len(attack_dsts) == 4
        benign_dsts = {f.dst_ip for f in ds if f.label is Label.BENIGN}
        assert all(IPv4Address(ip) not in net for ip in benign_dsts)

    def test_time_ordering(self):
        cfg = ScenarioConfig(vectors=trio(), n_attack_flows=60,
                             n_benign_flows=60, seed=5)
        times = [f.first_ms for f in generate_scenario(cfg)]
        assert times == sorted(times)

    @pytest.mark.parametrize("name", ["DNS", "NTP", "SSDP"])
    def test_mean_packet_size_near_template(self, name):
        tpl = vector_by_name(name)
        cfg = ScenarioConfig(vectors=(tpl,), n_attack_flows=250, seed=17)
        ds = generate_scenario(cfg)
        sizes = [f.bytes / f.packets for f in ds if f.label is Label.MALICIOUS]
        assert len(sizes) >= 200
        mean = sum(sizes) / len(sizes)
        tol = 3 * tpl.packet_size_jitter_frac * tpl.packet_size_mean
        assert abs(mean - tpl.packet_size_mean) <= tol

    def test_counts_validation(self):
        with pytest.raises(ConfigurationError):
            ScenarioConfig(n_victims=0)
        with pytest.raises(ConfigurationError):
            ScenarioConfig(n_victims=257)
        with pytest.raises(ConfigurationError):
            ScenarioConfig(n_attack_flows=-1)


class TestScenarioJson:
    def test_names_and_objects(self):
        cfg = scenario_from_json("""
        {
          "victim_prefix": "198.18.7.0/24",
          "n_victims": 8,
          "vectors": ["DNS", {"name": "CUSTOM", "protocol": 17,
                              "fixed_src_port": null, "packet_size_mean": 200,
                              "packet_size_jitter_frac": 0.1, "pps_mean": 10,
                              "duration_mean_s": 2}],
          "n_attack_flows": 10, "n_benign_flows": 5, "seed": 9
        }
        """)
        assert cfg.n_victims == 8
        assert [v.name for v in cfg.vectors] == ["DNS", "CUSTOM"]
        ds = generate_scenario(cfg)
        assert len(ds) == 15

    def test_bad_json(self):
        with pytest.raises(ConfigurationError):
            scenario_from_json("{nope")

    def test_bad_vector_entry(self):
        with pytest.raises(ConfigurationError):
            scenario_from_json('{"vectors": [42]}')

    def test_jitter_bounds(self):
        with pytest.raises(ConfigurationError):
            AttackVectorTemplate("X", 17, None, 100, 0.9, 10, 1)

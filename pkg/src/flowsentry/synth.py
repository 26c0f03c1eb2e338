"""Synthetic carpet-bombing scenario generator.

Attack flows of one vector share a narrow tool signature (Gaussian jitter
around the template means) and arrive in a time burst aimed at a small
set of victim addresses inside one /24, which is what gives them the
strong inter-flow correlation the detection pipelines exploit. Benign
background flows are broad: log-normal byte counts (mu=8, sigma=2 in
ln-bytes), ports uniform over the registered range, arrival uniform over
the scenario window.

All randomness comes from numpy's PCG64 generator seeded from the
scenario seed, so identical configs produce byte-identical datasets on
any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv4Network

import numpy as np

from .errors import ConfigurationError, EmptyVectorList
from .ingest import (
    FlowDataset,
    FlowRecord,
    Label,
    PROTO_TCP,
    PROTO_UDP,
    TCP_ACK,
    TCP_FIN,
    TCP_PSH,
    TCP_SYN,
)

# Benign background distribution (ln-bytes).
BENIGN_LN_BYTES_MU = 8.0
BENIGN_LN_BYTES_SIGMA = 2.0
REGISTERED_PORT_LO = 1024
REGISTERED_PORT_HI = 49151

# Common service ports seen on either side of benign backbone flows. Their
# presence keeps privileged-port indicators from becoming attack markers.
SERVICE_PORTS = (22, 25, 53, 80, 110, 123, 143, 161, 389, 443, 993)
BENIGN_SRC_SERVICE_FRAC = 0.35
BENIGN_DST_SERVICE_FRAC = 0.45

# Attack campaigns are built from bursts of roughly this many flows; each
# burst draws its own rate/duration working point (log-normal around the
# template means) while packet size stays inside the template jitter.
TARGET_BURST_FLOWS = 150
BURST_RATE_LOG_SD = 0.5
BURST_DURATION_LOG_SD = 0.4

DEFAULT_BENIGN_PREFIX = "203.0.113.0/24"
FALLBACK_BENIGN_PREFIX = "198.51.100.0/24"


@dataclass(frozen=True)
class AttackVectorTemplate:
    """Tool signature of one attack vector."""

    name: str
    protocol: int
    fixed_src_port: int | None
    packet_size_mean: float
    packet_size_jitter_frac: float
    pps_mean: float
    duration_mean_s: float
    dst_port: int | None = None
    tcp_flags: int = 0

    def __post_init__(self):
        if not 0.0 <= self.packet_size_jitter_frac <= 0.5:
            raise ConfigurationError(
                f"{self.name}: packet_size_jitter_frac must be in [0, 0.5]")
        if self.packet_size_mean <= 0 or self.pps_mean <= 0 or self.duration_mean_s <= 0:
            raise ConfigurationError(f"{self.name}: template means must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    victim_prefix: str = "198.18.0.0/24"
    n_victims: int = 32
    vectors: tuple[AttackVectorTemplate, ...] = ()
    n_attack_flows: int = 0
    n_benign_flows: int = 0
    window_s: float = 600.0
    seed: int = 0

    def __post_init__(self):
        if self.n_victims < 1 or self.n_victims > 256:
            raise ConfigurationError("n_victims must be in [1, 256]")
        if self.n_attack_flows < 0 or self.n_benign_flows < 0:
            raise ConfigurationError("flow counts must be >= 0")
        if self.window_s <= 0:
            raise ConfigurationError("window_s must be positive")
        net = IPv4Network(self.victim_prefix)
        if net.prefixlen != 24:
            raise ConfigurationError("victim_prefix must be a /24")


def builtin_vector_library() -> list[AttackVectorTemplate]:
    """The 11 named attack-vector templates shipped with the generator.

    DNS, NTP and SYN are the canonical trio; the other eight reconstruct
    common reflection/flood tools. Every signature mean sits inside the
    benign background's marginal feature ranges, and the signatures are
    spread apart from each other, so neither a single-flow statistic nor
    a box learned around one vector carries to the rest; the exploitable
    structure is the narrow within-burst jitter shared by a tool's flows.
    """
    return [
        AttackVectorTemplate("DNS", PROTO_UDP, 53, 512.0, 0.05, 12.0, 3.0),
        AttackVectorTemplate("NTP", PROTO_UDP, 123, 468.0, 0.04, 9.0, 4.0),
        AttackVectorTemplate("SYN", PROTO_TCP, None, 40.0, 0.02, 55.0, 2.5,
                             dst_port=80, tcp_flags=TCP_SYN),
        AttackVectorTemplate("UDP", PROTO_UDP, None, 1200.0, 0.06, 5.0, 2.0),
        AttackVectorTemplate("LDAP", PROTO_UDP, 389, 1380.0, 0.03, 4.0, 3.0),
        AttackVectorTemplate("SNMP", PROTO_UDP, 161, 750.0, 0.05, 25.0, 1.5),
        AttackVectorTemplate("MSSQL", PROTO_UDP, 1434, 620.0, 0.04, 7.0, 5.0),
        AttackVectorTemplate("NetBIOS", PROTO_UDP, 137, 160.0, 0.05, 40.0, 2.0),
        AttackVectorTemplate("SSDP", PROTO_UDP, 1900, 250.0, 0.06, 30.0, 1.2),
        AttackVectorTemplate("Portmap", PROTO_UDP, 111, 900.0, 0.03, 20.0, 1.5),
        AttackVectorTemplate("TFTP", PROTO_UDP, 69, 300.0, 0.05, 6.0, 6.0),
    ]


def vector_by_name(name: str) -> AttackVectorTemplate:
    for t in builtin_vector_library():
        if t.name == name:
            return t
    raise ConfigurationError(f"unknown attack vector: {name!r}")


def _benign_prefix(victim_prefix: str) -> IPv4Network:
    net = IPv4Network(DEFAULT_BENIGN_PREFIX)
    if IPv4Network(victim_prefix).overlaps(net):
        net = IPv4Network(FALLBACK_BENIGN_PREFIX)
    return net


def _rand_ip(rng: np.random.Generator) -> str:
    # Stay inside 100.64.0.0/10 (CGNAT space) for synthetic sources.
    return str(IPv4Address(0x64400000 + int(rng.integers(0, 1 << 22))))


_BENIGN_TCP_FLAG_PATTERNS = (
    TCP_SYN | TCP_ACK | TCP_PSH | TCP_FIN,
    TCP_SYN | TCP_ACK | TCP_PSH,
    TCP_SYN | TCP_ACK | TCP_FIN,
    TCP_ACK | TCP_PSH,
)


def _benign_port(rng: np.random.Generator, service_frac: float) -> int:
    if rng.random() < service_frac:
        return int(SERVICE_PORTS[int(rng.integers(0, len(SERVICE_PORTS)))])
    return int(rng.integers(REGISTERED_PORT_LO, REGISTERED_PORT_HI + 1))


def _benign_mean_pkt(rng: np.random.Generator) -> float:
    """Multi-modal mean packet size: small-ACK, mid-payload, near-MTU, diffuse.

    Real traffic clusters at a few common sizes, so a narrow size band
    alone never cleanly separates attack flows from the background.
    """
    u = rng.random()
    if u < 0.28:
        mps = rng.normal(46.0, 6.0)
    elif u < 0.52:
        mps = rng.normal(500.0, 35.0)
    elif u < 0.68:
        mps = rng.normal(1380.0, 40.0)
    else:
        mps = rng.uniform(40.0, 1400.0)
    return float(min(max(mps, 40.0), 1500.0))


def _benign_flow(rng: np.random.Generator, cfg: ScenarioConfig,
                 benign_net: IPv4Network) -> FlowRecord:
    nbytes = max(1, int(round(float(np.exp(rng.normal(
        BENIGN_LN_BYTES_MU, BENIGN_LN_BYTES_SIGMA))))))
    mean_pkt = _benign_mean_pkt(rng)
    packets = max(1, int(round(nbytes / mean_pkt)))
    duration_s = float(np.exp(rng.normal(0.0, 1.5)))
    duration_s = min(max(duration_s, 0.001), cfg.window_s / 2)
    proto = int(rng.choice([PROTO_TCP, PROTO_UDP, 1], p=[0.6, 0.35, 0.05]))
    flags = 0
    if proto == PROTO_TCP:
        flags = int(_BENIGN_TCP_FLAG_PATTERNS[int(rng.integers(0, 4))])
    first_ms = int(rng.integers(0, int(cfg.window_s * 1000)))
    dst_host = 1 + int(rng.integers(0, 254))
    return FlowRecord(
        src_ip=_rand_ip(rng),
        dst_ip=str(benign_net.network_address + dst_host),
        src_port=_benign_port(rng, BENIGN_SRC_SERVICE_FRAC),
        dst_port=_benign_port(rng, BENIGN_DST_SERVICE_FRAC),
        protocol=proto,
        first_ms=first_ms,
        last_ms=first_ms + int(round(duration_s * 1000)),
        packets=packets,
        bytes=nbytes,
        tcp_flags=flags,
        label=Label.BENIGN,
    )


@dataclass(frozen=True)
class _Burst:
    """One attack campaign of a vector inside the scenario window.

    Packet size is drawn once per burst at half the template jitter, so
    the per-vector size envelope stays narrow. The rate and duration
    working points vary log-normally burst to burst (campaigns are tuned
    by the attacker), while flows of one burst scatter only by the other
    half of the jitter around the working point: flows within a burst are
    strongly correlated, which is the structure the sequence models are
    meant to exploit.
    """

    center_ms: float
    spread_ms: float
    pkt_size: float
    pps: float
    duration_s: float


def _draw_burst(rng: np.random.Generator, tpl: AttackVectorTemplate,
                window_ms: float) -> _Burst:
    half = tpl.packet_size_jitter_frac / 2.0
    return _Burst(
        center_ms=float(rng.uniform(0.10, 0.90)) * window_ms,
        spread_ms=float(rng.uniform(0.015, 0.05)) * window_ms,
        pkt_size=float(rng.normal(tpl.packet_size_mean,
                                  half * tpl.packet_size_mean)),
        pps=tpl.pps_mean * float(np.exp(rng.normal(0.0, BURST_RATE_LOG_SD))),
        duration_s=tpl.duration_mean_s * float(
            np.exp(rng.normal(0.0, BURST_DURATION_LOG_SD))))


def _attack_flow(rng: np.random.Generator, cfg: ScenarioConfig,
                 tpl: AttackVectorTemplate, victim_net: IPv4Network,
                 victim_index: int, burst: _Burst) -> FlowRecord:
    half = tpl.packet_size_jitter_frac / 2.0
    pkt_size = float(rng.normal(burst.pkt_size, half * tpl.packet_size_mean))
    pkt_size = min(max(pkt_size, 28.0), 1500.0)
    pps = max(0.5, float(rng.normal(burst.pps, half * burst.pps)))
    duration_s = max(0.05, float(rng.normal(burst.duration_s,
                                            half * burst.duration_s)))
    packets = max(1, int(round(pps * duration_s)))
    nbytes = max(1, int(round(packets * pkt_size)))
    first_ms = int(round(float(rng.normal(burst.center_ms, burst.spread_ms))))
    first_ms = min(max(first_ms, 0), int(cfg.window_s * 1000))
    src_port = tpl.fixed_src_port if tpl.fixed_src_port is not None \
        else int(rng.integers(REGISTERED_PORT_LO, REGISTERED_PORT_HI + 1))
    dst_port = tpl.dst_port if tpl.dst_port is not None \
        else int(rng.integers(REGISTERED_PORT_LO, REGISTERED_PORT_HI + 1))
    return FlowRecord(
        src_ip=_rand_ip(rng),
        dst_ip=str(victim_net.network_address + victim_index),
        src_port=src_port,
        dst_port=dst_port,
        protocol=tpl.protocol,
        first_ms=first_ms,
        last_ms=first_ms + int(round(duration_s * 1000)),
        packets=packets,
        bytes=nbytes,
        tcp_flags=tpl.tcp_flags,
        label=Label.MALICIOUS,
        vector_tag=tpl.name,
    )


def generate_scenario(config: ScenarioConfig) -> FlowDataset:
    """Generate a labeled scenario dataset, time-ordered by first_ms.

    Exactly ``n_attack_flows`` Malicious flows are produced, assigned
    round-robin over the vector templates; each vector's flows cluster in
    a burst interval inside the window. Exactly ``n_benign_flows`` Benign
    flows cover the whole window. Deterministic given the seed.
    """
    if config.n_attack_flows > 0 and not config.vectors:
        raise EmptyVectorList("n_attack_flows > 0 but no vector templates given")
    rng = np.random.default_rng(config.seed)
    victim_net = IPv4Network(config.victim_prefix)
    benign_net = _benign_prefix(config.victim_prefix)
    window_ms = config.window_s * 1000.0

    # Vector v receives the flows with index i % n_vectors == v, organized
    # into campaigns of roughly TARGET_BURST_FLOWS flows. All bursts are
    # drawn up front so their placement depends only on the seed and the
    # vector list, not on flow counts.
    n_vec = len(config.vectors)
    counts = [len(range(v, config.n_attack_flows, n_vec)) for v in range(n_vec)]
    bursts: list[list[_Burst]] = []
    for v, tpl in enumerate(config.vectors):
        n_bursts = max(1, -(-counts[v] // TARGET_BURST_FLOWS))
        bursts.append([_draw_burst(rng, tpl, window_ms) for _ in range(n_bursts)])

    flows = []
    per_vector_emitted = [0] * n_vec
    for i in range(config.n_attack_flows):
        v = i % n_vec
        j = per_vector_emitted[v]
        per_vector_emitted[v] += 1
        burst = bursts[v][j // TARGET_BURST_FLOWS]
        flows.append(_attack_flow(
            rng, config, config.vectors[v], victim_net,
            victim_index=i % config.n_victims, burst=burst))
    for _ in range(config.n_benign_flows):
        flows.append(_benign_flow(rng, config, benign_net))

    flows.sort(key=lambda f: f.first_ms)  # stable: equal timestamps keep order
    return FlowDataset(
        flows=flows,
        provenance=f"synth(seed={config.seed}, vectors={[t.name for t in config.vectors]})",
    )


# --- scenario JSON ------------------------------------------------------------

def scenario_from_json(text: str) -> ScenarioConfig:
    """Build a ScenarioConfig from a JSON document mirroring its fields.

    ``vectors`` entries may be builtin template names or full template
    objects with the AttackVectorTemplate field names.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"scenario config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigurationError("scenario config must be a JSON object")
    vectors = []
    for entry in doc.get("vectors", []):
        if isinstance(entry, str):
            vectors.append(vector_by_name(entry))
        elif isinstance(entry, dict):
            try:
                vectors.append(AttackVectorTemplate(**entry))
            except TypeError as e:
                raise ConfigurationError(f"bad vector template: {e}") from e
        else:
            raise ConfigurationError("vector entries must be names or objects")
    known = {"victim_prefix", "n_victims", "n_attack_flows", "n_benign_flows",
             "window_s", "seed"}
    kwargs = {k: doc[k] for k in known if k in doc}
    try:
        return ScenarioConfig(vectors=tuple(vectors), **kwargs)
    except TypeError as e:
        raise ConfigurationError(f"bad scenario config: {e}") from e

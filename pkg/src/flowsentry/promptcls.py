"""Classifier-role harness: flows as text, prompt assembly, verdict parsing.

A prompt is a skeleton with four placeholders ({TASK}, {FEWSHOTS},
{QUERIES}, {OUTPUT_STATEMENT}); flows render through one fixed single-line
template so prompts are byte-stable. Classification can go to any
chat-completion-compatible HTTP endpoint or to a deterministic offline
stub that applies a simple rate/flag rule, which keeps the whole
experiment loop runnable without network access.
"""

from __future__ import annotations

import enum
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

import httpx

from .errors import (
    EmptyQuery,
    HttpError,
    InsufficientClassExamples,
    MalformedPrompt,
    RetriesExhausted,
    Timeout,
)
from .ingest import (
    PROTO_ICMP,
    PROTO_TCP,
    PROTO_UDP,
    TCP_ACK,
    TCP_FIN,
    TCP_PSH,
    TCP_RST,
    TCP_SYN,
    TCP_URG,
    FlowDataset,
    FlowRecord,
    Label,
)

API_KEY_ENV = "FLOWSENTRY_LLM_KEY"

_FLAG_NAMES = ((TCP_FIN, "FIN"), (TCP_SYN, "SYN"), (TCP_RST, "RST"),
               (TCP_PSH, "PSH"), (TCP_ACK, "ACK"), (TCP_URG, "URG"),
               (0x40, "ECE"), (0x80, "CWR"))

# Stub decision rule thresholds.
STUB_PPS_LIMIT = 1000.0
STUB_SYN_PACKET_LIMIT = 100


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str
    output_statement: str
    fewshot_slot_count: int = 4


@dataclass(frozen=True)
class FewShotExample:
    flow_text: str
    label: str       # "Benign" | "Malicious"
    rationale: str


@dataclass(frozen=True)
class FewShotSet:
    examples: tuple[FewShotExample, ...]


class Decision(enum.Enum):
    BENIGN = "Benign"
    MALICIOUS = "Malicious"
    UNPARSEABLE = "Unparseable"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    explanation: str
    raw_response: str


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str
    model: str = "default"
    timeout_s: float = 30.0
    max_retries: int = 2
    temperature: float = 0.0
    backoff_base_s: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


DEFAULT_TEMPLATE = PromptTemplate(
    task_description=(
        "You are a network security analyst reviewing aggregated flow "
        "records from a backbone link. Decide for each listed flow whether "
        "it is ordinary traffic or part of a flooding attack."),
    output_statement=(
        "Answer with either 'Benign' or 'Malicious' for each numbered flow, "
        "then give a one-line reason."),
)

DEFAULT_SKELETON = "{TASK}\n\n{FEWSHOTS}{QUERIES}\n{OUTPUT_STATEMENT}\n"

QUERY_SECTION_HEADER = "Flows to classify:"
EXAMPLE_SECTION_HEADER = "Examples:"


def load_skeleton(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    for placeholder in ("{TASK}", "{FEWSHOTS}", "{QUERIES}", "{OUTPUT_STATEMENT}"):
        if placeholder not in text:
            raise MalformedPrompt(f"template file missing placeholder {placeholder}")
    return text


# --- flow rendering -----------------------------------------------------------

def _proto_name(protocol: int) -> str:
    return {PROTO_TCP: "TCP", PROTO_UDP: "UDP", PROTO_ICMP: "ICMP"}.get(
        protocol, f"proto-{protocol}")


def _flag_text(flags: int) -> str:
    return "|".join(name for bit, name in _FLAG_NAMES if flags & bit)


def flow_to_text(flow: FlowRecord) -> str:
    """Fixed single-line rendering of one flow; deterministic."""
    dur = flow.duration_s
    text = (f"{_proto_name(flow.protocol)} flow "
            f"{flow.src_ip}:{flow.src_port} -> {flow.dst_ip}:{flow.dst_port}, "
            f"{flow.packets} packets, {flow.bytes} bytes, "
            f"{dur:.3f} s, {flow.packets / dur:.1f} pkt/s")
    if flow.tcp_flags:
        text += f", flags={_flag_text(flow.tcp_flags)}"
    return text


# --- few-shot selection ----------------------------------------------------------

def _rationale(flow: FlowRecord) -> str:
    pps = flow.packets / flow.duration_s
    if flow.tcp_flags & TCP_SYN and flow.protocol == PROTO_TCP and flow.tcp_flags == TCP_SYN:
        return f"SYN-only TCP flow sending {flow.packets} packets with no handshake"
    if pps > STUB_PPS_LIMIT:
        return f"sustained rate of {pps:.1f} pkt/s"
    if flow.src_port < 1024:
        return f"service-port {flow.src_port} source at {pps:.1f} pkt/s"
    return f"moderate rate of {pps:.1f} pkt/s over {flow.duration_s:.3f} s"


def select_fewshots(dataset: FlowDataset, k: int, seed: int) -> FewShotSet:
    """Stratified seeded sampling: ceil(k/2) Malicious, floor(k/2) Benign."""
    if k == 0:
        return FewShotSet(examples=())
    n_mal = (k + 1) // 2
    n_ben = k // 2
    malicious = [f for f in dataset.flows if f.label is Label.MALICIOUS]
    benign = [f for f in dataset.flows if f.label is Label.BENIGN]
    if len(malicious) < n_mal or len(benign) < n_ben:
        raise InsufficientClassExamples(
            f"need {n_mal} Malicious and {n_ben} Benign examples, have "
            f"{len(malicious)} and {len(benign)}")
    rng = np.random.default_rng(seed)
    picked_mal = [malicious[i] for i in rng.choice(len(malicious), n_mal, replace=False)]
    picked_ben = [benign[i] for i in rng.choice(len(benign), n_ben, replace=False)]
    examples = []
    for i in range(k):  # interleave starting with Malicious (it gets ceil(k/2))
        flow = picked_mal[i // 2] if i % 2 == 0 else picked_ben[i // 2]
        examples.append(FewShotExample(flow_text=flow_to_text(flow),
                                       label=flow.label.value,
                                       rationale=_rationale(flow)))
    return FewShotSet(examples=tuple(examples))


# --- prompt assembly ---------------------------------------------------------------

def build_prompt(template: PromptTemplate, fewshots: FewShotSet,
                 queries: Sequence[FlowRecord],
                 skeleton: str = DEFAULT_SKELETON) -> str:
    """Assemble the prompt text; byte-identical for identical inputs."""
    if not queries:
        raise EmptyQuery("build_prompt needs at least one query flow")
    fewshot_text = ""
    if fewshots.examples:
        lines = [EXAMPLE_SECTION_HEADER]
        for i, ex in enumerate(fewshots.examples, start=1):
            lines.append(f"{i}. {ex.flow_text}")
            lines.append(f"   Label: {ex.label}")
            lines.append(f"   Reason: {ex.rationale}")
        fewshot_text = "\n".join(lines) + "\n\n"
    query_lines = [QUERY_SECTION_HEADER]
    for i, flow in enumerate(queries, start=1):
        query_lines.append(f"{i}. {flow_to_text(flow)}")
    return (skeleton
            .replace("{TASK}", template.task_description)
            .replace("{FEWSHOTS}", fewshot_text)
            .replace("{QUERIES}", "\n".join(query_lines))
            .replace("{OUTPUT_STATEMENT}", template.output_statement))


# --- stub classifier ------------------------------------------------------------------

_QUERY_LINE = re.compile(
    r"^\d+\.\s+(?P<text>\S.*?(?P<packets>\d+) packets.*?"
    r"(?P<pps>\d+(?:\.\d+)?) pkt/s(?:, flags=(?P<flags>[A-Z|]+))?)\s*$")


def stub_classify(prompt: str) -> str:
    """Deterministic offline double for a chat-completion endpoint.

    Reads the numbered flow lines of the query section and answers
    Malicious when the rate exceeds 1000 pkt/s or a SYN-flagged flow
    carries more than 100 packets.
    """
    if QUERY_SECTION_HEADER not in prompt:
        raise MalformedPrompt("prompt has no query section")
    section = prompt.split(QUERY_SECTION_HEADER, 1)[1]
    answers = []
    for line in section.splitlines():
        m = _QUERY_LINE.match(line.strip())
        if not m:
            continue
        pps = float(m.group("pps"))
        packets = int(m.group("packets"))
        flags = m.group("flags") or ""
        syn = "SYN" in flags.split("|")
        n = len(answers) + 1
        if pps > STUB_PPS_LIMIT:
            answers.append(f"Flow {n}: Malicious - {pps:.1f} pkt/s exceeds "
                           f"{STUB_PPS_LIMIT:.0f} pkt/s")
        elif syn and packets > STUB_SYN_PACKET_LIMIT:
            answers.append(f"Flow {n}: Malicious - SYN-flagged flow of "
                           f"{packets} packets")
        else:
            answers.append(f"Flow {n}: Benign - {pps:.1f} pkt/s is within "
                           "normal range")
    if not answers:
        raise MalformedPrompt("no parseable flow line in the query section")
    return "\n".join(answers)


# --- verdict parsing --------------------------------------------------------------------

def parse_verdict(response: str) -> Verdict:
    """First case-insensitive occurrence of benign/malicious wins.

    Never raises; an answer containing neither keyword is the
    UNPARSEABLE decision, not an error.
    """
    lower = response.lower()
    hits = [(idx, dec) for dec, idx in
            ((Decision.BENIGN, lower.find("benign")),
             (Decision.MALICIOUS, lower.find("malicious"))) if idx >= 0]
    if not hits:
        return Verdict(decision=Decision.UNPARSEABLE, explanation="",
                       raw_response=response)
    idx, decision = min(hits, key=lambda h: h[0])
    keyword_len = len(decision.value)
    return Verdict(decision=decision,
                   explanation=response[idx + keyword_len:].strip(),
                   raw_response=response)


# --- remote client --------------------------------------------------------------------

def _auth_headers() -> dict[str, str]:
    key = os.environ.get(API_KEY_ENV)
    return {"Authorization": f"Bearer {key}"} if key else {}


def classify_remote(config: LlmClientConfig, prompt: str,
                    sleep: Callable[[float], None] = time.sleep) -> str:
    """One chat-completion request with exponential-backoff retries.

    Timeouts, connection failures and 429/5xx statuses are retried up to
    ``max_retries`` times; other statuses raise HttpError immediately.
    With no retry budget a timeout surfaces as Timeout; an exhausted
    budget surfaces as RetriesExhausted carrying the last failure.
    """
    url = config.endpoint.rstrip("/") + "/chat/completions"
    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
    }
    last_error: Exception | None = None
    for attempt in range(config.max_retries + 1):
        if attempt > 0:
            sleep(config.backoff_base_s * (2 ** (attempt - 1)))
        try:
            resp = httpx.post(url, json=body, headers=_auth_headers(),
                              timeout=config.timeout_s)
        except httpx.TimeoutException as e:
            if config.max_retries == 0:
                raise Timeout(f"request to {url} timed out after "
                              f"{config.timeout_s}s") from e
            last_error = e
            continue
        except httpx.TransportError as e:
            last_error = e
            continue
        if resp.status_code == 200:
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as e:
                raise HttpError(200, "malformed chat-completion body") from e
        if resp.status_code == 429 or resp.status_code >= 500:
            last_error = HttpError(resp.status_code)
            continue
        raise HttpError(resp.status_code, resp.text[:200])
    raise RetriesExhausted(
        f"{config.max_retries + 1} attempts against {url} failed; "
        f"last error: {last_error}") from last_error


def classify_many(config: LlmClientConfig, prompts: Sequence[str]) -> list[str]:
    """Issue remote calls concurrently, bounded by ``max_in_flight``."""
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return list(pool.map(lambda p: classify_remote(config, p), prompts))

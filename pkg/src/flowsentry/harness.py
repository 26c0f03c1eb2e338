"""Experiment harness: splits, metrics, end-to-end pipelines and reports.

The harness reproduces two protocols at desk scale: a same-vector
experiment (train and test share attack vectors) and a zero-shot
experiment (disjoint vector sets, e.g. train on DNS/NTP/SYN and test on
the other eight), each with an exact malicious:benign mixing ratio.
Benign counts are truncated to an exact multiple of the malicious count
so a declared 1:10 ratio holds as an equality.

Everything is seeded; `report.json` and prediction CSVs are bit-stable
across repeated runs on one platform (wall-clock timings go to a
separate run_meta sidecar, never into the deterministic report payload).
"""

from __future__ import annotations

import dataclasses
import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .checkpoint import BaselineModel
from .errors import (
    ConfigurationError,
    FlowSentryError,
    InsufficientFlows,
    LengthMismatch,
    NoLabeledData,
)
from .ingest import FlowDataset, FlowRecord, Label, feature_matrix
from .model import (
    DEFAULT_WINDOW_FLOWS,
    EncoderConfig,
    TrainConfig,
    TrainedModel,
    build_sequences,
    fit_normalizer,
    normalize,
    predict_batch,
    train_on_sequences,
)
from .predictor import (
    PredictorMode,
    PredictorModel,
    calibrate_threshold,
    fit_codebook,
    score_sequences,
    train_predictor,
)
from .promptcls import (
    DEFAULT_TEMPLATE,
    Decision,
    LlmClientConfig,
    PromptTemplate,
    build_prompt,
    classify_remote,
    parse_verdict,
    select_fewshots,
    stub_classify,
)
from .sequencer import LABEL_MALICIOUS, SequencerConfig


@contextmanager
def _stage(name: str):
    """Tag package errors with the pipeline stage they occurred in."""
    try:
        yield
    except FlowSentryError as e:
        e.stage = name
        if name not in str(e):
            e.args = (f"[{name}] {e.args[0]}" if e.args else f"[{name}]",) + e.args[1:]
        raise


# --- experiment configuration -----------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    train_vectors: tuple[str, ...]
    test_vectors: tuple[str, ...]
    train_ratio: float = 1.0   # benign flows per malicious flow
    test_ratio: float = 1.0
    zero_shot: bool = False
    seq_config: SequencerConfig = SequencerConfig()
    enc_config: EncoderConfig = EncoderConfig()
    train_config: TrainConfig = TrainConfig()
    window_flows: int = DEFAULT_WINDOW_FLOWS
    seed: int = 0

    def __post_init__(self):
        if self.zero_shot and set(self.train_vectors) & set(self.test_vectors):
            raise ConfigurationError(
                "zero-shot mode requires disjoint train and test vector sets")
        if self.train_ratio < 0 or self.test_ratio < 0:
            raise ConfigurationError("mix ratios must be >= 0")

    def summary(self) -> dict:
        return {
            "train_vectors": sorted(self.train_vectors),
            "test_vectors": sorted(self.test_vectors),
            "train_ratio": self.train_ratio,
            "test_ratio": self.test_ratio,
            "zero_shot": self.zero_shot,
            "T": self.seq_config.T,
            "window_flows": self.window_flows,
            "seed": self.seed,
        }


# --- metrics -------------------------------------------------------------------------

@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    roc_auc: float
    n: int
    runtime_s: float = 0.0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def payload(self) -> dict:
        """Deterministic part of the report (excludes wall-clock runtime)."""
        return {
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "roc_auc": self.roc_auc,
            "n": self.n,
            "config": self.config,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.payload(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        rows = [
            ("flows", str(self.n)),
            ("tp / fp / tn / fn", f"{self.tp} / {self.fp} / {self.tn} / {self.fn}"),
            ("precision", f"{self.precision:.4f}"),
            ("recall", f"{self.recall:.4f}"),
            ("f1", f"{self.f1:.4f}"),
            ("roc_auc", f"{self.roc_auc:.4f}"),
        ]
        for key in sorted(self.extra):
            rows.append((key, str(self.extra[key])))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def roc_auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic ROC AUC (ties handled); 0.5 when one class is absent."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def compute_metrics(labels: Sequence[int], predictions: Sequence[int],
                    scores: Sequence[float] | None = None,
                    config: dict | None = None) -> MetricsReport:
    """Confusion counts, precision/recall/F1 (0/0 -> 0) and ROC AUC."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if len(labels) != len(predictions) or len(labels) == 0:
        raise LengthMismatch(
            f"labels ({len(labels)}) and predictions ({len(predictions)}) must "
            "have equal nonzero length")
    if scores is None:
        scores = predictions.astype(np.float64)
    else:
        scores = np.asarray(scores, dtype=np.float64)
        if len(scores) != len(labels):
            raise LengthMismatch(
                f"scores ({len(scores)}) must match labels ({len(labels)})")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(tp=tp, fp=fp, tn=tn, fn=fn, precision=precision,
                         recall=recall, f1=f1,
                         roc_auc=roc_auc_score(labels, scores),
                         n=len(labels), config=config or {})


# --- splits ----------------------------------------------------------------------------

def _time_sorted(flows: list[FlowRecord]) -> list[FlowRecord]:
    return sorted(flows, key=lambda f: f.first_ms)


def build_split(pool: FlowDataset, config: ExperimentConfig
                ) -> tuple[FlowDataset, FlowDataset]:
    """Carve disjoint train/test sets with exact class ratios.

    Malicious flows of a vector present in both sets are split half and
    half; benign flows are allocated train-first. The benign count of each
    side is truncated to exactly ratio * malicious; a shortfall raises
    InsufficientFlows naming the deficient class or vector.
    """
    rng = np.random.default_rng(config.seed)
    by_vector: dict[str, list[FlowRecord]] = {}
    benign: list[FlowRecord] = []
    for f in pool.flows:
        if f.label is Label.MALICIOUS:
            by_vector.setdefault(f.vector_tag or "", []).append(f)
        elif f.label is Label.BENIGN:
            benign.append(f)

    train_mal: list[FlowRecord] = []
    test_mal: list[FlowRecord] = []
    for v in sorted(set(config.train_vectors) | set(config.test_vectors)):
        flows = by_vector.get(v, [])
        if not flows:
            raise InsufficientFlows(f"no Malicious flows for vector {v!r}")
        idx = rng.permutation(len(flows))
        flows = [flows[i] for i in idx]
        in_train = v in config.train_vectors
        in_test = v in config.test_vectors
        if in_train and in_test:
            half = len(flows) // 2
            if half == 0:
                raise InsufficientFlows(
                    f"vector {v!r} has too few flows to appear in both splits")
            train_mal += flows[:half]
            test_mal += flows[half:]
        elif in_train:
            train_mal += flows
        else:
            test_mal += flows

    if config.train_vectors and not train_mal:
        raise InsufficientFlows("train split has no Malicious flows")
    if config.test_vectors and not test_mal:
        raise InsufficientFlows("test split has no Malicious flows")

    benign = [benign[i] for i in rng.permutation(len(benign))]
    b_train = int(config.train_ratio * len(train_mal))
    b_test = int(config.test_ratio * len(test_mal))
    if b_train + b_test > len(benign):
        raise InsufficientFlows(
            f"need {b_train + b_test} Benign flows ({b_train} train + {b_test} "
            f"test), pool has {len(benign)}")
    train = _time_sorted(train_mal + benign[:b_train])
    test = _time_sorted(test_mal + benign[b_train:b_train + b_test])
    return (FlowDataset(flows=train, provenance=f"{pool.provenance}/train"),
            FlowDataset(flows=test, provenance=f"{pool.provenance}/test"))


# --- encoder pipeline --------------------------------------------------------------------

@dataclass
class FlowPrediction:
    flow: FlowRecord
    probability: float
    predicted: int

    @property
    def label(self) -> int:
        return 1 if self.flow.label is Label.MALICIOUS else 0


def predict_flows(model: TrainedModel, dataset: FlowDataset,
                  window_flows: int = DEFAULT_WINDOW_FLOWS) -> list[FlowPrediction]:
    """Per-flow probabilities over a dataset (windowed + sequentialized).

    Every flow of the dataset appears exactly once, in window order.
    """
    from .sequencer import sequentialize_with_order
    from .model import dataset_windows

    out: list[FlowPrediction] = []
    for wid, window in enumerate(dataset_windows(dataset, window_flows)):
        seqs, ordered = sequentialize_with_order(window, model.seq_config, wid)
        probs = predict_batch(model, seqs)
        by_flow: dict[int, float] = {}
        for si, s in enumerate(seqs):
            for i in range(s.T):
                if s.valid[i]:
                    by_flow[int(s.flow_index[i])] = float(probs[si, i])
        for j, flow in enumerate(ordered):
            p = by_flow[j]
            out.append(FlowPrediction(flow=flow, probability=p,
                                      predicted=int(p > 0.5)))
    return out


def evaluate_model(model: TrainedModel, test: FlowDataset,
                   window_flows: int = DEFAULT_WINDOW_FLOWS,
                   config_echo: dict | None = None
                   ) -> tuple[MetricsReport, list[FlowPrediction]]:
    preds = predict_flows(model, test, window_flows)
    labeled = [p for p in preds if p.flow.label is not Label.UNLABELED]
    if not labeled:
        raise NoLabeledData("test dataset has no labeled flows")
    report = compute_metrics([p.label for p in labeled],
                             [p.predicted for p in labeled],
                             [p.probability for p in labeled],
                             config=config_echo or {})
    return report, preds


def run_experiment(pool: FlowDataset, config: ExperimentConfig
                   ) -> tuple[MetricsReport, TrainedModel, list[FlowPrediction]]:
    """Split, train the encoder pipeline, evaluate on the held-out split."""
    started = time.perf_counter()
    with _stage("split"):
        train_ds, test_ds = build_split(pool, config)
    with _stage("train"):
        normalizer = fit_normalizer(feature_matrix(train_ds.flows))
        sequences = build_sequences(train_ds, config.seq_config, config.window_flows)
        model = train_on_sequences(sequences, normalizer, config.enc_config,
                                   config.seq_config, config.train_config)
    with _stage("evaluate"):
        report, preds = evaluate_model(model, test_ds, config.window_flows,
                                       config_echo=config.summary())
    report.runtime_s = time.perf_counter() - started
    report.extra["pipeline"] = "encoder"
    report.extra["n_train_flows"] = len(train_ds)
    report.extra["n_test_flows"] = len(test_ds)
    return report, model, preds


# --- feature-only baseline -----------------------------------------------------------------

def train_feature_mlp(train: FlowDataset, train_config: TrainConfig,
                      hidden: int = 64) -> BaselineModel:
    """Per-flow MLP on normalized features; no sequencer, no encoder."""
    labeled = [f for f in train.flows if f.label is not Label.UNLABELED]
    if not labeled:
        raise NoLabeledData("baseline training dataset has no labeled flows")
    normalizer = fit_normalizer(feature_matrix(train.flows))
    x = normalize(normalizer, feature_matrix(labeled))
    y = np.array([1.0 if f.label is Label.MALICIOUS else 0.0 for f in labeled])

    rng = np.random.default_rng(train_config.seed)
    head = nn.init_head(rng, x.shape[1], hidden)
    shuffle_rng = np.random.default_rng(train_config.seed + 1)
    opt = nn.Adam(head, lr=train_config.lr)
    history = []
    order = np.arange(len(x))
    mask_all = np.ones(train_config.batch_size, dtype=bool)
    for _ in range(train_config.epochs):
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            logits, cache = nn.head_forward(head, x[idx])
            loss, dlogits = nn.bce_with_logits(logits, y[idx], mask_all[:len(idx)])
            grads, _ = nn.head_backward(head, cache, dlogits)
            if train_config.lr != 0.0:
                opt.step(head, grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    return BaselineModel(normalizer=normalizer, head=head, history=history)


def baseline_predict(model: BaselineModel, dataset: FlowDataset) -> list[FlowPrediction]:
    x = normalize(model.normalizer, feature_matrix(dataset.flows))
    logits, _ = nn.head_forward(model.head, x)
    probs = nn.sigmoid(logits)
    return [FlowPrediction(flow=f, probability=float(p), predicted=int(p > 0.5))
            for f, p in zip(dataset.flows, probs)]


def baseline_feature_mlp(train: FlowDataset, test: FlowDataset,
                         train_config: TrainConfig, hidden: int = 64
                         ) -> tuple[MetricsReport, BaselineModel, list[FlowPrediction]]:
    """The ablation arm: same metrics surface, features only."""
    started = time.perf_counter()
    with _stage("baseline-train"):
        model = train_feature_mlp(train, train_config, hidden)
    with _stage("baseline-evaluate"):
        preds = baseline_predict(model, test)
        labeled = [p for p in preds if p.flow.label is not Label.UNLABELED]
        report = compute_metrics([p.label for p in labeled],
                                 [p.predicted for p in labeled],
                                 [p.probability for p in labeled])
    report.runtime_s = time.perf_counter() - started
    report.extra["pipeline"] = "feature-mlp-baseline"
    return report, model, preds


# --- predictor pipeline ----------------------------------------------------------------------

@dataclass(frozen=True)
class PredictorExperimentConfig:
    vocab_size: int = 64
    quantile: float = 0.99
    mode: PredictorMode = PredictorMode.NEXT_TOKEN
    train_frac: float = 0.5    # benign windows used for training
    calib_frac: float = 0.25   # … for threshold calibration (rest: hold-out)
    enc_config: EncoderConfig = EncoderConfig(d_model=32, n_heads=4,
                                              n_layers=2, d_ff=64, t_max=32)
    train_config: TrainConfig = TrainConfig(lr=3e-3, epochs=10, batch_size=32)
    seq_config: SequencerConfig = SequencerConfig()
    window_flows: int = DEFAULT_WINDOW_FLOWS
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_frac < 1 or not 0 < self.calib_frac < 1 \
                or self.train_frac + self.calib_frac >= 1:
            raise ConfigurationError(
                "train_frac and calib_frac must leave room for a hold-out share")


@dataclass
class SequenceScore:
    window_id: int
    score: float
    flagged: bool
    label: int  # 1 if the sequence contains any Malicious valid position


def _sequence_label(seq) -> int:
    return int(np.any((seq.labels == LABEL_MALICIOUS) & seq.valid))


def run_predictor_experiment(benign_pool: FlowDataset, test_pool: FlowDataset,
                             config: PredictorExperimentConfig
                             ) -> tuple[MetricsReport, PredictorModel, list[SequenceScore]]:
    """Benign-trained anomaly detection, calibrated on held-out benign windows.

    ``benign_pool`` must be benign-only; its windows are split into
    train / calibration / hold-out shares. ``test_pool`` may mix classes;
    its sequences are scored against the calibrated threshold. Metrics
    treat a sequence as positive when it contains any Malicious flow;
    negatives are the benign hold-out sequences plus any all-benign test
    sequences.
    """
    started = time.perf_counter()
    with _stage("predictor-data"):
        normalizer = fit_normalizer(feature_matrix(benign_pool.flows))
        benign_seqs = build_sequences(benign_pool, config.seq_config,
                                      config.window_flows)
        rng = np.random.default_rng(config.seed)
        order = rng.permutation(len(benign_seqs))
        n_train = int(config.train_frac * len(benign_seqs))
        n_calib = int(config.calib_frac * len(benign_seqs))
        train_seqs = [benign_seqs[i] for i in order[:n_train]]
        calib_seqs = [benign_seqs[i] for i in order[n_train:n_train + n_calib]]
        holdout_seqs = [benign_seqs[i] for i in order[n_train + n_calib:]]
        feats = normalize(normalizer,
                          np.vstack([s.features[s.valid] for s in train_seqs]))
    with _stage("predictor-train"):
        codebook = fit_codebook(feats, config.vocab_size, seed=config.seed)
        model = train_predictor(train_seqs, codebook, normalizer, config.mode,
                                config.train_config, config.enc_config)
    with _stage("predictor-calibrate"):
        model.threshold = calibrate_threshold(model, calib_seqs, config.quantile)
    with _stage("predictor-evaluate"):
        test_seqs = build_sequences(test_pool, config.seq_config,
                                    config.window_flows)
        eval_seqs = holdout_seqs + test_seqs
        scores = score_sequences(model, eval_seqs)
        th = model.threshold.score_threshold
        rows = [SequenceScore(window_id=s.window_id, score=float(sc),
                              flagged=bool(sc > th), label=_sequence_label(s))
                for s, sc in zip(eval_seqs, scores)]
        labels = [r.label for r in rows]
        flagged = [int(r.flagged) for r in rows]
        report = compute_metrics(labels, flagged, [r.score for r in rows])
        holdout_scores = scores[:len(holdout_seqs)]
        report.extra["pipeline"] = "predictor"
        report.extra["threshold"] = th
        report.extra["quantile"] = config.quantile
        report.extra["n_holdout_benign_sequences"] = len(holdout_seqs)
        report.extra["benign_flag_rate"] = float(
            (holdout_scores > th).mean()) if len(holdout_seqs) else 0.0
    report.runtime_s = time.perf_counter() - started
    return report, model, rows


# --- prompt pipeline ----------------------------------------------------------------------------

@dataclass
class PromptResult:
    flow: FlowRecord
    prompt: str
    verdict_decision: str
    explanation: str

    @property
    def label(self) -> int:
        return 1 if self.flow.label is Label.MALICIOUS else 0


def run_prompt_experiment(pool: FlowDataset, k: int = 4, seed: int = 0,
                          client: str = "stub",
                          llm_config: LlmClientConfig | None = None,
                          template: PromptTemplate = DEFAULT_TEMPLATE,
                          max_flows: int | None = None
                          ) -> tuple[MetricsReport, list[PromptResult]]:
    """Classify flows one prompt each, with stratified few-shot examples.

    Few-shot examples come from a seeded slice of the pool; evaluated
    flows never overlap that slice. Unparseable verdicts are excluded
    from the confusion counts and reported separately.
    """
    if client not in ("stub", "remote"):
        raise ConfigurationError(f"unknown prompt client {client!r}")
    if client == "remote" and llm_config is None:
        raise ConfigurationError("remote client requires an LlmClientConfig")
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool.flows))
    n_fewshot_pool = min(len(pool.flows) // 2, max(4 * k, 16))
    fewshot_ds = FlowDataset(flows=[pool.flows[i] for i in order[:n_fewshot_pool]])
    eval_flows = [pool.flows[i] for i in order[n_fewshot_pool:]]
    if max_flows is not None:
        eval_flows = eval_flows[:max_flows]
    with _stage("fewshots"):
        fewshots = select_fewshots(fewshot_ds, k, seed)
    results: list[PromptResult] = []
    with _stage("classify"):
        for flow in eval_flows:
            prompt = build_prompt(template, fewshots, [flow])
            if client == "stub":
                response = stub_classify(prompt)
            else:
                response = classify_remote(llm_config, prompt)
            v = parse_verdict(response)
            results.append(PromptResult(flow=flow, prompt=prompt,
                                        verdict_decision=v.decision.value,
                                        explanation=v.explanation))
    parsed = [r for r in results
              if r.verdict_decision != Decision.UNPARSEABLE.value
              and r.flow.label is not Label.UNLABELED]
    if not parsed:
        raise NoLabeledData("no parseable verdicts over labeled flows")
    preds = [1 if r.verdict_decision == Decision.MALICIOUS.value else 0
             for r in parsed]
    report = compute_metrics([r.label for r in parsed], preds,
                             [float(p) for p in preds])
    report.runtime_s = time.perf_counter() - started
    report.extra["pipeline"] = f"prompt-{client}"
    report.extra["k_fewshots"] = k
    report.extra["n_unparseable"] = sum(
        r.verdict_decision == Decision.UNPARSEABLE.value for r in results)
    return report, results


# --- prediction CSV -------------------------------------------------------------------------------

PREDICTION_COLUMNS = ("src_ip", "dst_ip", "src_port", "dst_port", "protocol",
                      "first_ms", "label", "vector_tag", "probability",
                      "predicted")


def predictions_to_csv(preds: Sequence[FlowPrediction]) -> str:
    import csv as _csv

    buf = io.StringIO()
    w = _csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for p in preds:
        f = p.flow
        w.writerow([f.src_ip, f.dst_ip, f.src_port, f.dst_port, f.protocol,
                    f.first_ms, f.label.value, f.vector_tag or "",
                    format(p.probability, ".10g"), p.predicted])
    return buf.getvalue()

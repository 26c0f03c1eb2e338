"""Predictor-role anomaly detection: token likelihood against benign traffic.

Flows are quantized into a discrete vocabulary by a k-means codebook over
normalized features. A causal (next-token) or bidirectional (masked-token)
encoder is trained on benign sequences only; at detection time each
position's negative log-likelihood under the model is the anomaly score
and a sequence is flagged when its score exceeds a threshold calibrated
as an empirical quantile of benign validation scores (strict inequality
at the boundary).
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import (
    ConfigurationError,
    EmptyValidation,
    InsufficientDistinctPoints,
    MaliciousInTrainingSet,
)
from .model import EncoderConfig, MaskMode, Normalizer, TrainConfig, normalize
from .sequencer import LABEL_MALICIOUS, FlowSequence

DEFAULT_VOCAB = 64
KMEANS_MAX_ITERS = 25
MASK_FRACTION = 0.15


# --- codebook -------------------------------------------------------------------

@dataclass
class DiscreteCodebook:
    """V centroid vectors mapping normalized feature vectors to token ids."""

    centroids: np.ndarray  # (V, F)

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]


def _nearest(centroids: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (L2) per row; ties take the lowest index."""
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def fit_codebook(features: np.ndarray, vocab_size: int = DEFAULT_VOCAB,
                 seed: int = 0) -> DiscreteCodebook:
    """k-means with k-means++ seeding over normalized feature vectors.

    Deterministic given the seed; at most 25 Lloyd iterations; a cluster
    that empties is re-seeded to the point farthest from its assigned
    centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < vocab_size:
        raise InsufficientDistinctPoints(
            f"need >= {vocab_size} distinct points, got {distinct.shape[0]}")
    rng = np.random.default_rng(seed)
    n = x.shape[0]

    centroids = np.empty((vocab_size, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, vocab_size):
        probs = d2 / d2.sum()
        centroids[k] = x[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((x - centroids[k]) ** 2).sum(axis=1))

    assign = _nearest(centroids, x)
    for _ in range(KMEANS_MAX_ITERS):
        for k in range(vocab_size):
            members = x[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
            else:
                dist = ((x - centroids[assign]) ** 2).sum(axis=1)
                centroids[k] = x[int(dist.argmax())]
        new_assign = _nearest(centroids, x)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return DiscreteCodebook(centroids=centroids)


def quantize(codebook: DiscreteCodebook, v: np.ndarray) -> int:
    """Token id of one normalized feature vector."""
    return int(_nearest(codebook.centroids, np.asarray(v, dtype=np.float64)[None])[0])


def quantize_batch(codebook: DiscreteCodebook, mat: np.ndarray) -> np.ndarray:
    return _nearest(codebook.centroids, np.asarray(mat, dtype=np.float64))


# --- model ----------------------------------------------------------------------

class PredictorMode(enum.Enum):
    NEXT_TOKEN = "next_token"
    MASKED = "masked"


@dataclass
class AnomalyThreshold:
    score_threshold: float
    calibration_quantile: float


@dataclass
class PredictorParams:
    encoder: nn.EncoderParams
    token_head: nn.TokenHeadParams


@dataclass
class PredictorModel:
    codebook: DiscreteCodebook
    normalizer: Normalizer
    config: EncoderConfig
    mode: PredictorMode
    params: PredictorParams
    history: list[float] = dataclasses.field(default_factory=list)
    threshold: AnomalyThreshold | None = None
    score_reduction: str = "mean"  # or "max"


class SequenceVerdict(enum.Enum):
    NORMAL = "Normal"
    ANOMALOUS = "Anomalous"


def _sequence_tokens(model_norm: Normalizer, codebook: DiscreteCodebook,
                     seqs: Sequence[FlowSequence]):
    tokens = np.stack([
        quantize_batch(codebook, normalize(model_norm, s.features)) for s in seqs])
    valid = np.stack([s.valid for s in seqs])
    return tokens, valid


def _check_benign_only(sequences: Sequence[FlowSequence], what: str) -> None:
    for s in sequences:
        if np.any((s.labels == LABEL_MALICIOUS) & s.valid):
            raise MaliciousInTrainingSet(
                f"{what} must be benign-only but contains a Malicious flow")


def _forward_tokens(model_cfg: EncoderConfig, params: PredictorParams,
                    tokens: np.ndarray, valid: np.ndarray,
                    mask_positions: np.ndarray | None = None):
    e = nn.embed_forward(params.token_head, tokens, mask_positions)
    h, enc_cache = nn.encoder_forward(
        params.encoder, e, valid, model_cfg.n_heads,
        causal=model_cfg.mask_mode is MaskMode.CAUSAL)
    logits, _ = nn.token_logits_forward(params.token_head, h)
    return logits, h, enc_cache


def train_predictor(sequences: Sequence[FlowSequence], codebook: DiscreteCodebook,
                    normalizer: Normalizer, mode: PredictorMode,
                    train_config: TrainConfig,
                    enc_config: EncoderConfig = EncoderConfig()) -> PredictorModel:
    """Train a token-prediction model on benign sequences only.

    NEXT_TOKEN uses a causal encoder minimizing cross-entropy of token t+1
    given tokens up to t; MASKED uses a bidirectional encoder with 15% of
    valid positions masked per batch (seeded) and predicted. A Malicious
    flow anywhere in the training sequences is a hard error.
    """
    _check_benign_only(sequences, "predictor training set")
    causal = mode is PredictorMode.NEXT_TOKEN
    cfg = dataclasses.replace(
        enc_config,
        mask_mode=MaskMode.CAUSAL if causal else MaskMode.BIDIRECTIONAL)
    vocab = codebook.vocab_size

    init_rng = np.random.default_rng(train_config.seed)
    params = PredictorParams(
        encoder=nn.init_encoder(init_rng, cfg.d_model, cfg.d_ff, cfg.n_layers,
                                cfg.t_max),
        token_head=nn.init_token_head(init_rng, vocab, cfg.d_model))
    shuffle_rng = np.random.default_rng(train_config.seed + 1)
    mask_rng = np.random.default_rng(train_config.seed + 2)
    opt = nn.Adam(params, lr=train_config.lr)

    history = []
    order = np.arange(len(sequences))
    for _ in range(train_config.epochs):
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [sequences[i] for i in order[start:start + train_config.batch_size]]
            tokens, valid = _sequence_tokens(normalizer, codebook, batch)
            loss, grads = _predictor_loss_and_grads(cfg, params, tokens, valid,
                                                    causal, mask_rng)
            if train_config.lr != 0.0:
                opt.step(params, grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    return PredictorModel(codebook=codebook, normalizer=normalizer, config=cfg,
                          mode=mode, params=params, history=history)


def _predictor_loss_and_grads(cfg: EncoderConfig, params: PredictorParams,
                              tokens: np.ndarray, valid: np.ndarray,
                              causal: bool, mask_rng: np.random.Generator):
    if causal:
        mask_positions = None
        logits, h, enc_cache = _forward_tokens(cfg, params, tokens, valid)
        # logits at t predict the token at t+1
        pred_logits = logits[:, :-1]
        targets = tokens[:, 1:]
        loss_mask = valid[:, 1:] & valid[:, :-1]
        loss, dpred = nn.softmax_xent_with_logits(pred_logits, targets, loss_mask)
        dlogits = np.zeros_like(logits)
        dlogits[:, :-1] = dpred
    else:
        mask_positions = (mask_rng.random(valid.shape) < MASK_FRACTION) & valid
        if not mask_positions.any():
            b, t = np.argwhere(valid)[0]
            mask_positions[b, t] = True
        logits, h, enc_cache = _forward_tokens(cfg, params, tokens, valid,
                                               mask_positions)
        loss, dlogits = nn.softmax_xent_with_logits(logits, tokens, mask_positions)

    dout_proj, dh = nn.token_logits_backward(params.token_head, h, dlogits)
    enc_grads, de = nn.encoder_backward(params.encoder, enc_cache, dh, cfg.n_heads)
    dembed, dmask = nn.embed_backward(params.token_head, tokens, de, mask_positions)
    grads = PredictorParams(
        encoder=enc_grads,
        token_head=nn.TokenHeadParams(embed=dembed, mask_embed=dmask,
                                      out_proj=dout_proj))
    return loss, grads


# --- scoring ----------------------------------------------------------------------

def _reduce(per_position: np.ndarray, reduction: str) -> float:
    if per_position.size == 0:
        return 0.0
    if reduction == "max":
        return float(per_position.max())
    return float(per_position.mean())


def nll_scores(model: PredictorModel, seq: FlowSequence) -> tuple[np.ndarray, float]:
    """Per-valid-position negative log-likelihoods and the sequence score.

    NEXT_TOKEN scores positions 2..T (each token given its predecessors);
    MASKED scores every valid position by masking it alone. A sequence
    with no scorable position gets score 0.
    """
    tokens, valid = _sequence_tokens(model.normalizer, model.codebook, [seq])
    if model.mode is PredictorMode.NEXT_TOKEN:
        logits, _, _ = _forward_tokens(model.config, model.params, tokens, valid)
        logp = nn.log_softmax(logits[0])
        scored = valid[0][1:] & valid[0][:-1]
        idx = np.where(scored)[0]
        per = -logp[idx, tokens[0][idx + 1]]
    else:
        idx = np.where(valid[0])[0]
        n = len(idx)
        rep_tokens = np.repeat(tokens, n, axis=0)
        rep_valid = np.repeat(valid, n, axis=0)
        mask_positions = np.zeros_like(rep_valid)
        mask_positions[np.arange(n), idx] = True
        logits, _, _ = _forward_tokens(model.config, model.params, rep_tokens,
                                       rep_valid, mask_positions)
        logp = nn.log_softmax(logits[np.arange(n), idx])
        per = -logp[np.arange(n), tokens[0][idx]]
    return per, _reduce(per, model.score_reduction)


def score_sequences(model: PredictorModel, sequences: Sequence[FlowSequence],
                    batch_size: int = 64) -> np.ndarray:
    """Sequence scores for many sequences; batched for the causal mode."""
    if model.mode is PredictorMode.MASKED:
        return np.array([nll_scores(model, s)[1] for s in sequences])
    out = np.empty(len(sequences))
    for start in range(0, len(sequences), batch_size):
        chunk = list(sequences[start:start + batch_size])
        tokens, valid = _sequence_tokens(model.normalizer, model.codebook, chunk)
        logits, _, _ = _forward_tokens(model.config, model.params, tokens, valid)
        logp = nn.log_softmax(logits)
        scored = valid[:, 1:] & valid[:, :-1]
        picked = np.take_along_axis(logp[:, :-1], tokens[:, 1:, None], axis=-1)[..., 0]
        for i in range(len(chunk)):
            per = -picked[i][scored[i]]
            out[start + i] = _reduce(per, model.score_reduction)
    return out


def calibrate_threshold(model: PredictorModel,
                        benign_sequences: Sequence[FlowSequence],
                        quantile: float = 0.99) -> AnomalyThreshold:
    """Nearest-rank empirical quantile of benign sequence scores."""
    if not 0.0 < quantile <= 1.0:
        raise ConfigurationError(f"quantile must be in (0, 1], got {quantile}")
    if len(benign_sequences) == 0:
        raise EmptyValidation("calibration requires at least one benign sequence")
    _check_benign_only(benign_sequences, "calibration set")
    scores = np.sort(score_sequences(model, benign_sequences))
    rank = max(1, int(np.ceil(quantile * len(scores))))
    return AnomalyThreshold(score_threshold=float(scores[rank - 1]),
                            calibration_quantile=quantile)


def detect_anomaly(model: PredictorModel, threshold: AnomalyThreshold,
                   seq: FlowSequence) -> tuple[SequenceVerdict, float]:
    """Anomalous iff the sequence score strictly exceeds the threshold."""
    _, score = nll_scores(model, seq)
    verdict = SequenceVerdict.ANOMALOUS if score > threshold.score_threshold \
        else SequenceVerdict.NORMAL
    return verdict, score

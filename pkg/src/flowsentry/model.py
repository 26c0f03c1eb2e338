"""Encoder-role model: flow tokenizer, transformer encoder, MLP head, training.

The pipeline per sequence is

    normalize -> affine tokenizer -> encoder (bidirectional or causal
    self-attention over T positions) -> per-position scalar logit ->
    logistic probability of Malicious

trained end-to-end with Adam on mean binary cross-entropy over valid,
labeled positions. All arithmetic is float64 and every random draw comes
from PCG64 generators seeded from the TrainConfig, so training runs are
bit-reproducible on one platform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import (
    AllPositionsMasked,
    ConfigurationError,
    DimensionMismatch,
    EmptyFit,
    NoLabeledData,
)
from .ingest import FEATURE_COUNT, FlowDataset
from .sequencer import (
    LABEL_MALICIOUS,
    FlowSequence,
    SequencerConfig,
    sequentialize,
)

DEFAULT_WINDOW_FLOWS = 256


class MaskMode(enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    t_max: int = 32
    mask_mode: MaskMode = MaskMode.BIDIRECTIONAL
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must be in [0, 1)")
        if min(self.d_model, self.n_heads, self.n_layers, self.d_ff, self.t_max) < 1:
            raise ConfigurationError("encoder dimensions must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0


# --- normalizer -----------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-feature z-score statistics (population std, floored at eps)."""

    mean: np.ndarray  # (F,)
    std: np.ndarray   # (F,)

    EPS = 1e-8


def fit_normalizer(features: np.ndarray | Sequence[np.ndarray]) -> Normalizer:
    mat = np.asarray(features, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.size == 0 or mat.shape[0] == 0:
        raise EmptyFit("cannot fit a normalizer on zero feature vectors")
    return Normalizer(mean=mat.mean(axis=0),
                      std=np.maximum(mat.std(axis=0), Normalizer.EPS))


def normalize(norm: Normalizer, v: np.ndarray) -> np.ndarray:
    return (np.asarray(v, dtype=np.float64) - norm.mean) / norm.std


def denormalize(norm: Normalizer, v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) * norm.std + norm.mean


# --- model bundle -----------------------------------------------------------------

@dataclass
class ModelParams:
    """All learnable parameters of the encoder pipeline."""

    tokenizer: nn.TokenizerParams
    encoder: nn.EncoderParams
    head: nn.HeadParams


@dataclass
class TrainedModel:
    config: EncoderConfig
    seq_config: SequencerConfig
    normalizer: Normalizer
    params: ModelParams
    history: list[float] = field(default_factory=list)  # per-epoch mean loss


def init_model_params(config: EncoderConfig, rng: np.random.Generator,
                      n_features: int = FEATURE_COUNT) -> ModelParams:
    return ModelParams(
        tokenizer=nn.init_tokenizer(rng, n_features, config.d_model),
        encoder=nn.init_encoder(rng, config.d_model, config.d_ff,
                                config.n_layers, config.t_max),
        head=nn.init_head(rng, config.d_model, config.d_model))


# --- forward pieces ----------------------------------------------------------------

def tokenize_sequence(norm: Normalizer, tok: nn.TokenizerParams,
                      seq: FlowSequence) -> np.ndarray:
    """(T, F) features -> (T, d_model) token embeddings."""
    if seq.features.shape[1] != tok.projection.shape[0]:
        raise DimensionMismatch(
            f"feature length {seq.features.shape[1]} does not match projection "
            f"input {tok.projection.shape[0]}")
    return normalize(norm, seq.features) @ tok.projection + tok.bias


def encode(config: EncoderConfig, params: nn.EncoderParams, tokens: np.ndarray,
           valid: np.ndarray) -> np.ndarray:
    """Run the encoder on (T, d) or (B, T, d) tokens; returns same shape."""
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
        valid = valid[None]
    h, _ = nn.encoder_forward(params, tokens, valid, config.n_heads,
                              causal=config.mask_mode is MaskMode.CAUSAL)
    return h[0] if single else h


def head_logits(head: nn.HeadParams, h: np.ndarray) -> np.ndarray:
    """Per-position scalar logits; probability = logistic(logit)."""
    logits, _ = nn.head_forward(head, h)
    return logits


def _stack_batch(norm: Normalizer, params: ModelParams,
                 batch: Sequence[FlowSequence]):
    tokens = np.stack([tokenize_sequence(norm, params.tokenizer, s) for s in batch])
    valid = np.stack([s.valid for s in batch])
    labels = np.stack([s.labels for s in batch])
    return tokens, valid, labels


def _forward_batch(config: EncoderConfig, params: ModelParams, tokens, valid,
                   dropout_rng=None):
    h, enc_cache = nn.encoder_forward(
        params.encoder, tokens, valid, config.n_heads,
        causal=config.mask_mode is MaskMode.CAUSAL,
        dropout_rate=config.dropout_rate, dropout_rng=dropout_rng)
    logits, head_cache = nn.head_forward(params.head, h)
    return logits, (enc_cache, head_cache)


def loss_and_grads(config: EncoderConfig, norm: Normalizer, params: ModelParams,
                   batch: Sequence[FlowSequence],
                   dropout_rng: np.random.Generator | None = None):
    """Mean BCE over valid labeled positions and exact parameter gradients."""
    if not batch:
        raise AllPositionsMasked("empty batch")
    tokens, valid, labels = _stack_batch(norm, params, batch)
    loss_mask = valid & (labels >= 0)
    if not loss_mask.any():
        raise AllPositionsMasked("no valid labeled position in batch")
    targets = (labels == LABEL_MALICIOUS).astype(np.float64)

    normed = np.stack([normalize(norm, s.features) for s in batch])
    logits, (enc_cache, head_cache) = _forward_batch(
        config, params, tokens, valid, dropout_rng)
    loss, dlogits = nn.bce_with_logits(logits, targets, loss_mask)

    head_grads, dh = nn.head_backward(params.head, head_cache, dlogits)
    enc_grads, dtokens = nn.encoder_backward(params.encoder, enc_cache, dh,
                                             config.n_heads)
    B, T, d = dtokens.shape
    F = normed.shape[-1]
    dproj = normed.reshape(B * T, F).T @ dtokens.reshape(B * T, d)
    dbias = dtokens.reshape(B * T, d).sum(axis=0)
    grads = ModelParams(
        tokenizer=nn.TokenizerParams(projection=dproj, bias=dbias),
        encoder=enc_grads,
        head=head_grads)
    return loss, grads


# --- training ------------------------------------------------------------------------

def dataset_windows(dataset: FlowDataset, window_flows: int) -> list[list]:
    """Chunk a dataset (kept in its own order) into flow windows."""
    flows = dataset.flows
    return [flows[i:i + window_flows] for i in range(0, len(flows), window_flows)]


def build_sequences(dataset: FlowDataset, seq_config: SequencerConfig,
                    window_flows: int = DEFAULT_WINDOW_FLOWS) -> list[FlowSequence]:
    seqs: list[FlowSequence] = []
    for wid, window in enumerate(dataset_windows(dataset, window_flows)):
        seqs.extend(sequentialize(window, seq_config, window_id=wid))
    return seqs


def train_on_sequences(sequences: Sequence[FlowSequence], normalizer: Normalizer,
                       enc_config: EncoderConfig, seq_config: SequencerConfig,
                       train_config: TrainConfig) -> TrainedModel:
    """Adam training loop over pre-built sequences (shuffled each epoch)."""
    if not sequences:
        raise NoLabeledData("no sequences to train on")
    init_rng = np.random.default_rng(train_config.seed)
    params = init_model_params(enc_config, init_rng)
    shuffle_rng = np.random.default_rng(train_config.seed + 1)
    dropout_rng = np.random.default_rng(train_config.seed + 2) \
        if enc_config.dropout_rate > 0 else None
    opt = nn.Adam(params, lr=train_config.lr)
    history = []
    order = np.arange(len(sequences))
    for _ in range(train_config.epochs):
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [sequences[i] for i in order[start:start + train_config.batch_size]]
            loss, grads = loss_and_grads(enc_config, normalizer, params, batch,
                                         dropout_rng)
            if train_config.lr != 0.0:
                opt.step(params, grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    return TrainedModel(config=enc_config, seq_config=seq_config,
                        normalizer=normalizer, params=params, history=history)


def train(dataset: FlowDataset, seq_config: SequencerConfig,
          enc_config: EncoderConfig, train_config: TrainConfig,
          window_flows: int = DEFAULT_WINDOW_FLOWS) -> TrainedModel:
    """Supervised training over a labeled dataset.

    The dataset is chunked in its given (time) order into windows of
    ``window_flows`` flows, each window sequentialized, and the model is
    fit on all resulting sequences. Unlabeled flows stay in the context
    but carry no loss.
    """
    from .ingest import Label, feature_matrix

    labeled = [f for f in dataset.flows if f.label is not Label.UNLABELED]
    if not labeled:
        raise NoLabeledData("training dataset has no labeled flows")
    normalizer = fit_normalizer(feature_matrix(dataset.flows))
    sequences = build_sequences(dataset, seq_config, window_flows)
    return train_on_sequences(sequences, normalizer, enc_config, seq_config,
                              train_config)


# --- inference -------------------------------------------------------------------------

@dataclass(frozen=True)
class PositionPrediction:
    position: int
    flow_index: int       # into the sequence's sorted window
    probability: float
    label: int            # 1 = Malicious at threshold 0.5


def predict_batch(model: TrainedModel, sequences: Sequence[FlowSequence],
                  batch_size: int = 64) -> np.ndarray:
    """(n_sequences, T) Malicious probabilities; padded positions are NaN."""
    out = np.full((len(sequences), sequences[0].T), np.nan)
    for start in range(0, len(sequences), batch_size):
        chunk = list(sequences[start:start + batch_size])
        tokens, valid, _ = _stack_batch(model.normalizer, model.params, chunk)
        logits, _ = _forward_batch(model.config, model.params, tokens, valid)
        probs = nn.sigmoid(logits)
        probs[~valid] = np.nan
        out[start:start + len(chunk)] = probs
    return out


def predict(model: TrainedModel, seq: FlowSequence) -> list[PositionPrediction]:
    """Per-valid-position probabilities and 0.5-threshold labels."""
    probs = predict_batch(model, [seq])[0]
    return [
        PositionPrediction(position=i, flow_index=int(seq.flow_index[i]),
                           probability=float(probs[i]),
                           label=int(probs[i] > 0.5))
        for i in range(seq.T) if seq.valid[i]
    ]

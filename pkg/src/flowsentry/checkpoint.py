"""Checkpoint container: one-line JSON header + little-endian float64 blob.

The header (format version "1") declares the model kind, its configs, the
normalizer, any codebook/threshold extras, and the ordered list of
parameter names with shapes; the blob holds every parameter's float64
values concatenated in exactly that order. The loader rebuilds the
parameter containers and verifies the declared element count against the
blob, so a round trip is bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import nn
from .errors import CorruptBlob, DataError, FormatVersionMismatch
from .model import (
    EncoderConfig,
    MaskMode,
    ModelParams,
    Normalizer,
    TrainedModel,
)
from .predictor import (
    AnomalyThreshold,
    DiscreteCodebook,
    PredictorMode,
    PredictorModel,
    PredictorParams,
)
from .sequencer import SequencerConfig, SortKey

FORMAT_VERSION = "1"
CREATED_BY = "flowsentry 0.1.0"


@dataclasses.dataclass
class BaselineModel:
    """Per-flow MLP over normalized features (no sequence context)."""

    normalizer: Normalizer
    head: nn.HeadParams
    history: list[float] = dataclasses.field(default_factory=list)


def _enc_config_dict(cfg: EncoderConfig) -> dict:
    return {"d_model": cfg.d_model, "n_heads": cfg.n_heads,
            "n_layers": cfg.n_layers, "d_ff": cfg.d_ff, "t_max": cfg.t_max,
            "mask_mode": cfg.mask_mode.value, "dropout_rate": cfg.dropout_rate}


def _enc_config_from(d: dict) -> EncoderConfig:
    return EncoderConfig(d_model=d["d_model"], n_heads=d["n_heads"],
                         n_layers=d["n_layers"], d_ff=d["d_ff"], t_max=d["t_max"],
                         mask_mode=MaskMode(d["mask_mode"]),
                         dropout_rate=d["dropout_rate"])


def _seq_config_dict(cfg: SequencerConfig) -> dict:
    return {"T": cfg.T, "sort_key": cfg.sort_key.value,
            "descending": cfg.descending}


def _seq_config_from(d: dict) -> SequencerConfig:
    return SequencerConfig(T=d["T"], sort_key=SortKey(d["sort_key"]),
                           descending=d["descending"])


def _shape_manifest(params) -> tuple[list, int]:
    entries = [[name, list(arr.shape)] for name, arr in nn.iter_arrays(params)]
    total = sum(int(np.prod(shape)) for _, shape in entries)
    return entries, total


def _empty_encoder(cfg: EncoderConfig) -> nn.EncoderParams:
    zero_rng = np.random.default_rng(0)
    enc = nn.init_encoder(zero_rng, cfg.d_model, cfg.d_ff, cfg.n_layers, cfg.t_max)
    return nn.map_arrays(enc, np.zeros_like)


def save_checkpoint(model, path: str | Path) -> None:
    """Write a TrainedModel, PredictorModel or BaselineModel to disk."""
    if isinstance(model, TrainedModel):
        kind = "encoder"
        params = model.params
        extra = {"seq_config": _seq_config_dict(model.seq_config),
                 "encoder_config": _enc_config_dict(model.config),
                 "history": model.history}
    elif isinstance(model, PredictorModel):
        kind = "predictor"
        params = model.params
        extra = {"encoder_config": _enc_config_dict(model.config),
                 "mode": model.mode.value,
                 "score_reduction": model.score_reduction,
                 "codebook": model.codebook.centroids.tolist(),
                 "threshold": None if model.threshold is None else {
                     "score_threshold": model.threshold.score_threshold,
                     "calibration_quantile": model.threshold.calibration_quantile},
                 "history": model.history}
    elif isinstance(model, BaselineModel):
        kind = "baseline"
        params = model.head
        extra = {"history": model.history}
    else:
        raise TypeError(f"cannot checkpoint {type(model)!r}")

    entries, total = _shape_manifest(params)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "created_by": CREATED_BY,
        "normalizer": {"mean": model.normalizer.mean.tolist(),
                       "std": model.normalizer.std.tolist()},
        "params": entries,
        "total_elements": total,
    }
    header.update(extra)
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes()
                    for _, arr in nn.iter_arrays(params))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def _fill_params(params, entries: list, blob: bytes) -> None:
    offset = 0
    pairs = list(nn.iter_arrays(params))
    if len(pairs) != len(entries):
        raise CorruptBlob(
            f"header declares {len(entries)} parameters, model kind expects {len(pairs)}")
    for (name, arr), (decl_name, decl_shape) in zip(pairs, entries):
        if name != decl_name or list(arr.shape) != decl_shape:
            raise CorruptBlob(
                f"parameter {decl_name}{decl_shape} does not match expected "
                f"{name}{list(arr.shape)}")
        count = arr.size
        chunk = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arr[...] = chunk.reshape(arr.shape)
        offset += count * 8


def load_checkpoint(path: str | Path):
    """Load a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        data = fh.read()
    newline = data.find(b"\n")
    if newline < 0:
        raise DataError("checkpoint has no header line")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"unsupported checkpoint format version {header.get('format_version')!r}")
    blob = data[newline + 1:]
    total = int(header["total_elements"])
    declared = sum(int(np.prod(shape)) for _, shape in header["params"])
    if declared != total:
        raise CorruptBlob(
            f"declared total {total} does not match parameter shapes {declared}")
    if len(blob) != total * 8:
        raise CorruptBlob(
            f"blob holds {len(blob)} bytes, expected {total * 8}")

    normalizer = Normalizer(mean=np.array(header["normalizer"]["mean"]),
                            std=np.array(header["normalizer"]["std"]))
    kind = header["kind"]
    if kind == "encoder":
        cfg = _enc_config_from(header["encoder_config"])
        n_features = header["params"][0][1][0]
        params = ModelParams(
            tokenizer=nn.TokenizerParams(
                projection=np.zeros((n_features, cfg.d_model)),
                bias=np.zeros(cfg.d_model)),
            encoder=_empty_encoder(cfg),
            head=nn.HeadParams(w1=np.zeros((cfg.d_model, cfg.d_model)),
                               b1=np.zeros(cfg.d_model),
                               w2=np.zeros(cfg.d_model), b2=np.zeros(1)))
        _fill_params(params, header["params"], blob)
        return TrainedModel(config=cfg,
                            seq_config=_seq_config_from(header["seq_config"]),
                            normalizer=normalizer, params=params,
                            history=list(header.get("history", [])))
    if kind == "predictor":
        cfg = _enc_config_from(header["encoder_config"])
        codebook = DiscreteCodebook(centroids=np.array(header["codebook"]))
        vocab = codebook.vocab_size
        params = PredictorParams(
            encoder=_empty_encoder(cfg),
            token_head=nn.TokenHeadParams(
                embed=np.zeros((vocab, cfg.d_model)),
                mask_embed=np.zeros(cfg.d_model),
                out_proj=np.zeros((cfg.d_model, vocab))))
        _fill_params(params, header["params"], blob)
        th = header.get("threshold")
        threshold = None if th is None else AnomalyThreshold(
            score_threshold=th["score_threshold"],
            calibration_quantile=th["calibration_quantile"])
        return PredictorModel(codebook=codebook, normalizer=normalizer,
                              config=cfg, mode=PredictorMode(header["mode"]),
                              params=params, threshold=threshold,
                              score_reduction=header.get("score_reduction", "mean"),
                              history=list(header.get("history", [])))
    if kind == "baseline":
        shapes = {name: shape for name, shape in header["params"]}
        w1_shape = shapes["w1"]
        head = nn.HeadParams(w1=np.zeros(w1_shape), b1=np.zeros(w1_shape[1]),
                             w2=np.zeros(w1_shape[1]), b2=np.zeros(1))
        _fill_params(head, header["params"], blob)
        return BaselineModel(normalizer=normalizer, head=head,
                             history=list(header.get("history", [])))
    raise DataError(f"unknown checkpoint kind {kind!r}")

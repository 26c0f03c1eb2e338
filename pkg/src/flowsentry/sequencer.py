"""Flow sequentializer: sort, equal-frequency bin, vertically assemble.

An unordered window of flows becomes fixed-length sequences whose
positions have consistent characteristics: flows are stably sorted by a
volume key, partitioned into T contiguous bins of near-equal count, and
sequence k is built by taking the k-th flow of every bin (position index
= bin index). Underfull bins pad by repeating their last flow with the
validity mask cleared, so no real flow is ever dropped and every flow
occupies exactly one valid position across the produced sequences.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyWindow
from .ingest import FEATURE_COUNT, FlowRecord, Label, feature_matrix

LABEL_BENIGN = 0
LABEL_MALICIOUS = 1
LABEL_NONE = -1

_LABEL_CODE = {Label.BENIGN: LABEL_BENIGN, Label.MALICIOUS: LABEL_MALICIOUS,
               Label.UNLABELED: LABEL_NONE}


class SortKey(enum.Enum):
    BYTES = "bytes"
    PACKETS = "packets"
    PPS = "pps"


@dataclass(frozen=True)
class SequencerConfig:
    T: int = 32
    sort_key: SortKey = SortKey.BYTES
    descending: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class FlowSequence:
    """A length-T window slice: per-position features, labels and validity.

    ``flow_index[i]`` points into the source window's flow list (also for
    repeated-padding positions; -1 for positions made from an empty bin).
    Padded positions have ``valid[i] == False``.
    """

    features: np.ndarray      # (T, F) float64
    labels: np.ndarray        # (T,) int: 0 benign, 1 malicious, -1 unlabeled
    valid: np.ndarray         # (T,) bool
    flow_index: np.ndarray    # (T,) int
    window_id: int = 0

    @property
    def T(self) -> int:
        return len(self.valid)

    def __post_init__(self):
        if not self.valid.any():
            raise ValueError("a FlowSequence needs at least one valid position")


def _key_values(flows: Sequence[FlowRecord], key: SortKey) -> list[float]:
    if key is SortKey.BYTES:
        return [float(f.bytes) for f in flows]
    if key is SortKey.PACKETS:
        return [float(f.packets) for f in flows]
    return [f.packets / f.duration_s for f in flows]


def sort_flows(flows: Sequence[FlowRecord],
               config: SequencerConfig = SequencerConfig()) -> list[FlowRecord]:
    """Stable sort by the configured key; ties keep input order."""
    values = _key_values(flows, config.sort_key)
    # Negate instead of reverse=True so ties keep input order either way.
    sign = -1.0 if config.descending else 1.0
    order = sorted(range(len(flows)), key=lambda i: sign * values[i])
    return [flows[i] for i in order]


def equal_frequency_bins(sorted_flows: Sequence, T: int) -> list[list]:
    """Split a sorted list into T contiguous bins, sizes differing by <= 1.

    With n = q*T + r the first r bins get q+1 elements (remainder to the
    front); for n < T the first n bins hold one element each and the rest
    are empty.
    """
    n = len(sorted_flows)
    q, r = divmod(n, T)
    bins = []
    start = 0
    for i in range(T):
        size = q + 1 if i < r else q
        bins.append(list(sorted_flows[start:start + size]))
        start += size
    return bins


def assemble_vertical(bins: Sequence[Sequence[FlowRecord]],
                      window_id: int = 0) -> list[FlowSequence]:
    """Transpose bins into sequences: sequence k holds the k-th flow of

    each bin at position = bin index. Bins shorter than k+1 contribute
    their last flow with the position masked; empty bins contribute a
    zero feature row.
    """
    T = len(bins)
    depth = max((len(b) for b in bins), default=0)
    if depth == 0:
        return []

    # Feature rows for every distinct flow, computed once per window.
    flat = [f for b in bins for f in b]
    feats = feature_matrix(flat)
    # index of flow j of bin i inside `flat`
    offsets = np.cumsum([0] + [len(b) for b in bins])

    sequences = []
    for k in range(depth):
        f = np.zeros((T, FEATURE_COUNT), dtype=np.float64)
        labels = np.full(T, LABEL_NONE, dtype=np.int64)
        valid = np.zeros(T, dtype=bool)
        idx = np.full(T, -1, dtype=np.int64)
        for i, b in enumerate(bins):
            if not b:
                continue
            j = min(k, len(b) - 1)
            flow = b[j]
            f[i] = feats[offsets[i] + j]
            labels[i] = _LABEL_CODE[flow.label]
            idx[i] = offsets[i] + j
            valid[i] = k < len(b)
        sequences.append(FlowSequence(features=f, labels=labels, valid=valid,
                                      flow_index=idx, window_id=window_id))
    return sequences


def sequentialize(flows: Sequence[FlowRecord],
                  config: SequencerConfig = SequencerConfig(),
                  window_id: int = 0) -> list[FlowSequence]:
    """sort -> equal-frequency bin -> vertical assembly for one window.

    ``flow_index`` entries refer to the *sorted* window order; use
    ``sorted_window`` from :func:`sequentialize_with_order` when the
    original flows need to be recovered.
    """
    seqs, _ = sequentialize_with_order(flows, config, window_id)
    return seqs


def sequentialize_with_order(
    flows: Sequence[FlowRecord],
    config: SequencerConfig = SequencerConfig(),
    window_id: int = 0,
) -> tuple[list[FlowSequence], list[FlowRecord]]:
    """Like :func:`sequentialize` but also returns the sorted window list

    that ``flow_index`` points into.
    """
    if len(flows) == 0:
        raise EmptyWindow("cannot sequentialize an empty flow window")
    ordered = sort_flows(flows, config)
    bins = equal_frequency_bins(ordered, config.T)
    return assemble_vertical(bins, window_id), ordered

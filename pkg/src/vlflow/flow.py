"""Attention flow between transformer layers and the inter-modality flow ratio.

Layers are numbered from 1.  ``flow(i, j)`` is the product of the
residual-corrected attention matrices of layers ``i..j`` with later layers
on the left, so row ``x`` distributes layer ``j``'s output token ``x`` over
layer ``i``'s input tokens.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._backend import kernels
from .records import AttentionRecord, ModalityPartition


@dataclass
class FlowMatrix:
    source_layer: int
    target_layer: int
    matrix: np.ndarray = field(repr=False)


@dataclass
class ImfReport:
    """F values for every layer pair ``i <= j`` plus the two probing profiles."""

    values: dict[tuple[int, int], float]
    num_layers: int

    @property
    def from_input(self) -> list[float]:
        """F(1, j) for j = 1..J."""
        return [self.values[(1, j)] for j in range(1, self.num_layers + 1)]

    @property
    def within_layer(self) -> list[float]:
        """F(i, i) for i = 1..J."""
        return [self.values[(i, i)] for i in range(1, self.num_layers + 1)]

    def get(self, i: int, j: int) -> float:
        if (i, j) not in self.values:
            raise KeyError(f"no IMF value for layers ({i}, {j}); model has {self.num_layers}")
        return self.values[(i, j)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "F"])
            for (i, j), v in sorted(self.values.items()):
                w.writerow([i, j, repr(v)])

    def to_dict(self) -> dict:
        return {"num_layers": self.num_layers,
                "from_input": self.from_input,
                "within_layer": self.within_layer,
                "pairs": [[i, j, v] for (i, j), v in sorted(self.values.items())]}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _as_matrix(w) -> np.ndarray:
    m = w.matrix if isinstance(w, AttentionRecord) else w
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"attention matrix must be square, got shape {m.shape}")
    return m


def residual_attention(w) -> np.ndarray:
    """0.5 * (I + W): mixes in the skip connection around the attention block."""
    m = _as_matrix(w)
    return 0.5 * (np.eye(m.shape[0]) + m)


def attention_flow(layers: Sequence[np.ndarray], i: int, j: int) -> FlowMatrix:
    """Ordered product A^j ... A^i of (already residual-corrected) layer matrices."""
    if not 1 <= i <= j <= len(layers):
        raise ValueError(f"need 1 <= i <= j <= {len(layers)}, got i={i}, j={j}")
    n = layers[0].shape[0]
    if any(a.shape != (n, n) for a in layers):
        raise ValueError("all layer matrices must share the same n x n shape")
    out = np.array(layers[i - 1], dtype=np.float64)
    for a in range(i + 1, j + 1):
        out = layers[a - 1] @ out
    return FlowMatrix(i, j, out)


def imf(flow, partition: ModalityPartition, include_special: bool = False) -> float:
    """Cross-modal share of attention mass: inter / (inter + intra).

    Special tokens are left out of both sums unless ``include_special``, which
    counts them as language.
    """
    m = flow.matrix if isinstance(flow, FlowMatrix) else np.asarray(flow, dtype=np.float64)
    if include_special:
        partition = partition.with_specials_as_language()
    if not partition.vision or not partition.language:
        raise ValueError("both modality index sets must be non-empty")
    n = m.shape[0]
    if max(partition.vision + partition.language) >= n or min(partition.vision + partition.language) < 0:
        raise ValueError(f"partition indices out of range for n={n}")
    inter, intra = kernels.imf_sums(m, partition.vision, partition.language)
    denom = inter + intra
    if denom <= 0.0:
        raise ValueError("zero attention mass over the partition")
    return inter / denom


def imf_profiles(records: Sequence, partition: ModalityPartition,
                 include_special: bool = False) -> ImfReport:
    """F for every layer pair of one example."""
    if not records:
        raise ValueError("need at least one attention record")
    layers = [residual_attention(r) for r in records]
    J = len(layers)
    values = {}
    for i in range(1, J + 1):
        acc = layers[i - 1]
        values[(i, i)] = imf(acc, partition, include_special)
        for j in range(i + 1, J + 1):
            acc = layers[j - 1] @ acc
            values[(i, j)] = imf(acc, partition, include_special)
    return ImfReport(values, J)


def average_reports(reports: Sequence[ImfReport]) -> ImfReport:
    """Arithmetic mean of per-example reports."""
    if not reports:
        raise ValueError("no reports to average")
    J = reports[0].num_layers
    if any(r.num_layers != J for r in reports):
        raise ValueError("reports disagree on layer count")
    keys = reports[0].values.keys()
    return ImfReport({k: float(np.mean([r.values[k] for r in reports])) for k in keys}, J)


def batch_imf_profiles(batch: Sequence[tuple[Sequence, ModalityPartition]],
                       include_special: bool = False) -> ImfReport:
    return average_reports([imf_profiles(recs, part, include_special) for recs, part in batch])

"""Modality-fusion probe: 2-means clustering of joint features scored by NMI."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._backend import kernels
from .records import ModalityPartition


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    iterations_used: int
    objective: float
    degenerate: bool = False
    objectives: np.ndarray | None = None


def _plus_plus_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    first = int(rng.integers(x.shape[0]))
    centers = [x[first]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        if d2.sum() == 0:
            centers.append(x[int(rng.integers(x.shape[0]))])
        else:
            centers.append(x[int(rng.choice(x.shape[0], p=d2 / d2.sum()))])
    return np.array(centers)


def kmeans2(features, rng, max_iter: int = 100, restarts: int = 5) -> ClusterAssignment:
    """Lloyd's 2-means with k-means++ seeding; best of ``restarts`` by objective."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("k-means needs at least two feature rows")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if np.all(x == x[0]):
        return ClusterAssignment(np.zeros(x.shape[0], dtype=np.int64), np.stack([x[0], x[0]]),
                                 0, 0.0, degenerate=True)
    best = None
    for _ in range(restarts):
        labels, cent, iters, objs = kernels.lloyd(x, _plus_plus_seeds(x, 2, rng), max_iter)
        cand = ClusterAssignment(np.asarray(labels), np.asarray(cent), int(iters),
                                 float(objs[-1]), objectives=np.asarray(objs))
        if best is None or cand.objective < best.objective:
            best = cand
    return best


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_info(table: np.ndarray) -> float:
    n = table.sum()
    pab = table / n
    outer = (table.sum(axis=1, keepdims=True) / n) @ (table.sum(axis=0, keepdims=True) / n)
    nz = pab > 0
    return float((pab[nz] * np.log(pab[nz] / outer[nz])).sum())


def nmi(labels_a, labels_b, average: str = "geometric") -> float:
    """I(a; b) / sqrt(H(a) H(b)) in nats; 0 when either labelling is constant.

    ``average="arithmetic"`` normalises by (H(a) + H(b)) / 2 instead.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("labelings must be 1-D and of equal length")
    if a.size == 0:
        raise ValueError("labelings must be non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 0.0
    # averaging both orientations makes nmi(a, b) == nmi(b, a) bit-for-bit
    mi = 0.5 * (_mutual_info(table) + _mutual_info(table.T))
    if average == "geometric":
        value = mi / np.sqrt(ha * hb)
    elif average == "arithmetic":
        value = mi / (0.5 * (ha + hb))
    else:
        raise ValueError(f"unknown NMI normalisation {average!r}")
    return float(min(max(value, 0.0), 1.0))


def nmi_profile(batch: Sequence[tuple[Sequence[np.ndarray], ModalityPartition]], rng,
                max_iter: int = 100, average: str = "geometric") -> tuple[list[float], list[float]]:
    """Per-layer mean and std of NMI between 2-means clusters and modality labels.

    ``batch`` holds one ``(per_layer_features, partition)`` entry per example;
    special tokens are left out of the clustering.
    """
    if not batch:
        raise ValueError("empty batch")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n_layers = len(batch[0][0])
    scores = np.zeros((len(batch), n_layers))
    for e, (layers, part) in enumerate(batch):
        if len(layers) != n_layers:
            raise ValueError("examples disagree on layer count")
        idx, truth = part.labels()
        for l, feats in enumerate(layers):
            assign = kmeans2(np.asarray(feats)[idx], rng, max_iter)
            scores[e, l] = nmi(assign.labels, truth, average)
    return scores.mean(axis=0).tolist(), scores.std(axis=0).tolist()


def write_nmi_csv(path: str | Path, means: Sequence[float], stds: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mean_nmi", "std_nmi"])
        for i, (m, s) in enumerate(zip(means, stds), start=1):
            w.writerow([i, repr(float(m)), repr(float(s))])

"""Shared record types: per-layer attention and the vision/language split."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ModalityPartition:
    """Vision and language index sets inside a joint token sequence."""

    vision: tuple[int, ...]
    language: tuple[int, ...]
    special: tuple[int, ...] = ()

    def __post_init__(self):
        v, l, s = set(self.vision), set(self.language), set(self.special)
        if len(v) != len(self.vision) or len(l) != len(self.language):
            raise ValueError("partition index sets must not repeat indices")
        if v & l or v & s or l & s:
            raise ValueError("partition index sets must be pairwise disjoint")

    @classmethod
    def joint(cls, m: int, t: int) -> "ModalityPartition":
        """Layout [CLS] + m vision tokens + [SEP] + t language tokens."""
        return cls(vision=tuple(range(1, m + 1)),
                   language=tuple(range(m + 2, m + 2 + t)),
                   special=(0, m + 1))

    @property
    def size(self) -> int:
        return len(self.vision) + len(self.language) + len(self.special)

    def with_specials_as_language(self) -> "ModalityPartition":
        return ModalityPartition(self.vision, tuple(sorted(self.language + self.special)), ())

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        """(token indices, modality label) over non-special tokens; vision = 0, language = 1."""
        idx = np.array(self.vision + self.language, dtype=np.intp)
        lab = np.array([0] * len(self.vision) + [1] * len(self.language), dtype=np.int64)
        return idx, lab

    def to_dict(self) -> dict:
        return {"vision": list(self.vision), "language": list(self.language),
                "special": list(self.special)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityPartition":
        return cls(tuple(d["vision"]), tuple(d["language"]), tuple(d.get("special", ())))


@dataclass
class AttentionRecord:
    """Head-averaged post-softmax attention of one layer (1-based ``layer_index``)."""

    layer_index: int
    matrix: np.ndarray = field(repr=False)

    def check(self, atol: float = 1e-9) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"attention record must be square, got {m.shape}")
        if (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=atol):
            raise ValueError(f"layer {self.layer_index}: attention is not row-stochastic")

"""Masking plans for masked feature regression and masked language modelling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

MLM_PROB = 0.15
MLM_MASK_FRAC = 0.8
MLM_RANDOM_FRAC = 0.1


class Action(str, Enum):
    MASK = "mask"
    RANDOM = "random"
    KEEP = "keep"


@dataclass
class MaskPlan:
    """Positions to mask within one modality.

    ``actions`` is only used for language plans; ``replacements`` holds the
    random token id for positions whose action is ``RANDOM``.
    """

    positions: tuple[int, ...]
    actions: tuple[Action, ...] = ()
    anchor: int | None = None
    seed_used: int | None = None
    replacements: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("mask positions must be unique")
        if self.actions and len(self.actions) != len(self.positions):
            raise ValueError("one action per masked position")
        if self.anchor is not None and self.anchor not in self.positions:
            raise ValueError("anchor must be one of the masked positions")

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self, length: int) -> None:
        if any(p < 0 or p >= length for p in self.positions):
            raise ValueError(f"mask position out of range for sequence of length {length}")

    def to_dict(self) -> dict:
        return {"positions": list(self.positions),
                "actions": [a.value for a in self.actions],
                "anchor": self.anchor,
                "seed_used": self.seed_used,
                "replacements": {str(k): v for k, v in sorted(self.replacements.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls(tuple(d["positions"]), tuple(Action(a) for a in d.get("actions", ())),
                   d.get("anchor"), d.get("seed_used"),
                   {int(k): int(v) for k, v in d.get("replacements", {}).items()})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _seed_of(rng) -> int | None:
    return rng if isinstance(rng, (int, np.integer)) else None


def _ranked_plan(scores: np.ndarray, anchor: int, k: int, seed) -> MaskPlan:
    # stable descending sort: ties go to the lower index
    order = np.argsort(-scores, kind="stable")
    chosen = [int(i) for i in order if i != anchor][: k - 1]
    return MaskPlan(tuple([anchor] + chosen), anchor=anchor, seed_used=seed)


def mfr_mask_plan(last_attention, k: int, rng) -> MaskPlan:
    """Random anchor plus the k-1 tokens it attends to most (k masked in total)."""
    att = np.asarray(last_attention, dtype=np.float64)
    m = att.shape[0]
    if att.ndim != 2 or att.shape[1] != m:
        raise ValueError(f"attention must be square, got {att.shape}")
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= m={m}, got k={k}")
    seed = _seed_of(rng)
    anchor = int(_rng(rng).integers(m))
    return _ranked_plan(att[anchor], anchor, k, seed)


def random_mask_plan(m: int, p: float, rng) -> MaskPlan:
    """round(m * p) positions drawn uniformly without replacement."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"masking probability must be in (0, 1), got {p}")
    k = int(np.floor(m * p + 0.5))
    if k == 0:
        raise ValueError(f"m={m}, p={p} rounds to zero masked tokens")
    seed = _seed_of(rng)
    picks = _rng(rng).choice(m, size=k, replace=False)
    return MaskPlan(tuple(int(i) for i in picks), seed_used=seed)


def cosine_mask_plan(features, k: int, rng) -> MaskPlan:
    """Like :func:`mfr_mask_plan` but ranks by cosine similarity to the anchor's features."""
    f = np.asarray(features, dtype=np.float64)
    m = f.shape[0]
    if not 1 <= k <= m:
        raise ValueError(f"need 1 <= k <= m={m}, got k={k}")
    norms = np.linalg.norm(f, axis=1)
    if (norms == 0).any():
        raise ValueError("cosine ranking needs non-zero feature rows")
    unit = f / norms[:, None]
    seed = _seed_of(rng)
    anchor = int(_rng(rng).integers(m))
    return _ranked_plan(unit @ unit[anchor], anchor, k, seed)


def mlm_mask_plan(length: int, rng, vocab_low: int = 0, vocab_high: int | None = None) -> MaskPlan:
    """BERT-style selection: each position with prob 0.15, then 80/10/10 mask/random/keep.

    Random replacements are drawn from ``[vocab_low, vocab_high)`` when a range is given.
    """
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    seed = _seed_of(rng)
    g = _rng(rng)
    selected = np.flatnonzero(g.random(length) < MLM_PROB)
    u = g.random(selected.size)
    actions = []
    replacements = {}
    for pos, r in zip(selected, u):
        if r < MLM_MASK_FRAC:
            actions.append(Action.MASK)
        elif r < MLM_MASK_FRAC + MLM_RANDOM_FRAC:
            actions.append(Action.RANDOM)
            if vocab_high is not None:
                replacements[int(pos)] = int(g.integers(vocab_low, vocab_high))
        else:
            actions.append(Action.KEEP)
    return MaskPlan(tuple(int(p) for p in selected), tuple(actions), seed_used=seed,
                    replacements=replacements)

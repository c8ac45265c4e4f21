"""Synthetic image-caption pairs with a learnable cross-modal signal.

A concept is a (colour, position) pair.  Its image is a coloured square in
one quadrant over low-amplitude noise; its caption names the colour and the
position using one of a few sentence templates ("styles").
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FIRST_WORD_ID
from .tensor import load_tensor, save_tensor

PALETTE = np.array([[1.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0],
                    [1.0, 1.0, 0.0]])
N_COLORS = len(PALETTE)
N_POSITIONS = 4

COLOR_WORDS = [FIRST_WORD_ID + i for i in range(N_COLORS)]
POSITION_WORDS = [FIRST_WORD_ID + N_COLORS + i for i in range(N_POSITIONS)]
_W = FIRST_WORD_ID + N_COLORS + N_POSITIONS
A, THE, THING, AT, HAS, IS = range(_W, _W + 6)

# C = colour word, P = position word
TEMPLATES = [
    (A, "C", THING, AT, "P"),
    ("C", THING, "P"),
    (THE, "P", HAS, A, "C", THING),
    (A, THING, AT, "P", IS, "C"),
]
N_STYLES = len(TEMPLATES)
MIN_VOCAB = _W + 6


@dataclass
class SyntheticPair:
    image: np.ndarray = field(repr=False)
    caption: tuple[int, ...]
    matched: bool
    concept_labels: dict

    @property
    def label(self) -> int:
        return int(self.matched)


def concept_factors(concept: int) -> tuple[int, int]:
    """(colour, position) of a concept id."""
    return concept % N_COLORS, (concept // N_COLORS) % N_POSITIONS


def caption_for(concept: int, style: int) -> tuple[int, ...]:
    color, pos = concept_factors(concept)
    out = []
    for tok in TEMPLATES[style % N_STYLES]:
        if tok == "C":
            out.append(COLOR_WORDS[color])
        elif tok == "P":
            out.append(POSITION_WORDS[pos])
        else:
            out.append(tok)
    return tuple(out)


def render_image(concept: int, rng: np.random.Generator, size: int = 16, noise: float = 0.1) -> np.ndarray:
    color, pos = concept_factors(concept)
    img = rng.normal(0.0, noise, (size, size, 3))
    half = size // 2
    side = max(2, half - 2)
    r0 = (pos // 2) * half + int(rng.integers(0, half - side + 1))
    c0 = (pos % 2) * half + int(rng.integers(0, half - side + 1))
    img[r0:r0 + side, c0:c0 + side] += PALETTE[color]
    return img


def synth_dataset(n: int, concepts: int, rng, image_size: int = 16,
                  match_prob: float = 0.5) -> list[SyntheticPair]:
    """``n`` pairs; each is matched with probability ``match_prob``."""
    if concepts < 2:
        raise ValueError("need at least two concepts")
    if concepts > N_COLORS * N_POSITIONS:
        raise ValueError(f"at most {N_COLORS * N_POSITIONS} distinct concepts are available")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for _ in range(n):
        img_concept = int(rng.integers(concepts))
        style = int(rng.integers(N_STYLES))
        matched = bool(rng.random() < match_prob)
        if matched:
            cap_concept = img_concept
        else:
            cap_concept = int(rng.integers(concepts - 1))
            cap_concept += cap_concept >= img_concept
        image = render_image(img_concept, rng, image_size)
        color, pos = concept_factors(cap_concept)
        labels = {"image_concept": img_concept, "caption_concept": cap_concept,
                  "color": color, "position": pos, "style": style}
        out.append(SyntheticPair(image, caption_for(cap_concept, style), matched, labels))
    return out


def other_concept(concept: int, concepts: int, rng: np.random.Generator) -> int:
    c = int(rng.integers(concepts - 1))
    return c + (c >= concept)


def save_dataset(pairs: list[SyntheticPair], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "images.bin", np.stack([p.image for p in pairs]))
    with open(d / "pairs.jsonl", "w") as fh:
        for p in pairs:
            fh.write(json.dumps({"caption": list(p.caption), "matched": p.matched,
                                 "concept_labels": p.concept_labels}, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> list[SyntheticPair]:
    d = Path(directory)
    images = load_tensor(d / "images.bin")
    rows = [json.loads(line) for line in (d / "pairs.jsonl").read_text().splitlines() if line]
    if len(rows) != images.shape[0]:
        raise ValueError(f"{d}: {len(rows)} captions for {images.shape[0]} images")
    return [SyntheticPair(img, tuple(r["caption"]), bool(r["matched"]), r["concept_labels"])
            for img, r in zip(images, rows)]

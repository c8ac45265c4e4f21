"""Toy vision transformer and single-stream multimodal transformer.

The vision transformer turns an image into ``m`` visual tokens.  The
multimodal transformer runs over ``[CLS] + vision + [SEP] + language``.
Both return the head-averaged attention matrix of every layer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .masking import Action, MaskPlan
from .records import AttentionRecord, ModalityPartition
from .tensor import Tensor

CLS_ID = 0
SEP_ID = 1
MASK_ID = 2
FIRST_WORD_ID = 3


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 3
    patch: int = 4
    dim: int = 64
    heads: int = 4
    vision_layers: int = 4
    mm_layers: int = 4
    mlp_hidden: int = 128
    vocab: int = 64
    max_text_len: int = 16

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError("image size must be divisible by patch size")
        if self.dim % self.heads:
            raise ConfigError("hidden width must be divisible by the head count")
        if self.dim % 4:
            raise ConfigError("hidden width must be divisible by 4 for 2-D position embedding")
        if self.vocab <= FIRST_WORD_ID:
            raise ConfigError(f"vocab must exceed the {FIRST_WORD_ID} reserved ids")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


# ---------------------------------------------------------------------------
# position embeddings


def sinusoidal_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos: channel 2i = sin(p / 10000^(2i/dim)), 2i+1 = cos(...)."""
    positions = np.asarray(positions, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = positions[:, None] * freq[None, :]
    out = np.empty((positions.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoidal_pos_embed_2d(h: int, w: int, c: int) -> np.ndarray:
    """(h*w) x c table; first c/2 channels encode the row, the rest the column."""
    if c % 4:
        raise ConfigError(f"2-D sinusoidal embedding needs c divisible by 4, got {c}")
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.concatenate([sinusoidal_1d(rows, c // 2), sinusoidal_1d(cols, c // 2)], axis=1)


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, c: int, hidden: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}.ln1.g", (c,), "ones"), (f"{prefix}.ln1.b", (c,), "zeros"),
        (f"{prefix}.wq", (c, c), "linear"), (f"{prefix}.bq", (c,), "zeros"),
        (f"{prefix}.wk", (c, c), "linear"), (f"{prefix}.bk", (c,), "zeros"),
        (f"{prefix}.wv", (c, c), "linear"), (f"{prefix}.bv", (c,), "zeros"),
        (f"{prefix}.wo", (c, c), "linear"), (f"{prefix}.bo", (c,), "zeros"),
        (f"{prefix}.ln2.g", (c,), "ones"), (f"{prefix}.ln2.b", (c,), "zeros"),
        (f"{prefix}.w1", (c, hidden), "linear"), (f"{prefix}.b1", (hidden,), "zeros"),
        (f"{prefix}.w2", (hidden, c), "linear"), (f"{prefix}.b2", (c,), "zeros"),
    ]


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    c = cfg.dim
    layout = [("vis.patch.w", (cfg.patch_dim, c), "linear"), ("vis.patch.b", (c,), "zeros"),
              ("vis.patch.ln.g", (c,), "ones"), ("vis.patch.ln.b", (c,), "zeros")]
    for i in range(cfg.vision_layers):
        layout += _block_shapes(f"vis.l{i}", c, cfg.mlp_hidden)
    layout += [("vis.ln_f.g", (c,), "ones"), ("vis.ln_f.b", (c,), "zeros")]
    layout += [("mm.word_emb", (cfg.vocab, c), "embed"),
               ("mm.segment", (3, c), "embed"),
               ("mm.vis_mask", (1, c), "embed"),
               ("mm.ln_in.g", (c,), "ones"), ("mm.ln_in.b", (c,), "zeros")]
    for i in range(cfg.mm_layers):
        layout += _block_shapes(f"mm.l{i}", c, cfg.mlp_hidden)
    layout += [("mm.ln_f.g", (c,), "ones"), ("mm.ln_f.b", (c,), "zeros"),
               ("head.mlm.w", (c, cfg.vocab), "linear"), ("head.mlm.b", (cfg.vocab,), "zeros"),
               ("head.itm.w", (c, 2), "linear"), ("head.itm.b", (2,), "zeros"),
               ("head.mfr.w", (c, c), "linear"), ("head.mfr.b", (c,), "zeros")]
    return layout


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, Tensor] = field(repr=False)

    @classmethod
    def init(cls, cfg: ModelConfig, rng) -> "ModelParams":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        tensors = {}
        for name, shape, kind in param_layout(cfg):
            if kind == "ones":
                arr = np.ones(shape)
            elif kind == "zeros":
                arr = np.zeros(shape)
            elif kind == "embed":
                arr = rng.normal(0.0, 1.0, shape)
            else:
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(cfg, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: Tensor(v.data, requires_grad=True, name=k)
                                      for k, v in self.tensors.items()})

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in self.tensors.items():
            fname = name + ".bin"
            T.save_tensor(d / fname, t.data)
            entries.append({"name": name, "shape": list(t.shape), "file": fname})
        manifest = {"config": asdict(self.cfg), "tensors": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ModelParams":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        cfg = ModelConfig(**manifest["config"])
        expected = {name: shape for name, shape, _ in param_layout(cfg)}
        tensors = {}
        for e in manifest["tensors"]:
            arr = T.load_tensor(d / e["file"])
            if tuple(e["shape"]) != arr.shape or expected.get(e["name"]) != arr.shape:
                raise ValueError(f"checkpoint tensor {e['name']} has unexpected shape {arr.shape}")
            tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        missing = set(expected) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
        return cls(cfg, {name: tensors[name] for name in expected})


# ---------------------------------------------------------------------------
# forward passes


def _attention_block(x: Tensor, p: ModelParams, prefix: str, heads: int):
    c = x.shape[1]
    dh = c // heads
    h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q = T.add(h @ p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = T.add(h @ p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = T.add(h @ p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    outs, probs = [], []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        qh, kh, vh = T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), T.slice_cols(v, lo, hi)
        a = T.softmax_rows(T.scale(qh @ T.transpose(kh), 1.0 / np.sqrt(dh)))
        probs.append(a.data)
        outs.append(a @ vh)
    attended = T.add(T.concat_cols(outs) @ p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    x = x + attended
    h2 = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    mlp = T.add(T.gelu(T.add(h2 @ p[f"{prefix}.w1"], p[f"{prefix}.b1"])) @ p[f"{prefix}.w2"],
                p[f"{prefix}.b2"])
    return x + mlp, np.mean(probs, axis=0)


def image_to_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """h x w x ch image -> (h/patch * w/patch) x (patch*patch*ch), row-major over the grid."""
    image = np.asarray(image, dtype=np.float64)
    h, w, ch = image.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    return (image.reshape(gh, patch, gw, patch, ch)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, patch * patch * ch))


def patch_embed(image, params: ModelParams) -> Tensor:
    cfg = params.cfg
    patches = image_to_patches(image, cfg.patch)
    if patches.shape[1] != cfg.patch_dim:
        raise ConfigError(f"image channels do not match config ({cfg.channels})")
    h, w = image.shape[0] // cfg.patch, image.shape[1] // cfg.patch
    pos = Tensor(sinusoidal_pos_embed_2d(h, w, cfg.dim))
    x = T.add(Tensor(patches) @ params["vis.patch.w"], params["vis.patch.b"]) + pos
    return T.layer_norm(x, params["vis.patch.ln.g"], params["vis.patch.ln.b"])


def vision_forward(image, params: ModelParams) -> tuple[Tensor, list[AttentionRecord]]:
    cfg = params.cfg
    x = patch_embed(image, params)
    records = []
    for i in range(cfg.vision_layers):
        x, att = _attention_block(x, params, f"vis.l{i}", cfg.heads)
        records.append(AttentionRecord(i + 1, att))
    return T.layer_norm(x, params["vis.ln_f.g"], params["vis.ln_f.b"]), records


@dataclass
class MultimodalOutput:
    hidden: Tensor
    records: list[AttentionRecord]
    layer_states: list[np.ndarray]
    partition: ModalityPartition
    input_ids: np.ndarray


def apply_mlm_plan(words: Sequence[int], plan: MaskPlan | None, rng=None, vocab: int | None = None) -> np.ndarray:
    """Input ids after applying a language plan's mask/random/keep actions."""
    ids = np.array(words, dtype=np.int64)
    if plan is None:
        return ids
    plan.validate(len(ids))
    for pos, act in zip(plan.positions, plan.actions or (Action.MASK,) * len(plan)):
        if act is Action.MASK:
            ids[pos] = MASK_ID
        elif act is Action.RANDOM:
            if pos in plan.replacements:
                ids[pos] = plan.replacements[pos]
            elif rng is not None and vocab is not None:
                ids[pos] = int(rng.integers(FIRST_WORD_ID, vocab))
            else:
                raise ValueError(f"no replacement token recorded for position {pos}")
    return ids


def multimodal_forward(visual: Tensor, words: Sequence[int], params: ModelParams,
                       vision_plan: MaskPlan | None = None,
                       language_plan: MaskPlan | None = None) -> MultimodalOutput:
    """Run the joint transformer; masked visual rows become the learned mask embedding.

    Visual tokens get the 2-D sinusoid and language tokens the 1-D one, both
    added after masking, so masked positions keep their location.
    """
    cfg = params.cfg
    m, t = visual.shape[0], len(words)
    if t < 1 or t > cfg.max_text_len:
        raise ValueError(f"caption length {t} outside [1, {cfg.max_text_len}]")
    if any(w < 0 or w >= cfg.vocab for w in words):
        raise ValueError("word id outside vocabulary")
    ids = apply_mlm_plan(words, language_plan)

    vis = visual
    if vision_plan is not None and len(vision_plan):
        vision_plan.validate(m)
        rows = np.arange(m)
        rows[list(vision_plan.positions)] = m
        vis = T.take_rows(T.concat_rows([visual, params["mm.vis_mask"]]), rows)
    # positions are re-added after masking so a masked patch still knows where it sits
    if m != cfg.num_patches:
        raise ValueError(f"expected {cfg.num_patches} visual tokens, got {m}")
    vis = vis + Tensor(sinusoidal_pos_embed_2d(cfg.grid, cfg.grid, cfg.dim))

    tok = T.take_rows(params["mm.word_emb"], np.concatenate([[CLS_ID, SEP_ID], ids]))
    lang = T.take_rows(tok, np.arange(2, 2 + t)) + Tensor(sinusoidal_1d(np.arange(t), cfg.dim))
    x = T.concat_rows([T.take_rows(tok, [0]), vis, T.take_rows(tok, [1]), lang])
    segments = np.array([0] + [1] * m + [0] + [2] * t)
    x = x + T.take_rows(params["mm.segment"], segments)
    x = T.layer_norm(x, params["mm.ln_in.g"], params["mm.ln_in.b"])

    records, states = [], []
    for i in range(cfg.mm_layers):
        x, att = _attention_block(x, params, f"mm.l{i}", cfg.heads)
        records.append(AttentionRecord(i + 1, att))
        states.append(x.data)
    hidden = T.layer_norm(x, params["mm.ln_f.g"], params["mm.ln_f.b"])
    return MultimodalOutput(hidden, records, states, ModalityPartition.joint(m, t), ids)


# heads


def mlm_logits(out: MultimodalOutput, params: ModelParams, positions: Sequence[int]) -> Tensor:
    rows = [out.partition.language[p] for p in positions]
    return T.add(T.take_rows(out.hidden, rows) @ params["head.mlm.w"], params["head.mlm.b"])


def itm_logits(out: MultimodalOutput, params: ModelParams) -> Tensor:
    return T.add(T.take_rows(out.hidden, [0]) @ params["head.itm.w"], params["head.itm.b"])


def mfr_regress(out: MultimodalOutput, params: ModelParams, positions: Sequence[int]) -> Tensor:
    rows = [out.partition.vision[p] for p in positions]
    return T.add(T.take_rows(out.hidden, rows) @ params["head.mfr.w"], params["head.mfr.b"])


def modality_states(out: MultimodalOutput) -> tuple[Tensor, Tensor]:
    """Final hidden rows of the vision and the language tokens."""
    return (T.take_rows(out.hidden, list(out.partition.vision)),
            T.take_rows(out.hidden, list(out.partition.language)))

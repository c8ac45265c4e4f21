"""Pre-training loop: batch construction, loss assembly, AdamW with warm-up and step decay."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import masking
from . import model as M
from . import objectives as O
from . import tensor as T
from .data import N_STYLES, SyntheticPair, caption_for, other_concept, synth_dataset

log = logging.getLogger(__name__)

MFR_MODES = ("ranked", "random", "cosine", "off")


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    weights: O.LossWeights = field(default_factory=O.LossWeights)
    ipot: O.IpotConfig = field(default_factory=O.IpotConfig)
    mfr_mode: str = "ranked"
    mfr_k: int = 7
    mfr_p: float = 0.4375           # random mode masks round(m * p) = 7 of 16 tokens
    lr_vision: float = 3e-4
    lr_mm: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 50
    decay_at: tuple[float, float] = (0.6, 0.85)
    decay_factor: float = 0.1
    steps: int = 500
    images_per_step: int = 6
    matched_per_image: int = 2
    unmatched_per_image: int = 2
    dataset_size: int = 512
    concepts: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mfr_mode not in MFR_MODES:
            raise M.ConfigError(f"mfr_mode must be one of {MFR_MODES}")
        if self.mfr_mode in ("ranked", "cosine") and not 1 <= self.mfr_k <= self.model.num_patches:
            raise M.ConfigError(f"mfr_k must lie in [1, {self.model.num_patches}]")
        positive = ("steps", "images_per_step", "dataset_size", "matched_per_image")
        for name in positive:
            if getattr(self, name) <= 0:
                raise M.ConfigError(f"{name} must be positive")
        if self.unmatched_per_image < 0 or self.warmup_steps < 0:
            raise M.ConfigError("counts must be non-negative")
        if self.lr_vision <= 0 or self.lr_mm <= 0:
            raise M.ConfigError("learning rates must be positive")

    @property
    def mfr_enabled(self) -> bool:
        return self.mfr_mode != "off"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise M.ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = M.ModelConfig(**d["model"])
        if "weights" in d:
            d["weights"] = O.LossWeights(**d["weights"])
        if "ipot" in d:
            d["ipot"] = O.IpotConfig(**d["ipot"])
        if "decay_at" in d:
            d["decay_at"] = tuple(d["decay_at"])
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        for key, value in kw.items():
            if value is None:
                continue
            head, _, tail = key.partition(".")
            if tail:
                d[head][tail] = value
            else:
                d[head] = value
        return TrainConfig.from_dict(d)


def learning_rate_scale(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to 1, then a 10x drop at each ``decay_at`` fraction of the run."""
    scale = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    for frac in cfg.decay_at:
        if step >= int(frac * cfg.steps):
            scale *= cfg.decay_factor
    return scale


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: M.ModelParams, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params}
        self.v = {k: np.zeros_like(t.data) for k, t in params}
        self.t = 0

    def step(self, lr_scale: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            lr = (cfg.lr_vision if name.startswith("vis.") else cfg.lr_mm) * lr_scale
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            if p.data.ndim == 2 and not name.startswith("mm.word_emb"):
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# per-example losses


@dataclass
class StepParts:
    mlm: list = field(default_factory=list)
    itm: list = field(default_factory=list)
    vla: list = field(default_factory=list)
    mfr: list = field(default_factory=list)


def vision_plan_for(cfg: TrainConfig, visual: T.Tensor, records, rng) -> masking.MaskPlan | None:
    if cfg.mfr_mode == "ranked":
        return masking.mfr_mask_plan(records[-1].matrix, cfg.mfr_k, rng)
    if cfg.mfr_mode == "random":
        return masking.random_mask_plan(visual.shape[0], cfg.mfr_p, rng)
    if cfg.mfr_mode == "cosine":
        return masking.cosine_mask_plan(visual.data, cfg.mfr_k, rng)
    return None


def matched_losses(params: M.ModelParams, cfg: TrainConfig, visual: T.Tensor, records,
                   caption: Sequence[int], rng, parts: StepParts,
                   language_plan: masking.MaskPlan | None = None,
                   vision_plan: masking.MaskPlan | None = None,
                   vla_plan: np.ndarray | None = None) -> None:
    """ITM + VLA on the clean pair, then MLM (+ MFR) on a masked copy."""
    clean = M.multimodal_forward(visual, caption, params)
    parts.itm.append(O.itm_loss(M.itm_logits(clean, params), 1))
    vis_h, lang_h = M.modality_states(clean)
    vla, _ = O.vla_loss(vis_h, lang_h, cfg.ipot, plan=vla_plan)
    parts.vla.append(vla)

    if language_plan is None:
        language_plan = masking.mlm_mask_plan(len(caption), rng, M.FIRST_WORD_ID, cfg.model.vocab)
    if vision_plan is None and cfg.mfr_enabled:
        vision_plan = vision_plan_for(cfg, visual, records, rng)
    if not len(language_plan) and vision_plan is None:
        return
    masked = M.multimodal_forward(visual, caption, params, vision_plan, language_plan)
    if len(language_plan):
        logits = M.mlm_logits(masked, params, language_plan.positions)
        parts.mlm.append(O.mlm_loss(logits, caption, language_plan))
    if vision_plan is not None:
        pos = list(vision_plan.positions)
        target = T.take_rows(visual, pos).detach()
        parts.mfr.append(O.mfr_loss(target, M.mfr_regress(masked, params, pos)))


def _mean(xs: list) -> T.Tensor | None:
    if not xs:
        return None
    return T.scale(T.total(T.stack_scalars(xs)), 1.0 / len(xs))


def combine(parts: StepParts, cfg: TrainConfig) -> tuple[T.Tensor, dict[str, float]]:
    zero = T.Tensor(0.0)
    mlm = _mean(parts.mlm) or zero
    itm = _mean(parts.itm) or zero
    vla = _mean(parts.vla) or zero
    mfr = _mean(parts.mfr) or zero
    itm_total = itm + T.scale(vla, cfg.weights.vla_weight)
    loss = O.total_loss(mlm, itm_total, mfr, cfg.weights)
    logged = {"L_MLM": mlm.item(), "L_ITM": itm.item(), "L_VLA": vla.item()}
    if cfg.mfr_enabled:
        logged["L_MFR"] = mfr.item()
    logged["L_total"] = loss.item()
    return loss, logged


# ---------------------------------------------------------------------------
# training


def loss_columns(cfg: TrainConfig) -> list[str]:
    cols = ["step", "L_MLM", "L_ITM", "L_VLA"]
    if cfg.mfr_enabled:
        cols.append("L_MFR")
    return cols + ["L_total"]


def train_step(params: M.ModelParams, cfg: TrainConfig, data: Sequence[SyntheticPair],
               rng: np.random.Generator) -> tuple[T.Tensor, dict[str, float], T.Tape]:
    """Forward every pair of one batch on a fresh tape; returns (loss, logged values, tape)."""
    parts = StepParts()
    with T.Tape() as tape:
        for idx in rng.choice(len(data), size=cfg.images_per_step, replace=False):
            pair = data[int(idx)]
            concept = pair.concept_labels["image_concept"]
            visual, records = M.vision_forward(pair.image, params)
            for _ in range(cfg.matched_per_image):
                caption = caption_for(concept, int(rng.integers(N_STYLES)))
                matched_losses(params, cfg, visual, records, caption, rng, parts)
            for _ in range(cfg.unmatched_per_image):
                caption = caption_for(other_concept(concept, cfg.concepts, rng),
                                      int(rng.integers(N_STYLES)))
                out = M.multimodal_forward(visual, caption, params)
                parts.itm.append(O.itm_loss(M.itm_logits(out, params), 0))
        loss, logged = combine(parts, cfg)
    return loss, logged, tape


@dataclass
class TrainResult:
    params: M.ModelParams
    log: list[dict[str, float]]
    columns: list[str]


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (data, init, training) generators from one seed."""
    ss = np.random.SeedSequence(seed)
    return tuple(np.random.default_rng(s) for s in ss.spawn(3))


def default_dataset(cfg: TrainConfig) -> list[SyntheticPair]:
    data_rng, _, _ = rng_streams(cfg.seed)
    return synth_dataset(cfg.dataset_size, cfg.concepts, data_rng, cfg.model.image_size)


def train(cfg: TrainConfig, data: Sequence[SyntheticPair] | None = None,
          params: M.ModelParams | None = None, progress_every: int = 0) -> TrainResult:
    if data is None:
        data = default_dataset(cfg)
    _, init_rng, train_rng = rng_streams(cfg.seed)
    if params is None:
        params = M.ModelParams.init(cfg.model, init_rng)
    opt = AdamW(params, cfg)
    columns = loss_columns(cfg)
    history = []
    for step in range(cfg.steps):
        params.zero_grad()
        loss, logged, tape = train_step(params, cfg, data, train_rng)
        if not np.isfinite(logged["L_total"]):
            raise TrainingDiverged(f"loss is {logged['L_total']} at step {step}: {logged}")
        T.backward(tape, loss)
        history.append({"step": step, **logged})
        opt.step(learning_rate_scale(step, cfg))
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d %s", step + 1, {k: round(v, 4) for k, v in logged.items()})
    return TrainResult(params, history, columns)


def write_loss_csv(path: str | Path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.columns)
        for row in result.log:
            w.writerow([row["step"]] + [repr(row[c]) for c in result.columns[1:]])


def save_run(directory: str | Path, cfg: TrainConfig, result: TrainResult) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    result.params.save(d / "checkpoint")
    write_loss_csv(d / "losses.csv", result)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def itm_accuracy(params: M.ModelParams, pairs: Sequence[SyntheticPair]) -> float:
    correct = 0
    for p in pairs:
        visual, _ = M.vision_forward(p.image, params)
        logits = M.itm_logits(M.multimodal_forward(visual, p.caption, params), params)
        correct += int(np.argmax(logits.data[0]) == p.label)
    return correct / len(pairs)

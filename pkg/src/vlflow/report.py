"""Probe reports, attention dumps and the objective ablation."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import SyntheticPair, synth_dataset
from .flow import ImfReport, batch_imf_profiles
from .probe import nmi_profile, write_nmi_csv
from .tensor import save_tensor
from .train import TrainConfig, rng_streams, train, write_loss_csv

log = logging.getLogger(__name__)

HIGHLIGHT = (1, 3)
PROBE_SEED = 12345


@dataclass
class ProbeOptions:
    pairs: int = 32
    matched_only: bool = True
    highlight: tuple[int, int] = HIGHLIGHT
    include_special: bool = False
    nmi_average: str = "geometric"
    seed: int = 0


def probe_set(concepts: int, image_size: int = 16, n: int = 200) -> list[SyntheticPair]:
    """Held-out pairs drawn from a generator disjoint from every training seed stream."""
    return synth_dataset(n, concepts, np.random.default_rng(PROBE_SEED), image_size)


def _select(data: Sequence[SyntheticPair], opts: ProbeOptions) -> list[SyntheticPair]:
    chosen = [p for p in data if p.matched or not opts.matched_only][:opts.pairs]
    if not chosen:
        raise ValueError("no pairs to probe")
    return chosen


def _check_layer_pair(pair: tuple[int, int], J: int) -> None:
    i, j = pair
    if not 1 <= i <= j <= J:
        raise M.ConfigError(f"layer pair ({i}, {j}) outside 1 <= i <= j <= {J}")


def forward_batch(params: M.ModelParams, pairs: Sequence[SyntheticPair]):
    """Multimodal forward over each pair; returns (records batch, hidden-state batch)."""
    recs, states = [], []
    for p in pairs:
        visual, _ = M.vision_forward(p.image, params)
        out = M.multimodal_forward(visual, p.caption, params)
        recs.append((out.records, out.partition))
        states.append((out.layer_states, out.partition))
    return recs, states


def imf_report(params: M.ModelParams, pairs: Sequence[SyntheticPair],
               include_special: bool = False) -> ImfReport:
    recs, _ = forward_batch(params, pairs)
    return batch_imf_profiles(recs, include_special)


def _write_profile(path: Path, key: str, values: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, "F"])
        for n, v in enumerate(values, start=1):
            w.writerow([n, repr(float(v))])


def probe(checkpoint: str | Path | M.ModelParams, data: Sequence[SyntheticPair],
          out_dir: str | Path, opts: ProbeOptions | None = None) -> dict:
    """IMF and NMI profiles of a checkpoint over a batch of pairs.

    Writes imf.csv (every i <= j), imf_from_input.csv (F^{1,j}),
    imf_within_layer.csv (F^{i,i}), nmi.csv and summary.json; returns the summary.
    """
    opts = opts or ProbeOptions()
    params = checkpoint if isinstance(checkpoint, M.ModelParams) else M.ModelParams.load(checkpoint)
    J = params.cfg.mm_layers
    _check_layer_pair(opts.highlight, J)
    pairs = _select(data, opts)
    recs, states = forward_batch(params, pairs)
    report = batch_imf_profiles(recs, opts.include_special)
    means, stds = nmi_profile(states, opts.seed, average=opts.nmi_average)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "imf.csv")
    _write_profile(out / "imf_from_input.csv", "j", report.from_input)
    _write_profile(out / "imf_within_layer.csv", "i", report.within_layer)
    write_nmi_csv(out / "nmi.csv", means, stds)
    i, j = opts.highlight
    summary = {
        "pairs": len(pairs),
        "matched_only": opts.matched_only,
        "layers": J,
        "highlight": {"i": i, "j": j, "F": report.get(i, j)},
        "F_1_J": report.get(1, J),
        "F_from_input": report.from_input,
        "F_within_layer": report.within_layer,
        "nmi_mean": means,
        "nmi_std": stds,
        "include_special": opts.include_special,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def dump_attention(checkpoint: str | Path | M.ModelParams, pair: SyntheticPair,
                   out_dir: str | Path) -> dict:
    """One tensor file per layer of both transformers plus manifest.json."""
    params = checkpoint if isinstance(checkpoint, M.ModelParams) else M.ModelParams.load(checkpoint)
    visual, vis_records = M.vision_forward(pair.image, params)
    out = M.multimodal_forward(visual, pair.caption, params)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    entries = {"vision": [], "multimodal": []}
    for kind, records in (("vision", vis_records), ("multimodal", out.records)):
        for rec in records:
            name = f"{kind}_l{rec.layer_index}.bin"
            save_tensor(d / name, rec.matrix)
            entries[kind].append({"layer": rec.layer_index, "file": name})
    manifest = {
        "caption": list(pair.caption),
        "matched": pair.matched,
        "partition": out.partition.to_dict(),
        "vision_tokens": visual.shape[0],
        **entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# ablation

SETTINGS = [
    ("MLM+ITM", "off"),
    ("MLM+ITM+MFR_Rand", "random"),
    ("MLM+ITM+MFR", "ranked"),
    ("MLM+ITM+MFR_CNN", "cosine"),
]
LOSS_KEYS = ("L_MLM", "L_ITM", "L_VLA", "L_MFR", "L_total")


def final_losses(history: Sequence[dict], window: int = 10) -> dict[str, float]:
    """Mean of each logged loss over the last ``window`` steps (blank when not logged)."""
    tail = history[-window:]
    return {k: float(np.mean([h[k] for h in tail])) if k in tail[0] else None for k in LOSS_KEYS}


def ablate(base: TrainConfig, seeds: Sequence[int], out_dir: str | Path,
           probe_pairs: int = 32) -> dict:
    """Train every objective setting for every seed and tabulate F^{1,3} and final losses."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    held = probe_set(base.concepts, base.model.image_size)
    _check_layer_pair(HIGHLIGHT, base.model.mm_layers)
    opts = ProbeOptions(pairs=probe_pairs)
    rows = []
    for name, mode in SETTINGS:
        for seed in seeds:
            cfg = base.with_overrides(mfr_mode=mode, seed=seed)
            log.info("ablation %s seed %d", name, seed)
            result = train(cfg)
            write_loss_csv(out / f"losses_{mode}_seed{seed}.csv", result)
            rep = imf_report(result.params, _select(held, opts))
            rows.append({"setting": name, "mfr_mode": mode, "seed": seed,
                         "F13": rep.get(*HIGHLIGHT), **final_losses(result.log)})

    cols = ["setting", "mfr_mode", "seed", "F13", *LOSS_KEYS]
    _write_rows(out / "ablation_seeds.csv", cols, rows)

    table = []
    for name, mode in SETTINGS:
        mine = [r for r in rows if r["mfr_mode"] == mode]
        agg = {"setting": name, "mfr_mode": mode, "seeds": len(mine),
               "F13": float(np.mean([r["F13"] for r in mine])),
               "F13_std": float(np.std([r["F13"] for r in mine]))}
        for k in LOSS_KEYS:
            vals = [r[k] for r in mine if r[k] is not None]
            agg[k] = float(np.mean(vals)) if vals else None
        table.append(agg)
    _write_rows(out / "ablation.csv", ["setting", "mfr_mode", "seeds", "F13", "F13_std", *LOSS_KEYS], table)

    by_seed = {(r["mfr_mode"], r["seed"]): r["F13"] for r in rows}
    wins = sum(by_seed[("ranked", s)] >= by_seed[("off", s)] for s in seeds)
    over_random = sum(by_seed[("ranked", s)] >= by_seed[("random", s)] for s in seeds)
    summary = {"table": table, "ranked_ge_base_seeds": wins, "seeds": list(seeds),
               "ranked_ge_base_majority": wins * 2 > len(seeds),
               "ranked_ge_random_seeds": over_random}
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_rows(path: Path, cols: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])


def untrained_params(cfg: TrainConfig) -> M.ModelParams:
    """The initial parameters ``train(cfg)`` starts from."""
    _, init_rng, _ = rng_streams(cfg.seed)
    return M.ModelParams.init(cfg.model, init_rng)

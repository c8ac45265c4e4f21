"""Command-line entry point: synth, train, probe, dump-attn, ablate.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
a computation goes numerically wrong (NaN loss, zero-norm token, ...).
Output goes to ``--out`` if given, else ``$VLFLOW_RUN_DIR``, else ``runs/<command>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import model as M
from ._backend import BACKEND
from .data import load_dataset, save_dataset, synth_dataset
from .report import ProbeOptions, ablate, dump_attention, probe, probe_set
from .tensor import NumericError
from .train import TrainConfig, TrainingDiverged, itm_accuracy, save_run, train

log = logging.getLogger("vlflow")

RUN_DIR_ENV = "VLFLOW_RUN_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(RUN_DIR_ENV)
    return Path(env) if env else Path("runs") / command


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, sets: list[str], **flags) -> TrainConfig:
    """Config file (JSON) first, then ``--set key=value`` pairs, then dedicated flags."""
    cfg = TrainConfig()
    if path:
        try:
            cfg = TrainConfig.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: not valid JSON ({e})") from e
        except TypeError as e:
            raise UsageError(f"{path}: {e}") from e
    overrides = {}
    for item in sets or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    overrides.update({k: v for k, v in flags.items() if v is not None})
    try:
        return cfg.with_overrides(**overrides)
    except (KeyError, TypeError) as e:
        raise UsageError(f"bad override: {e}") from e


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, dotted for nested (model.dim=32)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mfr-mode", choices=["ranked", "random", "cosine", "off"])
    p.add_argument("--lr-vision", type=float)
    p.add_argument("--lr-mm", type=float)


def _config_from(args) -> TrainConfig:
    return load_config(args.config, args.set, steps=args.steps, seed=args.seed,
                       mfr_mode=args.mfr_mode, lr_vision=args.lr_vision, lr_mm=args.lr_mm)


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    if (p / "checkpoint" / "manifest.json").exists():
        return p / "checkpoint"
    return p


def cmd_synth(args) -> int:
    out = run_dir(args, "synth")
    pairs = synth_dataset(args.n, args.concepts, np.random.default_rng(args.seed), args.image_size)
    save_dataset(pairs, out)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from(args)
    data = load_dataset(args.data) if args.data else None
    out = run_dir(args, "train")
    result = train(cfg, data, progress_every=args.progress)
    save_run(out, cfg, result)
    held = probe_set(cfg.concepts, cfg.model.image_size)
    acc = itm_accuracy(result.params, held)
    (out / "eval.json").write_text(json.dumps({"heldout_itm_accuracy": acc}, indent=2) + "\n")
    print(f"final L_total {result.log[-1]['L_total']:.4f}  held-out ITM accuracy {acc:.3f}  -> {out}")
    return EXIT_OK


def _probe_data(args, params: M.ModelParams):
    if args.data:
        return load_dataset(args.data)
    return probe_set(args.concepts, params.cfg.image_size)


def cmd_probe(args) -> int:
    params = M.ModelParams.load(_checkpoint_dir(args.checkpoint))
    data = _probe_data(args, params)
    opts = ProbeOptions(pairs=args.pairs, matched_only=not args.all_pairs,
                        highlight=tuple(args.highlight), include_special=args.include_special,
                        nmi_average=args.nmi_average, seed=args.seed)
    out = run_dir(args, "probe")
    summary = probe(params, data, out, opts)
    h = summary["highlight"]
    print(f"F^{{{h['i']},{h['j']}}} = {h['F']:.4f}  F^{{1,J}} = {summary['F_1_J']:.4f}  -> {out}")
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    params = M.ModelParams.load(_checkpoint_dir(args.checkpoint))
    data = _probe_data(args, params)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} outside [0, {len(data)})")
    out = run_dir(args, "dump-attn")
    manifest = dump_attention(params, data[args.index], out)
    n = len(manifest["vision"]) + len(manifest["multimodal"])
    print(f"wrote {n} attention matrices to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    out = run_dir(args, "ablate")
    summary = ablate(cfg, args.seeds, out, probe_pairs=args.pairs)
    for row in summary["table"]:
        print(f"{row['setting']:<18} F13 {row['F13']:.4f}  L_total {row['L_total']:.4f}")
    print(f"ranked >= MLM+ITM on {summary['ranked_ge_base_seeds']}/{len(args.seeds)} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--concepts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="pre-train the toy model")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset directory written by synth (default: generated from seed)")
    p.add_argument("--progress", type=int, default=0, help="log every N steps")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("probe", cmd_probe, "IMF and NMI profiles of a checkpoint"),
                               ("dump-attn", cmd_dump_attn, "write per-layer attention of one pair")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
        p.add_argument("--data", help="dataset directory (default: held-out synthetic pairs)")
        p.add_argument("--concepts", type=int, default=8)
        p.add_argument("--out")
        p.set_defaults(fn=fn)
        if name == "probe":
            p.add_argument("--pairs", type=int, default=32)
            p.add_argument("--all-pairs", action="store_true", help="include unmatched pairs")
            p.add_argument("--highlight", type=int, nargs=2, default=[1, 3], metavar=("I", "J"))
            p.add_argument("--include-special", action="store_true",
                           help="count [CLS]/[SEP] as language tokens")
            p.add_argument("--nmi-average", choices=["geometric", "arithmetic"], default="geometric")
            p.add_argument("--seed", type=int, default=0)
        else:
            p.add_argument("--index", type=int, default=0)

    p = sub.add_parser("ablate", help="objective ablation over several seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--pairs", type=int, default=32)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", BACKEND)
    try:
        return args.fn(args)
    except (TrainingDiverged, NumericError, FloatingPointError) as e:
        print(f"vlflow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, M.ConfigError, ValueError, OSError) as e:
        print(f"vlflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

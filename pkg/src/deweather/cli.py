"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config
from .data_synth import generate_dataset, load_dataset, make_specs

log = logging.getLogger("deweather")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args.set))
    if args.seed is not None:
        cfg = RunConfig(replace(cfg.data, seed=args.seed), replace(cfg.train, seed=args.seed))
    return cfg


def _splits(args, cfg):
    root = Path(args.data or cfg.data.root)
    return root / "train", root / "test"


def cmd_gen_data(args, cfg: RunConfig) -> None:
    d = cfg.data
    out = Path(args.out or d.root)
    common = dict(size=(d.height, d.width), num_frames=d.num_frames, weathers=d.weathers, density=d.density,
                  inconsistency=d.inconsistency)
    unit = 2**cfg.train.backbone.depth * cfg.train.match.s
    generate_dataset(make_specs(d.num_scenes, d.seed, prefix="train", **common), out / "train", multiple=unit)
    generate_dataset(make_specs(d.test_scenes, d.seed + 1, prefix="test", **common), out / "test", multiple=unit)
    print(f"wrote {d.num_scenes} train and {d.test_scenes} test scenes to {out}")


def cmd_train_clc(args, cfg: RunConfig) -> None:
    from .training import train_constructor

    train_dir, _ = _splits(args, cfg)
    tcfg = replace(cfg.train, stage=args.stage or (cfg.train.stage if cfg.train.stage != "dew" else "csaclc"))
    ckpt = train_constructor(load_dataset(train_dir), tcfg, Path(args.out or "runs"))
    print(ckpt)


def cmd_train_dew(args, cfg: RunConfig) -> None:
    from .training import train_dew

    train_dir, _ = _splits(args, cfg)
    tcfg = replace(cfg.train, stage="dew", supervision=args.supervision or cfg.train.supervision)
    ckpt = train_dew(load_dataset(train_dir), args.constructor, tcfg, Path(args.out or "runs"))
    print(ckpt)


def cmd_eval(args, cfg: RunConfig) -> None:
    from .evaluation import evaluate, summarize

    _, test_dir = _splits(args, cfg)
    scenes = load_dataset(Path(args.scenes) if args.scenes else test_dir)
    records = evaluate(args.ckpt, scenes, args.against, Path(args.out or "eval"), threads=cfg.train.threads)
    for row in summarize(records):
        print(f"{row['group']:>8}  n={row['count']:<3d} PSNR {row['psnr_db']:.3f} dB  SSIM {row['ssim']:.4f}")


def cmd_ablate(args, cfg: RunConfig) -> None:
    from .evaluation import ablate

    train_dir, test_dir = _splits(args, cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    rows = ablate(args.sweep, cfg.train, load_dataset(train_dir), load_dataset(test_dir),
                  Path(args.out or "ablation"), seeds=seeds)
    print(f"{len(rows)} rows -> {Path(args.out or 'ablation') / f'ablation_{args.sweep}.csv'}")


def cmd_plot(args, cfg: RunConfig) -> None:
    from .plotting import plot

    for p in plot(args.csv, Path(args.out or "plots")):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="INI file with [data] [model] [match] [train] [loss]")
    shared.add_argument("--seed", type=int, help="overrides data.seed and train.seed")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deweather", description="Pseudo-label guided de-weathering on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[shared], help="render the synthetic train/test splits")

    q = sub.add_parser("train-clc", parents=[shared], help="train the label constructor")
    q.add_argument("--data", help="dataset root holding train/ and test/")
    q.add_argument("--stage", choices=("clc", "csaclc"))

    q = sub.add_parser("train-dew", parents=[shared], help="train the single-frame model")
    q.add_argument("--data")
    q.add_argument("--constructor", help="constructor checkpoint (not needed for original-only)")
    q.add_argument("--supervision", choices=("joint", "pseudo", "original"))

    q = sub.add_parser("eval", parents=[shared], help="score a checkpoint")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data")
    q.add_argument("--scenes", help="score this dataset directory instead of <data>/test")
    q.add_argument("--against", choices=("oracle", "misaligned_gt"), default="oracle")

    q = sub.add_parser("ablate", parents=[shared], help="run an ablation grid")
    q.add_argument("--sweep", required=True, choices=("supervision", "frames", "padding", "topk", "aggregator"))
    q.add_argument("--data")
    q.add_argument("--seeds", help="comma separated, e.g. 0,1,2")

    q = sub.add_parser("plot", parents=[shared], help="render figures from CSVs")
    q.add_argument("csv", nargs="+")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-clc": cmd_train_clc,
    "train-dew": cmd_train_dew,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: I/O, divergence, ...
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

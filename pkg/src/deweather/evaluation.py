"""Scoring checkpoints against the aligned oracle, summaries and ablation sweeps."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data_synth import Scene
from .metrics import psnr, ssim
from .models import load_checkpoint
from .training import TrainConfig, collate, from_model, numeric_mode, train_constructor, train_dew

log = logging.getLogger(__name__)

AGAINST = ("oracle", "misaligned_gt")
SWEEPS = {
    "supervision": ("original", "pseudo", "joint"),
    "frames": (1, 3, 5),
    "padding": (0, 1, 3),
    "topk": (1, 2, 3),
    "aggregator": ("gat", "mean"),
}
ABLATION_FIELDS = ("sweep", "value", "seed", "constructor_psnr", "constructor_ssim", "dew_psnr", "dew_ssim")


class EvalConfigError(ValueError):
    pass


@dataclass
class MetricsRecord:
    scene_id: str
    weather: str
    psnr_db: float
    ssim: float
    against: str


def _window_n(model) -> int:
    if model.kind == "csaclc":
        return model.match.n
    if model.kind == "clc":
        return (model.num_frames - 1) // 2
    return 0


@torch.no_grad()
def predict(model, scene: Scene) -> np.ndarray:
    """Model output for the centre window of a scene, HxWx3 in [0,1]."""
    n = _window_n(model)
    c = len(scene.frames) // 2
    batch = collate([scene.window(c, n)], [scene.scene_id])
    if model.kind == "dew":
        out = model(batch.current).restored
    elif model.kind == "csaclc":
        out, _ = model(batch.frames, batch.gt)
    else:
        out = model(batch.frames)
    return from_model(out)[0]


def score(pred: np.ndarray, scene: Scene, against: str = "oracle") -> MetricsRecord:
    if against not in AGAINST:
        raise EvalConfigError(f"unknown reference {against!r}")
    ref = scene.oracle if against == "oracle" else scene.gt
    return MetricsRecord(scene.scene_id, scene.weather, psnr(pred, ref), ssim(pred, ref), against)


def summarize(records: list[MetricsRecord]) -> list[dict]:
    """Per-weather means followed by the overall mean over all scenes."""
    groups = defaultdict(list)
    for r in records:
        groups[r.weather].append(r)
    rows = []
    for name in sorted(groups):
        rs = groups[name]
        rows.append({"group": name, "count": len(rs), "psnr_db": float(np.mean([r.psnr_db for r in rs])),
                     "ssim": float(np.mean([r.ssim for r in rs]))})
    if records:
        rows.append({"group": "overall", "count": len(records),
                     "psnr_db": float(np.mean([r.psnr_db for r in records])),
                     "ssim": float(np.mean([r.ssim for r in records]))})
    return rows


def _write_csv(path: Path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def evaluate(ckpt, scenes: list[Scene], against: str = "oracle", out_dir=None, threads: int = 1):
    """Score a checkpoint on every scene; optionally write per-scene and summary CSVs."""
    if against not in AGAINST:
        raise EvalConfigError(f"unknown reference {against!r}")
    if not scenes:
        raise EvalConfigError("empty evaluation set")
    with numeric_mode(threads):
        model, _ = load_checkpoint(ckpt)
        records = [score(predict(model, sc), sc, against) for sc in scenes]
    if out_dir is not None:
        out_dir = Path(out_dir)
        _write_csv(out_dir / "metrics.csv", MetricsRecord.__dataclass_fields__, [asdict(r) for r in records])
        _write_csv(out_dir / "summary.csv", ("group", "count", "psnr_db", "ssim"), summarize(records))
    return records


def _mean(records, attr):
    return float(np.mean([getattr(r, attr) for r in records]))


def cell_config(sweep: str, value, base: TrainConfig) -> TrainConfig:
    """Training config for one ablation cell."""
    m = base.match
    if sweep == "supervision":
        return replace(base, supervision=value)
    if sweep == "frames":
        return replace(base, match=replace(m, n=(int(value) - 1) // 2))
    if sweep == "padding":
        return replace(base, match=replace(m, P=int(value)))
    if sweep == "topk":
        return replace(base, match=replace(m, K=int(value)))
    if sweep == "aggregator":
        return replace(base, aggregator=value)
    raise EvalConfigError(f"unknown sweep {sweep!r}")


def ablate(sweep: str, base_cfg: TrainConfig, train_scenes: list[Scene], test_scenes: list[Scene], out_dir,
           seeds=(0,), values=None) -> list[dict]:
    """Run a sweep grid with shared seeds; one CSV row per (value, seed).

    The supervision sweep reuses one constructor per seed across its cells;
    the original-only cell trains no constructor and reports none.
    """
    if sweep not in SWEEPS:
        raise EvalConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    values = tuple(values) if values is not None else SWEEPS[sweep]
    out_dir = Path(out_dir)
    rows = []
    for seed in seeds:
        shared_ckpt = None
        for value in values:
            cfg = replace(cell_config(sweep, value, base_cfg), seed=int(seed))
            cell_dir = out_dir / f"{sweep}_{value}_seed{seed}"
            row = {"sweep": sweep, "value": value, "seed": int(seed), "constructor_psnr": "",
                   "constructor_ssim": "", "dew_psnr": "", "dew_ssim": ""}
            ckpt = None
            if not (sweep == "supervision" and value == "original"):
                if sweep == "supervision" and shared_ckpt is not None:
                    ckpt = shared_ckpt
                else:
                    ckpt = train_constructor(train_scenes, replace(cfg, stage=base_cfg.stage if base_cfg.stage != "dew"
                                                                   else "csaclc"), cell_dir, "constructor")
                    if sweep == "supervision":
                        shared_ckpt = ckpt
                recs = evaluate(ckpt, test_scenes, threads=cfg.threads)
                row.update(constructor_psnr=_mean(recs, "psnr_db"), constructor_ssim=_mean(recs, "ssim"))
            dew_ckpt = train_dew(train_scenes, ckpt, replace(cfg, stage="dew"), cell_dir, "dew")
            recs = evaluate(dew_ckpt, test_scenes, threads=cfg.threads)
            row.update(dew_psnr=_mean(recs, "psnr_db"), dew_ssim=_mean(recs, "ssim"))
            log.info("%s=%s seed=%s: %s", sweep, value, seed, row)
            rows.append(row)
    _write_csv(out_dir / f"ablation_{sweep}.csv", ABLATION_FIELDS, rows)
    return rows


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


"""Two-stage training: constructor first, then De-W with the constructor frozen."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data_synth import FrameWindow, Scene
from .fcm import MatchConfig
from .losses import (
    LossWeights,
    SWContext,
    clc_objective,
    csaclc_objective,
    ias_clc_objective,
    ias_csaclc_objective,
    term_names,
)
from .models import BackboneConfig, build_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("clc", "csaclc", "dew")
SUPERVISION = ("joint", "pseudo", "original")


class TrainConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Path | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    crop: int = 32
    lr_warm_start: float = 5e-5
    lr_peak: float = 2e-4
    lr_floor: float = 1e-6
    warmup_epochs: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    stage: str = "csaclc"
    supervision: str = "joint"
    # De-W objective family when no constructor decides it (original-only runs)
    ias: str = "csaclc"
    weights: LossWeights = field(default_factory=LossWeights)
    match: MatchConfig = field(default_factory=MatchConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregator: str = "gat"
    passes_per_epoch: int = 1
    rotate: bool = True
    flip: bool = True
    sw_projections: int = 32
    # max global gradient norm; 0 disables clipping
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise TrainConfigError(f"unknown stage {self.stage!r}")
        if self.supervision not in SUPERVISION:
            raise TrainConfigError(f"unknown supervision {self.supervision!r}")
        if self.ias not in ("clc", "csaclc"):
            raise TrainConfigError(f"unknown IAS objective {self.ias!r}")
        if not self.lr_warm_start <= self.lr_peak:
            raise TrainConfigError("lr_warm_start must not exceed lr_peak")
        if not self.lr_floor <= self.lr_peak:
            raise TrainConfigError("lr_floor must not exceed lr_peak")
        unit = 2**self.backbone.depth * self.match.s
        if self.crop % unit:
            raise TrainConfigError(f"crop {self.crop} not divisible by 2**depth * s = {unit}")
        if self.epochs < 1 or self.batch_size < 2:
            raise TrainConfigError("need epochs >= 1 and batch_size >= 2")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Published settings: 256 crops, batch 8, 3x3 query patches."""
        kw.setdefault("match", MatchConfig(s=3, P=3, K=3, n=1))
        kw.setdefault("backbone", BackboneConfig(base_channels=32, depth=3))
        return cls(crop=kw.pop("crop", 264), batch_size=kw.pop("batch_size", 8), **kw)


# --------------------------------------------------------------------------
# schedule


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak, then cosine decay reaching the floor at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    last = cfg.epochs * steps_per_epoch - 1
    if warm > 0 and step <= warm:
        return cfg.lr_warm_start + (cfg.lr_peak - cfg.lr_warm_start) * step / warm
    if last <= warm:
        return cfg.lr_floor
    progress = min(1.0, (step - warm) / (last - warm))
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# data plumbing


def augment(window: FrameWindow, crop: int, rng: np.random.Generator, rotate: bool = True,
            flip: bool = True) -> FrameWindow:
    """Same crop, 90-degree rotation and horizontal flip for every image of the window."""
    h, w = window.gt_misaligned.shape[:2]
    if crop > h or crop > w:
        raise TrainConfigError(f"crop {crop} larger than image {h}x{w}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    k = int(rng.integers(0, 4)) if rotate else 0
    do_flip = bool(rng.integers(0, 2)) if flip else False

    def tf(img):
        out = np.rot90(img[y:y + crop, x:x + crop], k, axes=(0, 1))
        return np.ascontiguousarray(out[:, ::-1] if do_flip else out)

    return FrameWindow([tf(f) for f in window.frames], tf(window.gt_misaligned), tf(window.gt_aligned_oracle),
                       list(window.timestamps))


def to_model(imgs) -> torch.Tensor:
    """Stack HxWx3 images in [0,1] into a (B,3,H,W) float tensor in [-1,1]."""
    arr = np.stack(imgs).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2.0 - 1.0


def from_model(t: torch.Tensor) -> np.ndarray:
    """(B,3,H,W) in [-1,1] -> (B,H,W,3) float64 in [0,1]."""
    return ((t.detach().double().clamp(-1, 1) + 1.0) / 2.0).permute(0, 2, 3, 1).numpy()


@dataclass
class Batch:
    frames: list  # 2n+1 tensors (B,3,H,W)
    gt: torch.Tensor
    oracle: torch.Tensor
    scene_ids: list

    @property
    def current(self) -> torch.Tensor:
        return self.frames[len(self.frames) // 2]


def collate(windows: list[FrameWindow], scene_ids: list[str]) -> Batch:
    nf = len(windows[0].frames)
    frames = [to_model([w.frames[i] for w in windows]) for i in range(nf)]
    return Batch(frames, to_model([w.gt_misaligned for w in windows]),
                 to_model([w.gt_aligned_oracle for w in windows]), scene_ids)


class WindowSampler:
    """Batches of windows with distinct scenes in every batch.

    One pass visits each scene once, at a random valid window centre; a
    trailing batch with a single scene is dropped (the contrastive term needs
    two).
    """

    def __init__(self, scenes: list[Scene], n: int, cfg: TrainConfig):
        if not scenes:
            raise TrainConfigError("empty training set")
        if len(scenes) < 2:
            raise TrainConfigError("need at least two scenes per batch")
        self.scenes = scenes
        self.n = n
        self.cfg = cfg
        for sc in scenes:
            if len(sc.frames) < 2 * n + 1:
                raise TrainConfigError(f"scene {sc.scene_id} has {len(sc.frames)} frames, window needs {2 * n + 1}")

    def _chunks(self, order):
        b = self.cfg.batch_size
        out = [order[i:i + b] for i in range(0, len(order), b)]
        return [c for c in out if len(c) >= 2]

    @property
    def steps_per_epoch(self) -> int:
        return len(self._chunks(list(range(len(self.scenes))))) * self.cfg.passes_per_epoch

    def epoch(self, rng: np.random.Generator):
        for _ in range(self.cfg.passes_per_epoch):
            order = [int(i) for i in rng.permutation(len(self.scenes))]
            for chunk in self._chunks(order):
                wins, ids = [], []
                for i in chunk:
                    sc = self.scenes[i]
                    c = int(rng.integers(self.n, len(sc.frames) - self.n))
                    wins.append(augment(sc.window(c, self.n), self.cfg.crop, rng, self.cfg.rotate, self.cfg.flip))
                    ids.append(sc.scene_id)
                yield collate(wins, ids)


@contextmanager
def numeric_mode(threads: int):
    """Deterministic kernels and a fixed thread count for the duration of a run."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


class _CurveWriter:
    def __init__(self, path: Path, names):
        self.path = path
        self.names = list(names)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(["step", "lr", *self.names, "total"])

    def write(self, step, lr, values: dict):
        self.writer.writerow([step, f"{lr:.10g}", *[f"{values[k]:.10g}" for k in self.names],
                              f"{values['total']:.10g}"])

    def close(self):
        self.fh.close()


def _run(model, sampler, cfg: TrainConfig, out_dir: Path, name: str, loss_fn, names, extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr_warm_start,
                           betas=(cfg.adam_beta1, cfg.adam_beta2))
    spe = sampler.steps_per_epoch
    curve = _CurveWriter(out_dir / f"{name}_loss.csv", names)
    last_good = None
    step = 0
    final = out_dir / f"{name}.pt"
    try:
        for epoch in range(cfg.epochs):
            model.train()
            for batch in sampler.epoch(rng):
                lr = lr_schedule(step, spe, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                report = loss_fn(model, batch, step)
                if not torch.isfinite(report.total):
                    raise TrainingDiverged(step, last_good)
                opt.zero_grad(set_to_none=True)
                report.total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                curve.write(step, lr, report.floats())
                step += 1
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(out_dir / f"{name}_epoch{epoch + 1:04d}.pt", model,
                                            dict(extra, epoch=epoch + 1, step=step))
    finally:
        curve.close()
    model.eval()
    return save_checkpoint(final, model, dict(extra, epoch=cfg.epochs, step=step))


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train_constructor(scenes: list[Scene], cfg: TrainConfig, out_dir, name: str | None = None) -> Path:
    """Fit CLC or CSA-CLC to the misaligned labels; returns the final checkpoint path."""
    if cfg.stage not in ("clc", "csaclc"):
        raise TrainConfigError(f"train_constructor needs stage clc or csaclc, got {cfg.stage!r}")
    with numeric_mode(cfg.threads):
        _seed_everything(cfg.seed)
        model = build_model(cfg.stage, cfg.backbone, cfg.match, cfg.aggregator)
        sampler = WindowSampler(scenes, cfg.match.n, cfg)
        tau = cfg.weights.tau

        if cfg.stage == "clc":
            def loss_fn(m, batch, step):
                return clc_objective(m(batch.frames), batch.gt)
        else:
            def loss_fn(m, batch, step):
                pseudo, _ = m(batch.frames, batch.gt)
                return csaclc_objective(pseudo, batch.gt, (batch.current, batch.gt), m.encode, tau)

        extra = {"stage": cfg.stage, "seed": cfg.seed}
        return _run(model, sampler, cfg, Path(out_dir), name or cfg.stage, loss_fn, term_names(cfg.stage), extra)


def dew_weights(cfg: TrainConfig) -> LossWeights:
    """Loss toggles implied by the supervision setting."""
    w = cfg.weights
    if cfg.supervision == "pseudo":
        return replace(w, use_original=False, use_distill=False)
    if cfg.supervision == "original":
        # image term falls back to the original label, no constructor involved
        return replace(w, use_distill=False)
    return w


def train_dew(scenes: list[Scene], constructor_ckpt, cfg: TrainConfig, out_dir, name: str = "dew") -> Path:
    """Train the single-frame model under joint / pseudo-only / original-only supervision."""
    if cfg.supervision in ("joint", "pseudo") and constructor_ckpt is None:
        raise TrainConfigError(f"supervision {cfg.supervision!r} needs a constructor checkpoint")
    with numeric_mode(cfg.threads):
        _seed_everything(cfg.seed)
        constructor = None
        ias = cfg.ias
        n = cfg.match.n
        if constructor_ckpt is not None and cfg.supervision != "original":
            constructor, meta = load_checkpoint(constructor_ckpt)
            constructor.requires_grad_(False)
            constructor.eval()
            ias = meta["kind"]
            n = constructor.match.n if meta["kind"] == "csaclc" else (constructor.num_frames - 1) // 2
        if cfg.supervision == "original":
            n = 0
        w = dew_weights(cfg)
        model = build_model("dew", cfg.backbone)
        sampler = WindowSampler(scenes, n, cfg)
        sw_ctx = SWContext(n_proj=cfg.sw_projections, seed=cfg.seed)

        def targets(batch):
            if constructor is None:
                return batch.gt, None
            with torch.no_grad():
                if constructor.kind == "csaclc":
                    return constructor(batch.frames, batch.gt)
                return constructor(batch.frames), None

        def loss_fn(m, batch, step):
            pseudo, f_agg = targets(batch)
            out = m(batch.current)
            pairs = (out.restored, batch.gt)
            if ias == "clc":
                return ias_clc_objective(out.restored, pseudo, batch.gt, pairs, m.encode, sw_ctx, w, step)
            if f_agg is None:
                f_agg = out.bottleneck
            return ias_csaclc_objective(out.restored, pseudo, batch.gt, out.bottleneck, f_agg, pairs, m.encode, w)

        names = term_names("ias_clc" if ias == "clc" else "ias_csaclc", w)
        extra = {"stage": "dew", "supervision": cfg.supervision, "ias": ias, "seed": cfg.seed,
                 "constructor": str(constructor_ckpt) if constructor_ckpt else None}
        return _run(model, sampler, cfg, Path(out_dir), name, loss_fn, names, extra)

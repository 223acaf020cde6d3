"""Small U-Net style networks: multi-encoder CLC, CSA-CLC and single-frame De-W.

Models take and return images in [-1, 1] with layout (B, 3, H, W).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .fcm import MatchConfig, build_graph
from .graph_agg import CSA
from .patchops import GeometryError

CHECKPOINT_FORMAT = "deweather-checkpoint/1"


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 16
    depth: int = 2
    resblocks_per_stage: int = 1
    norm: str = "none"

    def __post_init__(self):
        if self.norm not in ("batch", "none"):
            raise ModelConfigError(f"unknown norm {self.norm!r}")
        if self.depth < 1 or self.base_channels < 1:
            raise ModelConfigError("depth and base_channels must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.depth)

    def bottleneck_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = 2**self.depth
        return self.bottleneck_channels, h // f, w // f

    def check_input(self, h: int, w: int, s: int | None = None) -> None:
        f = 2**self.depth
        if h % f or w % f:
            raise GeometryError(f"input {h}x{w} not divisible by 2**depth={f}")
        if s is not None and ((h // f) % s or (w // f) % s):
            raise GeometryError(f"bottleneck {h // f}x{w // f} not divisible by patch size {s}")


@dataclass
class DewOutput:
    restored: torch.Tensor
    bottleneck: torch.Tensor


def _norm(cfg: BackboneConfig, c: int) -> nn.Module:
    return nn.BatchNorm2d(c) if cfg.norm == "batch" else nn.Identity()


class ConvBlock(nn.Sequential):
    def __init__(self, cfg, c_in, c_out, stride=1):
        super().__init__(nn.Conv2d(c_in, c_out, 3, stride, 1), _norm(cfg, c_out), nn.ReLU(inplace=True))


class ResBlock(nn.Module):
    def __init__(self, cfg, c):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c, c, 3, 1, 1), _norm(cfg, c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, 1, 1), _norm(cfg, c),
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(x + self.body(x))


def _stage(cfg, c_in, c_out, stride):
    return nn.Sequential(ConvBlock(cfg, c_in, c_out, stride), *[ResBlock(cfg, c_out) for _ in range(cfg.resblocks_per_stage)])


class Encoder(nn.Module):
    """Returns features at every level; the last one is the bottleneck."""

    def __init__(self, cfg: BackboneConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.stages = nn.ModuleList([_stage(cfg, in_channels, cfg.channels(0), 1)])
        for i in range(1, cfg.depth + 1):
            self.stages.append(_stage(cfg, cfg.channels(i - 1), cfg.channels(i), 2))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Upsampling path with concatenated skips and a tanh head."""

    def __init__(self, cfg: BackboneConfig, out_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(cfg.depth, 0, -1):
            self.ups.append(nn.ConvTranspose2d(cfg.channels(i), cfg.channels(i - 1), 2, stride=2))
            self.merges.append(_stage(cfg, 2 * cfg.channels(i - 1), cfg.channels(i - 1), 1))
        self.head = nn.Conv2d(cfg.channels(0), out_channels, 3, 1, 1)

    def forward(self, bottleneck: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = bottleneck
        for up, merge, skip in zip(self.ups, self.merges, reversed(skips)):
            x = merge(torch.cat([up(x), skip], dim=1))
        return torch.tanh(self.head(x))


class DeW(nn.Module):
    """Single-frame de-weathering network; exposes its bottleneck as G_t."""

    kind = "dew"

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def forward(self, x: torch.Tensor) -> DewOutput:
        self.cfg.check_input(*x.shape[-2:])
        feats = self.encoder(x)
        return DewOutput(self.decoder(feats[-1], feats[:-1]), feats[-1])

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Flattened bottleneck, the feature used by the rain-robust loss."""
        return self.encoder(x)[-1].flatten(1)


class CLC(nn.Module):
    """Multi-frame constructor with one encoder per input frame."""

    kind = "clc"

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), num_frames: int = 3):
        super().__init__()
        if num_frames < 1:
            raise ModelConfigError("num_frames must be >= 1")
        self.cfg = cfg
        self.num_frames = num_frames
        self.encoders = nn.ModuleList([Encoder(cfg) for _ in range(num_frames)])
        self.fuse = nn.ModuleList([
            nn.Conv2d(num_frames * cfg.channels(i), cfg.channels(i), 1) for i in range(cfg.depth + 1)
        ])
        self.decoder = Decoder(cfg)

    def forward(self, frames: list[torch.Tensor]) -> torch.Tensor:
        if len(frames) != self.num_frames:
            raise ModelConfigError(f"expected {self.num_frames} frames, got {len(frames)}")
        self.cfg.check_input(*frames[0].shape[-2:])
        per_frame = [enc(f) for enc, f in zip(self.encoders, frames)]
        fused = [conv(torch.cat([pf[i] for pf in per_frame], dim=1)) for i, conv in enumerate(self.fuse)]
        return self.decoder(fused[-1], fused[:-1])


class CSACLC(nn.Module):
    """Shared encoder over frames and label, cross-frame aggregation at the bottleneck.

    Decoder skips come from the current frame; the label only enters through
    its bottleneck features, concatenated with the aggregated feature.
    """

    kind = "csaclc"

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), match: MatchConfig = MatchConfig(),
                 aggregator: str = "gat"):
        super().__init__()
        self.cfg = cfg
        self.match = match
        self.encoder = Encoder(cfg)
        self.csa = CSA(cfg.bottleneck_channels, match.s, aggregator)
        c = cfg.bottleneck_channels
        self.fuse = nn.Sequential(nn.Conv2d(2 * c, c, 1), nn.ReLU(inplace=True))
        self.decoder = Decoder(cfg)

    @property
    def num_frames(self) -> int:
        return 2 * self.match.n + 1

    def forward(self, frames: list[torch.Tensor], gt: torch.Tensor):
        if len(frames) != self.num_frames:
            raise ModelConfigError(f"expected {self.num_frames} frames, got {len(frames)}")
        if any(f.shape != gt.shape for f in frames):
            raise GeometryError("frames and label must share a shape")
        self.cfg.check_input(*gt.shape[-2:], s=self.match.s)
        b = gt.shape[0]
        # one pass of the shared encoder over every frame and the label
        feats = self.encoder(torch.cat([*frames, gt], dim=0))
        levels = [f.split(b, dim=0) for f in feats]
        n = self.match.n
        f_seq = list(levels[-1][:-1])
        f_gt = levels[-1][-1]
        graph = build_graph(f_seq, self.match)
        f_agg = self.csa(f_seq, graph).F_agg
        fused = self.fuse(torch.cat([f_agg, f_gt], dim=1))
        skips = [lvl[n] for lvl in levels[:-1]]
        return self.decoder(fused, skips), f_agg

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)[-1].flatten(1)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(kind: str, cfg: BackboneConfig, match: MatchConfig | None = None, aggregator: str = "gat"):
    match = match or MatchConfig()
    if kind == "dew":
        return DeW(cfg)
    if kind == "clc":
        return CLC(cfg, 2 * match.n + 1)
    if kind == "csaclc":
        return CSACLC(cfg, match, aggregator)
    raise ModelConfigError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model: nn.Module, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: named tensors plus the configs used."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "backbone": asdict(model.cfg),
        "match": asdict(getattr(model, "match", MatchConfig(n=(getattr(model, "num_frames", 3) - 1) // 2))),
        "aggregator": getattr(getattr(model, "csa", None), "aggregator", None),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    cfg = BackboneConfig(**payload["backbone"])
    match = MatchConfig(**payload["match"])
    model = build_model(payload["kind"], cfg, match, payload.get("aggregator") or "gat")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload

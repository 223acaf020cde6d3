"""Patch extraction/reassembly, cosine similarity and a frozen feature extractor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F


class GeometryError(ValueError):
    """Window does not fit the feature map, or a layout is unsupported."""


@dataclass
class PatchSet:
    """Flattened s x s windows of a feature map.

    ``patches`` has shape (..., N, C*s*s); each row is the window flattened
    channel-major, then by row, then by column (the layout of ``F.unfold``).
    Rows are ordered by the raster order of the window origins.
    """

    patches: torch.Tensor
    grid: tuple[int, int]
    s: int
    stride: int
    source_shape: tuple[int, int, int]

    @property
    def n(self) -> int:
        return self.grid[0] * self.grid[1]

    def origins(self) -> list[tuple[int, int]]:
        return [(r * self.stride, c * self.stride) for r in range(self.grid[0]) for c in range(self.grid[1])]


def grid_shape(h: int, w: int, s: int, stride: int) -> tuple[int, int]:
    return (h - s) // stride + 1, (w - s) // stride + 1


def unfold(feat: torch.Tensor, s: int, stride: int) -> PatchSet:
    """Sliding-window patches of a (C,H,W) or (B,C,H,W) map."""
    if stride < 1 or s < 1:
        raise GeometryError(f"patch size and stride must be >= 1 (s={s}, stride={stride})")
    batched = feat.dim() == 4
    x = feat if batched else feat.unsqueeze(0)
    c, h, w = x.shape[1:]
    if s > h or s > w:
        raise GeometryError(f"patch size {s} exceeds feature map {h}x{w}")
    cols = F.unfold(x, kernel_size=s, stride=stride).transpose(1, 2)
    if not batched:
        cols = cols[0]
    return PatchSet(cols, grid_shape(h, w, s, stride), s, stride, (c, h, w))


def fold(p: PatchSet) -> torch.Tensor:
    """Inverse of ``unfold`` for non-overlapping windows (stride == s)."""
    if p.stride != p.s:
        raise GeometryError(f"fold needs stride == s, got stride={p.stride}, s={p.s}")
    batched = p.patches.dim() == 3
    x = p.patches if batched else p.patches.unsqueeze(0)
    c, h, w = p.source_shape
    if x.shape[-1] != c * p.s * p.s or x.shape[-2] != p.n:
        raise GeometryError(f"patch matrix {tuple(x.shape[-2:])} does not match grid {p.grid} x {c * p.s * p.s}")
    out = F.fold(x.transpose(1, 2), output_size=(h, w), kernel_size=p.s, stride=p.s)
    return out if batched else out[0]


def cosine_sim(a, b, *, with_flag: bool = False):
    """Cosine similarity of two vectors.

    A zero-norm argument gives 0.0; with ``with_flag=True`` the return value
    is ``(sim, degenerate)`` so callers can tell that case apart.
    """
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    degenerate = bool(na == 0 or nb == 0)
    sim = 0.0 if degenerate else float(torch.clamp(a @ b / (na * nb), -1.0, 1.0))
    return (sim, degenerate) if with_flag else sim


def _unit(x: torch.Tensor) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.where(n > 0, n, torch.ones_like(n))


def pairwise_cosine(q: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """(..., N, D) x (..., M, D) -> (..., N, M); zero vectors score 0."""
    return (_unit(q) @ _unit(c).transpose(-1, -2)).clamp(-1.0, 1.0)


# --------------------------------------------------------------------------
# frozen extractor for the sliced Wasserstein loss

FeatureExtractor = Callable[[torch.Tensor], torch.Tensor]


class RandomConvExtractor(nn.Module):
    """Three frozen stride-2 3x3 convolutions with LeakyReLU after each.

    Stand-in for a pretrained VGG19 trunk; anything mapping (B,3,H,W) to
    (B,C,H',W') can be used in its place.
    """

    def __init__(self, channels=(16, 32, 32), seed: int = 0, in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = in_channels
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            bound = math.sqrt(6.0 / (c_in * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.copy_(torch.empty_like(conv.bias).uniform_(-0.1, 0.1, generator=gen))
            layers += [conv, nn.LeakyReLU(0.2)]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.channels = tuple(channels)
        self.requires_grad_(False)
        self.eval()

    def output_signature(self, h: int, w: int) -> tuple[int, int, int]:
        for _ in self.channels:
            h, w = (h + 1) // 2, (w + 1) // 2
        return self.channels[-1], h, w

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.body(img.to(self.body[0].weight.dtype))


def sw_features(img: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Features for the SW loss; accepts (3,H,W) or (B,3,H,W)."""
    if img.dim() == 3:
        return extractor(img.unsqueeze(0))[0]
    return extractor(img)


def random_projection(c_out: int, c_in: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    """C' x C matrix of Gaussian directions normalised to unit rows."""
    gen = torch.Generator().manual_seed(int(seed))
    m = torch.randn(c_out, c_in, generator=gen, dtype=torch.float64)
    return (m / torch.linalg.vector_norm(m, dim=1, keepdim=True)).to(dtype)

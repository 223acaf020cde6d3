"""PSNR, SSIM and MS-SSIM on torch tensors (differentiable) and numpy images."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
# Wang et al. scale weights; truncated sets are renormalised to sum to 1
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class InvalidInputError(ValueError):
    pass


def _as_batch(x) -> torch.Tensor:
    """HxWx3 numpy / (C,H,W) / (B,C,H,W) -> (B,C,H,W) tensor."""
    if isinstance(x, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
        if t.dim() == 3:
            t = t.permute(2, 0, 1)
        elif t.dim() == 2:
            t = t.unsqueeze(0)
        x = t
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise InvalidInputError(f"expected an image, got shape {tuple(x.shape)}")
    return x


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _as_batch(a).double(), _as_batch(b).double()
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode Gaussian filter, channels independent
    c = x.shape[1]
    kh = win.to(x.dtype).view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    kw = win.to(x.dtype).view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kh, groups=c), kw, groups=c)


def ssim_components(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor, data_range: float,
                    k1: float = 0.01, k2: float = 0.03):
    """Per-(batch, channel) mean SSIM and contrast-structure terms."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    saa = _filter(a * a, win) - mu_a**2
    sbb = _filter(b * b, win) - mu_b**2
    sab = _filter(a * b, win) - mu_a * mu_b
    cs = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM, Gaussian window, averaged over channels and pixels."""
    return float(ssim_tensor(_as_batch(a).double(), _as_batch(b).double(), data_range, win_size, sigma))


def ssim_tensor(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0, win_size: int = 11,
                sigma: float = 1.5) -> torch.Tensor:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < win_size:
        raise InvalidInputError(f"image {tuple(a.shape[-2:])} smaller than the {win_size}-tap window")
    s, _ = ssim_components(a, b, gaussian_window(win_size, sigma), data_range)
    return s.mean()


def ms_ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0, scales: int = 3,
            win_size: int = 7, sigma: float = 1.5) -> torch.Tensor:
    """Multi-scale SSIM with 2x average-pool downsampling between scales.

    Per-scale terms are clamped below at 1e-6 before the fractional powers so
    gradients stay finite.
    """
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    smallest = min(a.shape[-2:]) // 2 ** (scales - 1)
    if smallest < win_size:
        raise InvalidInputError(
            f"image {tuple(a.shape[-2:])} too small for {scales} scales with a {win_size}-tap window")
    w = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=a.dtype)
    w = w / w.sum()
    win = gaussian_window(win_size, sigma, a.dtype)
    terms = []
    for j in range(scales):
        s, cs = ssim_components(a, b, win, data_range)
        if j < scales - 1:
            terms.append(cs.clamp_min(1e-6))
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        else:
            terms.append(s.clamp_min(1e-6))
    stacked = torch.stack(terms, dim=0)  # (scales, B, C)
    val = torch.prod(stacked ** w.view(-1, 1, 1), dim=0)
    return val.mean()

"""Supervision terms and the composite constructor / de-weathering objectives.

All image-space losses expect tensors in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .metrics import InvalidInputError, ms_ssim
from .patchops import RandomConvExtractor, random_projection, sw_features

Encoder = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    tau: float = 0.25
    lambda1: float = 0.1
    lambda2: float = 0.08
    lambda_o: float = 0.25
    lambda_d: float = 0.01
    # term toggles for the supervision ablation
    use_pseudo: bool = True
    use_original: bool = True
    use_distill: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass
class LossReport:
    """Unweighted terms, their weights, and the weighted total (a tensor)."""

    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @classmethod
    def combine(cls, terms: dict, weights: dict) -> "LossReport":
        if not terms:
            raise ValueError("no loss terms enabled")
        total = sum(weights[k] * v for k, v in terms.items())
        return cls(total, terms, weights)

    def floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return (a - b).abs().mean()


def ms_ssim_loss(a: torch.Tensor, b: torch.Tensor, **kw) -> torch.Tensor:
    _check_same(a, b)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return 1.0 - ms_ssim(a, b, **kw)


# --------------------------------------------------------------------------
# sliced Wasserstein


def sliced_wasserstein(u: torch.Tensor, v: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Mean |sort(M U) - sort(M V)| over projections and positions.

    ``u``, ``v`` are (C,H,W) or (B,C,H,W) features; ``proj`` is C' x C.
    """
    _check_same(u, v)
    if u.dim() == 3:
        u, v = u.unsqueeze(0), v.unsqueeze(0)
    b, c = u.shape[:2]
    if proj.shape[1] != c:
        raise InvalidInputError(f"projection expects {proj.shape[1]} channels, features have {c}")
    proj = proj.to(u.dtype)
    up = proj @ u.reshape(b, c, -1)
    vp = proj @ v.reshape(b, c, -1)
    us, _ = torch.sort(up, dim=-1)
    vs, _ = torch.sort(vp, dim=-1)
    return (us - vs).abs().mean()


def sw_loss(out: torch.Tensor, target: torch.Tensor, extractor, proj: torch.Tensor) -> torch.Tensor:
    _check_same(out, target)
    return sliced_wasserstein(sw_features(out, extractor), sw_features(target, extractor), proj)


@dataclass
class SWContext:
    """Extractor plus projection policy; projections are redrawn per step unless frozen."""

    extractor: torch.nn.Module = field(default_factory=RandomConvExtractor)
    n_proj: int = 32
    seed: int = 0
    frozen: bool = False

    def projection(self, step: int = 0, dtype=torch.float32) -> torch.Tensor:
        c = self.extractor.channels[-1]
        return random_projection(self.n_proj, c, self.seed if self.frozen else self.seed + 7919 * step, dtype)

    def __call__(self, out: torch.Tensor, target: torch.Tensor, step: int = 0) -> torch.Tensor:
        return sw_loss(out, target, self.extractor, self.projection(step, out.dtype))


# --------------------------------------------------------------------------
# rain-robust contrastive loss


def info_nce_pairs(u: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE over N positive pairs (u_i, v_i).

    The denominator for anchor u_i sums exp(sim/tau) over u_j and v_j for
    every j != i (the positive itself is not in the denominator); the v_i
    anchor is symmetric. Returns sum_i (L_VU_i + L_UV_i) / N.
    """
    if u.shape != v.shape:
        raise InvalidInputError(f"feature shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")
    n = u.shape[0]
    if n < 2:
        raise InvalidInputError("rain-robust loss needs at least 2 pairs")
    u = F.normalize(u.reshape(n, -1), dim=1)
    v = F.normalize(v.reshape(n, -1), dim=1)
    suu, suv, svv = u @ u.T / tau, u @ v.T / tau, v @ v.T / tau
    pos = torch.diagonal(suv)
    off = ~torch.eye(n, dtype=torch.bool, device=u.device)
    neg_inf = torch.finfo(u.dtype).min

    def _lse(*blocks):
        stacked = torch.cat([blk.masked_fill(~off, neg_inf) for blk in blocks], dim=1)
        return torch.logsumexp(stacked, dim=1)

    l_vu = _lse(suu, suv) - pos
    l_uv = _lse(suv.T, svv) - pos
    return (l_vu + l_uv).sum() / n


def rain_robust_loss(pairs, encoder: Encoder, tau: float = 0.25) -> torch.Tensor:
    """Contrastive loss between encodings of degraded and clean images.

    ``pairs`` is either a sequence of (degraded, clean) images or a tuple of
    two batched tensors (N,3,H,W).
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and torch.is_tensor(pairs[0]) and pairs[0].dim() == 4:
        degraded, clean = pairs
    else:
        pairs = list(pairs)
        if len(pairs) < 2:
            raise InvalidInputError("rain-robust loss needs at least 2 pairs")
        degraded = torch.stack([p[0] for p in pairs])
        clean = torch.stack([p[1] for p in pairs])
    return info_nce_pairs(encoder(degraded), encoder(clean), tau)


# --------------------------------------------------------------------------
# distillation


def distill_loss(g_t: torch.Tensor, f_agg: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 (beta=1) pulling g_t towards a constant copy of f_agg."""
    _check_same(g_t, f_agg)
    return F.smooth_l1_loss(g_t, f_agg.detach(), beta=1.0)


# --------------------------------------------------------------------------
# composite objectives


def clc_objective(pseudo: torch.Tensor, gt: torch.Tensor) -> LossReport:
    return LossReport.combine(
        {"l1": l1_loss(pseudo, gt), "msssim": ms_ssim_loss(pseudo, gt)},
        {"l1": 1.0, "msssim": 1.0},
    )


def csaclc_objective(pseudo, gt, batch_pairs, encoder: Encoder, tau: float = 0.25) -> LossReport:
    base = clc_objective(pseudo, gt)
    terms = dict(base.terms, rain_robust=rain_robust_loss(batch_pairs, encoder, tau))
    return LossReport.combine(terms, dict(base.weights, rain_robust=1.0))


def ias_clc_objective(out, pseudo, gt, batch_pairs, encoder: Encoder, sw_ctx: SWContext,
                      w: LossWeights, step: int = 0) -> LossReport:
    """L1 to the pseudo-label plus lambda1 * (rain-robust + lambda2 * SW to the label)."""
    terms, weights = {}, {}
    if w.use_pseudo:
        terms["l1_pse"], weights["l1_pse"] = l1_loss(out, pseudo), 1.0
    if w.use_original:
        terms["rain_robust"], weights["rain_robust"] = rain_robust_loss(batch_pairs, encoder, w.tau), w.lambda1
        terms["sw"], weights["sw"] = sw_ctx(out, gt, step), w.lambda1 * w.lambda2
    return LossReport.combine(terms, weights)


def ias_csaclc_objective(out, pseudo, gt, g_t, f_agg, batch_pairs, encoder: Encoder,
                         w: LossWeights) -> LossReport:
    """Pseudo term (L1 + MS-SSIM), lambda_o * original term, lambda_d * distillation."""
    terms, weights = {}, {}
    if w.use_pseudo:
        terms["l1_pse"] = l1_loss(out, pseudo)
        terms["msssim_pse"] = ms_ssim_loss(out, pseudo)
        weights.update(l1_pse=1.0, msssim_pse=1.0)
    if w.use_original:
        terms["rain_robust"] = rain_robust_loss(batch_pairs, encoder, w.tau)
        terms["msssim_ori"] = ms_ssim_loss(out, gt)
        weights.update(rain_robust=w.lambda_o, msssim_ori=w.lambda_o)
    if w.use_distill:
        terms["distill"], weights["distill"] = distill_loss(g_t, f_agg), w.lambda_d
    return LossReport.combine(terms, weights)


def term_names(kind: str, w: LossWeights | None = None) -> Sequence[str]:
    """Column order used in loss-curve CSVs."""
    w = w or LossWeights()
    if kind == "clc":
        return ["l1", "msssim"]
    if kind == "csaclc":
        return ["l1", "msssim", "rain_robust"]
    if kind == "ias_clc":
        return (["l1_pse"] if w.use_pseudo else []) + (["rain_robust", "sw"] if w.use_original else [])
    names = []
    if w.use_pseudo:
        names += ["l1_pse", "msssim_pse"]
    if w.use_original:
        names += ["rain_robust", "msssim_ori"]
    if w.use_distill:
        names += ["distill"]
    return names

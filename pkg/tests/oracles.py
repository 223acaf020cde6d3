"""Independent reference implementations used by the tests.

Everything here is written with plain loops / numpy / scipy so it shares no
code path with the package under test.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage


# ---------------------------------------------------------------- matching


def brute_force_match(f_seq: np.ndarray, s: int, P: int, K: int):
    """Exhaustive top-K search.

    f_seq: (2n+1, C, H, W). Returns (indices, sims), each (N, K), for the
    non-overlapping query windows of the centre map in raster order. Pool
    index = slot * G + raster origin index; ties go to the lower index.
    """
    T, C, H, W = f_seq.shape
    n = T // 2
    gh, gw = H - s + 1, W - s + 1
    G = gh * gw
    slots = [n + o for o in range(-n, n + 1) if o != 0] if n else [n]

    def window(t, r, c):
        return f_seq[t, :, r:r + s, c:c + s].reshape(-1)

    def cos(a, b):
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na == 0 or nb == 0:
            return 0.0
        return max(-1.0, min(1.0, float(a @ b) / (na * nb)))

    all_idx, all_sim = [], []
    for qr in range(0, H - s + 1, s):
        for qc in range(0, W - s + 1, s):
            q = window(n, qr, qc)
            cands = []
            for slot_i, t in enumerate(slots):
                for r in range(gh):
                    for c in range(gw):
                        if abs(r - qr) > P or abs(c - qc) > P:
                            continue
                        if n == 0 and (r, c) == (qr, qc):
                            continue
                        cands.append((cos(q, window(t, r, c)), slot_i * G + r * gw + c))
            if len(cands) < K:
                raise ValueError("not enough candidates")
            cands.sort(key=lambda x: (-x[0], x[1]))
            all_idx.append([i for _, i in cands[:K]])
            all_sim.append([v for v, _ in cands[:K]])
    return np.array(all_idx), np.array(all_sim)


# ---------------------------------------------------------------- Wasserstein


def w1_empirical(x: np.ndarray, y: np.ndarray) -> float:
    """W1 between two equal-size empirical 1-D distributions via the CDF integral."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    pts = np.sort(np.concatenate([x, y]))
    deltas = np.diff(pts)
    fx = np.searchsorted(np.sort(x), pts[:-1], side="right") / len(x)
    fy = np.searchsorted(np.sort(y), pts[:-1], side="right") / len(y)
    return float(np.sum(np.abs(fx - fy) * deltas))


# ---------------------------------------------------------------- contrastive


def rain_robust_loop(u: np.ndarray, v: np.ndarray, tau: float) -> float:
    """Direct double loop over the InfoNCE definition, symmetric, averaged over pairs."""
    n = len(u)
    u = [x / np.linalg.norm(x) for x in u.reshape(n, -1)]
    v = [x / np.linalg.norm(x) for x in v.reshape(n, -1)]
    total = 0.0
    for i in range(n):
        pos = math.exp(float(u[i] @ v[i]) / tau)
        den_u = sum(math.exp(float(u[i] @ u[j]) / tau) + math.exp(float(u[i] @ v[j]) / tau)
                    for j in range(n) if j != i)
        den_v = sum(math.exp(float(v[i] @ v[j]) / tau) + math.exp(float(v[i] @ u[j]) / tau)
                    for j in range(n) if j != i)
        total += -math.log(pos / den_u) - math.log(pos / den_v)
    return total / n


# ---------------------------------------------------------------- MS-SSIM


def _gauss(size, sigma):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _valid_filter(img, g):
    # correlate then crop to the fully-overlapping region
    k = len(g)
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    h = k // 2
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_maps(a, b, data_range, win=7, sigma=1.5, k1=0.01, k2=0.03):
    g = _gauss(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    ma, mb = _valid_filter(a, g), _valid_filter(b, g)
    vaa = _valid_filter(a * a, g) - ma**2
    vbb = _valid_filter(b * b, g) - mb**2
    vab = _valid_filter(a * b, g) - ma * mb
    cs = (2 * vab + c2) / (vaa + vbb + c2)
    lum = (2 * ma * mb + c1) / (ma**2 + mb**2 + c1)
    return (lum * cs).mean(), cs.mean()


def ms_ssim_numpy(a: np.ndarray, b: np.ndarray, data_range=2.0, scales=3, win=7, sigma=1.5) -> float:
    """a, b: (C, H, W). Channel-wise MS-SSIM averaged over channels."""
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333][:scales])
    weights = weights / weights.sum()
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch].astype(float), b[ch].astype(float)
        prod = 1.0
        for j in range(scales):
            s, cs = ssim_maps(x, y, data_range, win, sigma)
            term = s if j == scales - 1 else cs
            prod *= max(term, 1e-6) ** weights[j]
            h, w = x.shape
            x = x[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            y = y[: h // 2 * 2, : w // 2 * 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        vals.append(prod)
    return float(np.mean(vals))


# ---------------------------------------------------------------- gradients


def finite_difference_check(fn, x, eps=1e-6, idx=None):
    """Max relative error between autograd and central differences.

    ``fn`` maps a float64 tensor to a scalar tensor; ``idx`` limits the
    perturbed coordinates (flat indices).
    """
    import torch

    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().reshape(-1).clone()
    flat = x.detach().reshape(-1)
    coords = range(flat.numel()) if idx is None else idx
    worst = 0.0
    for i in coords:
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        with torch.no_grad():
            num = (float(fn(xp.reshape(x.shape))) - float(fn(xm.reshape(x.shape)))) / (2 * eps)
        a = float(analytic[i])
        err = abs(a - num) / max(1e-6, abs(a) + abs(num))
        worst = max(worst, err)
    return worst

"""Flexible cross-frame matching.

For every non-overlapping query window of the current frame's features,
candidate windows (stride 1) are taken from a (2P+1)^2 neighbourhood of
origins in each adjacent frame, ranked by cosine similarity, and the top K
become the query's in-neighbours.

Candidates live in a per-batch pool indexed ``slot * G + raster`` where
``slot`` enumerates the adjacent frames in ascending time offset and
``raster`` is the row-major index of the window origin in the stride-1 grid
(G origins per frame). Ties in similarity are broken by ascending pool
index, i.e. earlier frame first, then raster order.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .patchops import GeometryError, PatchSet, grid_shape, pairwise_cosine, unfold


class MatchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MatchConfig:
    s: int = 2
    P: int = 3
    K: int = 3
    n: int = 1

    def __post_init__(self):
        if self.s < 1:
            raise MatchConfigError(f"patch size must be >= 1, got {self.s}")
        if self.P < 0:
            raise MatchConfigError(f"P must be >= 0, got {self.P}")
        if self.K < 1:
            raise MatchConfigError(f"K must be >= 1, got {self.K}")
        if self.n < 0:
            raise MatchConfigError(f"n must be >= 0, got {self.n}")

    def max_candidates(self) -> int:
        """M for an interior query."""
        per_frame = (2 * self.P + 1) ** 2
        if self.n == 0:
            return per_frame - 1
        return 2 * self.n * per_frame


@dataclass
class PatchGraphSet:
    """One star graph per query; edges point neighbour -> query.

    Shapes carry a leading batch axis: queries (B,N,D), neighbors (B,N,K,D),
    sims/indices (B,N,K). ``frame_offsets`` maps pool slot -> time offset.
    """

    queries: torch.Tensor
    neighbors: torch.Tensor
    sims: torch.Tensor
    indices: torch.Tensor
    query_grid: tuple[int, int]
    s: int
    source_shape: tuple[int, int, int]
    frame_offsets: tuple[int, ...]
    cand_grid: tuple[int, int]

    @property
    def K(self) -> int:
        return self.neighbors.shape[-2]

    @property
    def N(self) -> int:
        return self.queries.shape[-2]

    def edges(self, b: int = 0) -> list[tuple[tuple[int, int], int]]:
        """Directed edges ((frame_offset, raster index), query index) for batch item b."""
        g = self.cand_grid[0] * self.cand_grid[1]
        out = []
        for i in range(self.N):
            for k in range(self.K):
                idx = int(self.indices[b, i, k])
                out.append(((self.frame_offsets[idx // g], idx % g), i))
        return out

    def batch_view(self) -> torch.Tensor:
        """Neighbours laid out as (B, K, N, D), the batching used by the aggregator."""
        return self.neighbors.permute(0, 2, 1, 3)

    def query_patchset(self, values: torch.Tensor) -> PatchSet:
        return PatchSet(values, self.query_grid, self.s, self.s, self.source_shape)


def candidate_origins(origin: tuple[int, int], grid: tuple[int, int], P: int) -> list[tuple[int, int]]:
    """Stride-1 window origins within +-P of ``origin``, clamped to the grid."""
    r, c = origin
    rows = range(max(0, r - P), min(grid[0] - 1, r + P) + 1)
    cols = range(max(0, c - P), min(grid[1] - 1, c + P) + 1)
    return [(i, j) for i in rows for j in cols]


def candidate_patches(f_adj: torch.Tensor, query_origin: tuple[int, int], cfg: MatchConfig) -> PatchSet:
    """Candidate windows of one adjacent (C,H,W) map for a single query."""
    c, h, w = f_adj.shape
    grid = grid_shape(h, w, cfg.s, 1)
    r, col = query_origin
    if not (0 <= r < grid[0] and 0 <= col < grid[1]):
        raise GeometryError(f"query origin {query_origin} outside window grid {grid}")
    origins = candidate_origins(query_origin, grid, cfg.P)
    rows = [f_adj[:, i:i + cfg.s, j:j + cfg.s].reshape(-1) for i, j in origins]
    return PatchSet(torch.stack(rows), (len(origins), 1), cfg.s, 1, (c, h, w))


def stable_topk(scores: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top k along the last axis; equal scores keep ascending index order."""
    vals, idx = torch.sort(scores, dim=-1, descending=True, stable=True)
    return idx[..., :k], vals[..., :k]


def top_k_match(query: torch.Tensor, candidates: PatchSet | torch.Tensor, K: int):
    """Indices and similarities of the K most similar candidate rows."""
    cand = candidates.patches if isinstance(candidates, PatchSet) else candidates
    if K > cand.shape[0]:
        raise MatchConfigError(f"K={K} exceeds {cand.shape[0]} candidates")
    sims = pairwise_cosine(query.reshape(1, -1), cand)[0]
    return stable_topk(sims, K)


def _candidate_mask(qgrid, s, cgrid, P, device, exclude_self):
    # (N, G) bool: candidate origin within +-P of the query origin
    qr = torch.arange(qgrid[0], device=device).repeat_interleave(qgrid[1]) * s
    qc = torch.arange(qgrid[1], device=device).repeat(qgrid[0]) * s
    cr = torch.arange(cgrid[0], device=device).repeat_interleave(cgrid[1])
    cc = torch.arange(cgrid[1], device=device).repeat(cgrid[0])
    dr = (cr[None, :] - qr[:, None]).abs()
    dc = (cc[None, :] - qc[:, None]).abs()
    mask = (dr <= P) & (dc <= P)
    if exclude_self:
        mask &= ~((dr == 0) & (dc == 0))
    return mask


def build_graph(f_seq: list[torch.Tensor], cfg: MatchConfig) -> PatchGraphSet:
    """Match every query window of the centre map against its neighbours.

    ``f_seq`` holds 2n+1 maps, each (C,H,W) or (B,C,H,W); the centre one is
    the current frame. With n=0 the pool is the current frame minus the
    query's own window.
    """
    if len(f_seq) % 2 == 0:
        raise GeometryError(f"need an odd number of feature maps, got {len(f_seq)}")
    batched = f_seq[0].dim() == 4
    seq = [f if batched else f.unsqueeze(0) for f in f_seq]
    shape = seq[0].shape
    if any(f.shape != shape for f in seq):
        raise GeometryError(f"inconsistent feature shapes {[tuple(f.shape) for f in seq]}")
    n = len(seq) // 2
    if n != cfg.n:
        raise MatchConfigError(f"got {len(seq)} maps but config expects n={cfg.n}")
    b, c, h, w = shape
    s = cfg.s
    if h % s or w % s:
        raise GeometryError(f"feature map {h}x{w} not divisible by patch size {s}")

    query = unfold(seq[n], s, s)
    offsets = tuple(range(-n, 0)) + tuple(range(1, n + 1)) if n > 0 else (0,)
    pool_maps = [seq[n + o] for o in offsets]
    cgrid = grid_shape(h, w, s, 1)

    pool = torch.cat([F.unfold(m, kernel_size=s, stride=1).transpose(1, 2) for m in pool_maps], dim=1)
    mask = _candidate_mask(query.grid, s, cgrid, cfg.P, seq[n].device, exclude_self=(n == 0))
    mask = mask.repeat(1, len(offsets))  # (N, slots*G)
    m_min = int(mask.sum(dim=1).min())
    if cfg.K > m_min:
        raise MatchConfigError(f"K={cfg.K} exceeds the smallest candidate count {m_min}")

    with torch.no_grad():
        sims = pairwise_cosine(query.patches, pool)  # (B, N, slots*G)
        # -inf excluded candidates sort last and never reach the top K
        sims = sims.masked_fill(~mask, float("-inf"))
        idx, top = stable_topk(sims, cfg.K)
    neigh = torch.gather(
        pool.unsqueeze(1).expand(b, query.n, pool.shape[1], pool.shape[2]),
        2,
        idx.unsqueeze(-1).expand(b, query.n, cfg.K, pool.shape[2]),
    )
    return PatchGraphSet(
        queries=query.patches,
        neighbors=neigh,
        sims=top,
        indices=idx,
        query_grid=query.grid,
        s=s,
        source_shape=(c, h, w),
        frame_offsets=offsets,
        cand_grid=cgrid,
    )

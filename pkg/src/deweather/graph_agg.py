"""Graph-attention aggregation of matched patches (non-local feature aggregation).

Every query is the sink of a star graph whose sources are its K matched
patches. Two single-head attention layers run over all star graphs at once;
sub-graphs never exchange information.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fcm import PatchGraphSet
from .patchops import fold


class NumericOverflowError(FloatingPointError):
    pass


class AggregatorConfigError(ValueError):
    pass


_ACTIVATIONS = {
    "elu": F.elu,
    "identity": lambda x: x,
}


@dataclass
class GatLayerParams:
    W: torch.Tensor  # d_out x d_in
    a: torch.Tensor  # 2 * d_out
    negative_slope: float = 0.2

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]


@dataclass
class AggregatedFeature:
    F_agg: torch.Tensor
    z: torch.Tensor


def attention_logits(q: torch.Tensor, neighbors: torch.Tensor, params: GatLayerParams) -> torch.Tensor:
    wq = q @ params.W.T  # (..., d_out)
    wp = neighbors @ params.W.T  # (..., K, d_out)
    d = params.d_out
    e = (wq @ params.a[:d]).unsqueeze(-1) + wp @ params.a[d:]
    return F.leaky_relu(e, params.negative_slope)


def attention_coeffs(q: torch.Tensor, neighbors: torch.Tensor, params: GatLayerParams) -> torch.Tensor:
    """Softmax over the K neighbours of LeakyReLU(a^T [Wq || Wp_k])."""
    if neighbors.shape[-2] < 1:
        raise AggregatorConfigError("need at least one neighbour")
    logits = attention_logits(q, neighbors, params)
    if not torch.isfinite(logits).all():
        raise NumericOverflowError("non-finite attention logits")
    logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
    w = logits.exp()
    return w / w.sum(dim=-1, keepdim=True)


def aggregate(q: torch.Tensor, neighbors: torch.Tensor, alpha: torch.Tensor, params: GatLayerParams,
              activation: str = "elu") -> torch.Tensor:
    """phi(sum_k alpha_k W p_k). ``q`` only fixes the leading shape."""
    del q
    msg = (alpha.unsqueeze(-1) * neighbors).sum(dim=-2) @ params.W.T
    return _ACTIVATIONS[activation](msg)


class GATLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, negative_slope: float = 0.2, activation: str = "elu",
                 init: str = "xavier"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise AggregatorConfigError(f"unknown activation {activation!r}")
        self.W = nn.Parameter(torch.empty(d_out, d_in))
        self.a = nn.Parameter(torch.empty(2 * d_out))
        self.negative_slope = negative_slope
        self.activation = activation
        self.reset_parameters(init)

    def reset_parameters(self, init: str = "xavier") -> None:
        with torch.no_grad():
            if init == "identity":
                if self.W.shape[0] != self.W.shape[1]:
                    raise AggregatorConfigError("identity init needs a square W")
                self.W.copy_(torch.eye(self.W.shape[0]))
                self.a.zero_()
            else:
                nn.init.xavier_uniform_(self.W)
                nn.init.uniform_(self.a, -0.1, 0.1)

    @property
    def params(self) -> GatLayerParams:
        return GatLayerParams(self.W, self.a, self.negative_slope)

    def forward(self, q: torch.Tensor, neighbors: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.params
        alpha = attention_coeffs(q, neighbors, p)
        return aggregate(q, neighbors, alpha, p, self.activation), alpha

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        """Node update for source nodes, which have no in-edges."""
        return _ACTIVATIONS[self.activation](x @ self.W.T)


def _as_batched(graph: PatchGraphSet):
    return graph.queries, graph.neighbors


def csa_forward(f_seq: list[torch.Tensor], graph: PatchGraphSet, layers) -> AggregatedFeature:
    """Two attention layers, fold to the map layout, gate with the current features.

    Layer 2 re-attends each updated query over the layer-1 transforms of
    the same neighbours; no re-matching happens between layers.
    """
    l1, l2 = layers
    d = graph.queries.shape[-1]
    if l1.W.shape[1] != d:
        raise AggregatorConfigError(f"layer 1 expects d_in={l1.W.shape[1]}, patches have {d}")
    if l2.W.shape[1] != l1.W.shape[0]:
        raise AggregatorConfigError(f"layer widths do not chain: {l1.W.shape[0]} -> {l2.W.shape[1]}")
    if l2.W.shape[0] != d:
        raise AggregatorConfigError(f"layer 2 output {l2.W.shape[0]} cannot fold back to patches of {d}")
    q, nb = _as_batched(graph)
    z1, _ = l1(q, nb)
    h = l1.transform(nb)
    z2, _ = l2(z1, h)
    return _gate(f_seq[len(f_seq) // 2], graph, z2)


def _gate(f_t: torch.Tensor, graph: PatchGraphSet, z: torch.Tensor) -> AggregatedFeature:
    folded = fold(graph.query_patchset(z))
    if folded.dim() != f_t.dim():
        folded = folded.reshape(f_t.shape)
    return AggregatedFeature(folded * f_t, z)


def mean_aggregate_baseline(graph: PatchGraphSet) -> AggregatedFeature:
    """Plain mean of the raw neighbour patches, gated like the attention path."""
    z = graph.neighbors.mean(dim=-2)
    f_t = fold(graph.query_patchset(graph.queries))
    return AggregatedFeature(fold(graph.query_patchset(z)) * f_t, z)


class CSA(nn.Module):
    """Matching plus aggregation; ``aggregator`` is 'gat' or 'mean'.

    Layers start from W = I, a = 0 (uniform attention) by default; the
    aggregated feature then begins as a gated neighbour mean.
    """

    def __init__(self, channels: int, s: int, aggregator: str = "gat", negative_slope: float = 0.2,
                 activation: str = "elu", init: str = "identity"):
        super().__init__()
        if aggregator not in ("gat", "mean"):
            raise AggregatorConfigError(f"unknown aggregator {aggregator!r}")
        d = channels * s * s
        self.aggregator = aggregator
        self.layers = nn.ModuleList([
            GATLayer(d, d, negative_slope, activation, init),
            GATLayer(d, d, negative_slope, activation, init),
        ])

    def forward(self, f_seq: list[torch.Tensor], graph: PatchGraphSet) -> AggregatedFeature:
        if self.aggregator == "mean":
            return mean_aggregate_baseline(graph)
        return csa_forward(f_seq, graph, list(self.layers))

"""Dynamic hypergraph convolution.

Two-stage message passing on the multi-scale hypergraph of one head:

1. vertex -> hyperedge.  A cluster edge with centroid ``h_c`` and members
   ``x_i`` (similarity ``s_i`` to the centroid) aggregates to::

       h_e = (h_c + sum_i g_i x_i) / (1 + sum_i g_i),   g_i = sigmoid(alpha s_i + beta)

   and a dilated edge of rate ``r`` aggregates to::

       h_e = (h_c + w_r sum_i x_i) / (1 + |e| w_r)

2. hyperedge -> vertex.  Each vertex gathers
   ``z_i = sum_{e in E_i} gate(i, e) h_e`` (gate ``g_i`` on its cluster edge,
   ``w_r`` on dilated edges) and is updated GIN-style::

       x'_i = FC(GELU(DWConv3x3((1 + eps) x_i + z_i)))

Membership is fixed during the forward pass; gradients reach the
similarities only through the gates.

Two implementations live here: an edge-by-edge one that follows the
hypergraph objects literally (:func:`dhconv_head_reference`) and the batched
one the model runs (:func:`dhconv_head`).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .functional import avg_pool_region, depthwise_conv3x3, linear
from .hypergraph import (
    CLUSTER,
    DILATED,
    Hyperedge,
    MultiScaleHypergraph,
    PatchField,
    assign_clusters,
    build_multiscale_hypergraph,
    from_windows,
    to_windows,
    window_layout,
    window_similarity,
)
from .tensor import Tensor, add, concat, gelu, matmul, mul, reduce_sum, sigmoid, stack

SINGULAR_TOL = 1e-8


class SingularWeightError(ArithmeticError):
    """A dilated edge's normaliser 1 + |e| w_r is (numerically) zero."""


def num_threads() -> int:
    """Worker count from ``DVHGNN_THREADS`` (0 or unset = sequential)."""
    raw = os.environ.get("DVHGNN_THREADS", "0").strip() or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        raise ValueError(f"DVHGNN_THREADS must be an integer, got {raw!r}") from None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class HeadParams:
    sim_weight: Tensor  # (D, D')
    sim_bias: Tensor
    value_weight: Tensor  # (D, D')
    value_bias: Tensor
    alpha: Tensor  # ()
    beta: Tensor
    eps: Tensor
    rate_weights: Tensor  # (R,)
    conv_kernel: Tensor  # (3, 3, D')
    conv_bias: Tensor
    fc_weight: Tensor  # (D', D')
    fc_bias: Tensor

    @classmethod
    def init(cls, dim: int, head_dim: int, num_rates: int, rng: np.random.Generator) -> "HeadParams":
        def p(arr):
            return Tensor(arr, requires_grad=True)

        return cls(
            sim_weight=p(_uniform(rng, (dim, head_dim), dim)),
            sim_bias=p(_uniform(rng, (head_dim,), dim)),
            value_weight=p(_uniform(rng, (dim, head_dim), dim)),
            value_bias=p(_uniform(rng, (head_dim,), dim)),
            alpha=p(1.0),
            beta=p(0.0),
            eps=p(0.0),
            rate_weights=p(np.full(num_rates, 0.5)),
            conv_kernel=p(_uniform(rng, (3, 3, head_dim), 9)),
            conv_bias=p(_uniform(rng, (head_dim,), 9)),
            fc_weight=p(_uniform(rng, (head_dim, head_dim), head_dim)),
            fc_bias=p(_uniform(rng, (head_dim,), head_dim)),
        )

    def named_tensors(self) -> Dict[str, Tensor]:
        return dict(vars(self))

    @property
    def head_dim(self) -> int:
        return self.sim_weight.shape[1]


# ----------------------------------------------------------- edge aggregation
def _sorted_members(edge: Hyperedge) -> List[int]:
    # sums run over ascending vertex ids whatever order the edge lists them in
    return sorted(range(len(edge.members)), key=edge.members.__getitem__)


def aggregate_cluster_edge(
    edge: Hyperedge,
    values: Tensor,
    alpha,
    beta,
    centroid: Optional[Tensor] = None,
) -> Tensor:
    """Gated mean of a cluster edge; ``values`` is (N, D') indexed by vertex id."""
    if edge.kind != CLUSTER:
        raise ValueError(f"expected a cluster edge, got {edge.kind}")
    hc = edge.centroid if centroid is None else centroid
    if not edge.members:
        return add(hc, 0.0)
    order = _sorted_members(edge)
    x = values[[edge.members[i] for i in order]]
    g = sigmoid(add(mul(alpha, edge.similarities[order]), beta))
    num = add(hc, reduce_sum(mul(g.reshape(-1, 1), x), axis=0))
    return num / add(reduce_sum(g), 1.0)


def aggregate_dilated_edge(
    edge: Hyperedge,
    values: Tensor,
    weight,
    centroid: Optional[Tensor] = None,
) -> Tensor:
    if edge.kind != DILATED:
        raise ValueError(f"expected a dilated edge, got {edge.kind}")
    hc = edge.centroid if centroid is None else centroid
    den = add(mul(weight, float(len(edge.members))), 1.0)
    if abs(float(den.data)) < SINGULAR_TOL:
        raise SingularWeightError(
            f"1 + |e| w_r = {float(den.data):.3g} for rate-{edge.param} edge of window {edge.window}"
        )
    if not edge.members:
        return add(hc, 0.0)
    x = values[[edge.members[i] for i in _sorted_members(edge)]]
    return add(hc, mul(weight, reduce_sum(x, axis=0))) / den


def aggregation_coefficients(edge: Hyperedge, alpha: float = 1.0, beta: float = 0.0, weight: float = 0.5) -> np.ndarray:
    """Weights on (h_c, x_1, ..., x_n) that the aggregation applies."""
    n = len(edge.members)
    if edge.kind == CLUSTER:
        s = edge.similarities.data if n else np.zeros(0)
        g = 1.0 / (1.0 + np.exp(-(alpha * s + beta)))
        den = 1.0 + g.sum()
        return np.concatenate([[1.0 / den], g / den])
    den = 1.0 + n * weight
    return np.concatenate([[1.0 / den], np.full(n, weight / den)])


def edge_gate(edge: Hyperedge, vertex: int, alpha, beta, rate_weights: Tensor, rates: Sequence[int]) -> Tensor:
    """sigmoid(alpha s_i + beta) on cluster edges, w_r on dilated edges."""
    if edge.kind == CLUSTER:
        pos = edge.members.index(vertex)
        return sigmoid(add(mul(alpha, edge.similarities[pos]), beta))
    return rate_weights[list(rates).index(edge.param)]


def vertex_message(
    vertex: int,
    hg: MultiScaleHypergraph,
    edge_features: Sequence[Tensor],
    alpha,
    beta,
    rate_weights: Tensor,
    rates: Sequence[int],
) -> Tensor:
    """z_i: gate-weighted sum of the features of all edges incident to ``vertex``."""
    z = None
    for eid in hg.incidence[vertex]:
        term = mul(edge_gate(hg.edges[eid], vertex, alpha, beta, rate_weights, rates), edge_features[eid])
        z = term if z is None else add(z, term)
    return z


def vertex_update(values: Tensor, messages: Tensor, params: HeadParams) -> Tensor:
    """FC(GELU(DWConv((1 + eps) x + z))) over an (H, W, D') field."""
    u = add(mul(add(params.eps, 1.0), values), messages)
    y = add(depthwise_conv3x3(u, params.conv_kernel), params.conv_bias)
    return linear(gelu(y), params.fc_weight, params.fc_bias)


# ------------------------------------------------------------- single head
def _edge_centroid(edge: Hyperedge, values_field: Tensor, dim: int) -> Tensor:
    if edge.kind == CLUSTER:
        if edge.region is None:
            return Tensor(np.zeros(dim))
        return avg_pool_region(values_field, edge.region)
    if edge.center is None:
        return Tensor(np.zeros(dim))
    w = values_field.shape[1]
    return values_field[edge.center // w, edge.center % w]


def dhconv_head_reference(x: Tensor, params: HeadParams, cfg) -> Tensor:
    """Edge-by-edge evaluation over hypergraph objects (slow, for checking)."""
    h, w, _ = x.shape
    dim = params.head_dim
    xs = linear(x, params.sim_weight, params.sim_bias)
    xv = linear(x, params.value_weight, params.value_bias)
    hg = build_multiscale_hypergraph(PatchField(xs), cfg)
    values = xv.reshape(h * w, dim)
    rates = list(cfg.rates)
    feats = []
    for e in hg.edges:
        hc = _edge_centroid(e, xv, dim)
        if e.kind == CLUSTER:
            feats.append(aggregate_cluster_edge(e, values, params.alpha, params.beta, centroid=hc))
        else:
            wr = params.rate_weights[rates.index(e.param)]
            feats.append(aggregate_dilated_edge(e, values, wr, centroid=hc))
    z = stack(
        [vertex_message(v, hg, feats, params.alpha, params.beta, params.rate_weights, rates) for v in range(h * w)]
    ).reshape(h, w, dim)
    return vertex_update(xv, z, params)


@dataclass
class HeadGraph:
    """Batched hypergraph state of one head (what visualisation needs)."""

    similarity: Tensor  # (m, C, w*w)
    assignment: np.ndarray  # (m, w*w)
    layout: object


def dhconv_head(x: Tensor, params: HeadParams, cfg, return_graph: bool = False):
    """Batched single-head DHConv on an (H, W, D) field -> (H, W, D')."""
    h, w, _ = x.shape
    layout = window_layout(h, w, cfg.window, cfg.centroids, tuple(cfg.rates), cfg.kernel)
    C = cfg.centroids
    R = len(cfg.rates)

    xs = to_windows(linear(x, params.sim_weight, params.sim_bias), layout)
    xv = to_windows(linear(x, params.value_weight, params.value_bias), layout)

    _, S = window_similarity(xs, layout)
    assignment = assign_clusters(S.data, layout.valid, layout.pool)
    onehot = Tensor((assignment[:, None, :] == np.arange(C)[None, :, None]).astype(float))
    gated = mul(onehot, sigmoid(add(mul(params.alpha, S), params.beta)))  # (m, C, n)

    hc = matmul(Tensor(layout.pool), xv)
    h_cluster = add(hc, matmul(gated, xv)) / add(reduce_sum(gated, axis=-1, keepdims=True), 1.0)

    member = Tensor(layout.dilated)  # (m, R, n)
    wr = params.rate_weights.reshape(1, R, 1)
    den = add(mul(Tensor(layout.dilated_count[:, :, None]), wr), 1.0)
    if np.any(np.abs(den.data) < SINGULAR_TOL):
        raise SingularWeightError(f"1 + |e| w_r vanishes for rate weights {params.rate_weights.data}")
    centre = xv[:, layout.center, :].reshape(-1, 1, xv.shape[-1])
    h_dilated = add(centre, mul(wr, matmul(member, xv))) / den

    z = add(
        matmul(gated.transpose(0, 2, 1), h_cluster),
        matmul(mul(member, wr).transpose(0, 2, 1), h_dilated),
    )
    out = vertex_update(from_windows(xv, layout), from_windows(z, layout), params)
    if return_graph:
        return out, HeadGraph(S, assignment, layout)
    return out


def multi_head_dhconv(
    field: PatchField,
    heads: Sequence[HeadParams],
    fusion_weight: Tensor,
    fusion_bias: Optional[Tensor],
    cfg,
    threads: Optional[int] = None,
) -> PatchField:
    """Run every head on its own hypergraph, concatenate, fuse back to D."""
    x = field.features
    threads = num_threads() if threads is None else threads
    if threads > 0 and len(heads) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs: List[Tensor] = list(pool.map(lambda p: dhconv_head(x, p, cfg), heads))
    else:
        outs = [dhconv_head(x, p, cfg) for p in heads]
    cat = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    return PatchField(linear(cat, fusion_weight, fusion_bias), stage=field.stage)

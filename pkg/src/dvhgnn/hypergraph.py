"""Multi-scale hypergraph construction over a grid of patch features.

A stage's feature map is tiled into disjoint ``w x w`` windows.  Inside each
window two kinds of hyperedges are built:

* ``cluster`` edges: ``C`` centroids are average-pooled from a near-equal grid
  split of the window, every vertex joins the centroid with the highest cosine
  similarity (one pass, lowest index wins ties);
* ``dilated`` edges: for each dilation rate ``r`` the window's central vertex
  gathers a ``k x k`` lattice with step ``r``, clipped to the window.

Vertex ids are row-major positions in the (unpadded) field.  Fields whose
sides are not multiples of ``w`` are zero-padded bottom/right; padded cells
never join a hyperedge.

Besides the object-level API (``Hyperedge``, ``MultiScaleHypergraph``) the
module exposes the batched array form used by the model: ``window_layout``,
``to_windows`` / ``from_windows``, ``window_similarity`` and
``assign_clusters``.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .functional import cosine_matrix
from .tensor import Tensor, as_tensor, matmul, no_grad, pad2d

CLUSTER = "cluster"
DILATED = "dilated"

# Similarities within this distance of the row maximum count as ties.
TIE_TOL = 1e-12


@dataclass
class PatchField:
    features: Tensor  # (H, W, D)
    stage: int = 0

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.features.ndim != 3:
            raise ValueError(f"PatchField features must be (H, W, D), got {self.features.shape}")

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def num_vertices(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class Window:
    index: int
    origin: Tuple[int, int]
    size: int
    cells: Tuple[int, ...]  # w*w vertex ids, row-major; -1 marks padding

    @property
    def members(self) -> Tuple[int, ...]:
        return tuple(c for c in self.cells if c >= 0)


@dataclass
class Hyperedge:
    kind: str
    window: int
    param: int  # centroid index (cluster) or dilation rate (dilated)
    members: Tuple[int, ...]  # ascending vertex ids
    local: Tuple[int, ...]  # positions of members inside the window, same order
    centroid: Optional[Tensor] = None
    similarities: Optional[Tensor] = None  # cluster only: s_i per member
    region: Optional[Tuple[int, int, int, int]] = None  # cluster only: pooled rectangle
    center: Optional[int] = None  # dilated only: central vertex id (None if padded)

    @property
    def rate(self) -> Optional[int]:
        return self.param if self.kind == DILATED else None

    def key(self) -> Tuple[str, int, int, Tuple[int, ...]]:
        return (self.kind, self.window, self.param, tuple(self.members))


@dataclass
class DilationWeights:
    """One scalar per dilation rate; ``matrix()`` is the diagonal weight matrix."""

    rates: Tuple[int, ...]
    values: Tensor

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.shape != (len(self.rates),):
            raise ValueError(f"need {len(self.rates)} weights, got shape {self.values.shape}")

    def weight(self, rate: int) -> float:
        return float(self.values.data[self.rates.index(rate)])

    def matrix(self) -> np.ndarray:
        return np.diag(self.values.data)


@dataclass
class MultiScaleHypergraph:
    height: int
    width: int
    window: int
    edges: List[Hyperedge]
    incidence: List[List[int]]  # vertex id -> incident edge ids (ascending)
    similarity: List[Tensor]  # per window, (C, w*w)
    assignment: np.ndarray  # (m, w*w) centroid index, -1 on padding
    weights: Optional[DilationWeights] = None
    head: int = 0

    @property
    def num_vertices(self) -> int:
        return self.height * self.width

    def cluster_edges(self) -> List[Hyperedge]:
        return [e for e in self.edges if e.kind == CLUSTER]

    def dilated_edges(self) -> List[Hyperedge]:
        return [e for e in self.edges if e.kind == DILATED]

    def structure(self) -> List[Tuple[str, int, int, Tuple[int, ...]]]:
        return [e.key() for e in self.edges]


# --------------------------------------------------------------------- layout
def grid_regions(w: int, centroids: int) -> List[Tuple[int, int, int, int]]:
    """First ``centroids`` cells (row-major) of a ceil(sqrt C)^2 near-equal grid."""
    g = math.isqrt(centroids - 1) + 1 if centroids > 1 else 1
    if g > w:
        raise ValueError(f"{centroids} centroids need a {g}x{g} grid, window is only {w}")
    sizes = [w // g + (1 if i < w % g else 0) for i in range(g)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    rects = [
        (int(bounds[a]), int(bounds[a + 1]), int(bounds[b]), int(bounds[b + 1]))
        for a in range(g)
        for b in range(g)
    ]
    return rects[:centroids]


def dilated_offsets(w: int, rate: int, kernel: int) -> List[Tuple[int, int]]:
    """Window-local (row, col) members of the rate-``rate`` edge around the centre."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd, got {kernel}")
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    c = w // 2
    half = (kernel - 1) // 2
    steps = range(-half, half + 1)
    return [
        (c + p * rate, c + q * rate)
        for p in steps
        for q in steps
        if 0 <= c + p * rate < w and 0 <= c + q * rate < w
    ]


@dataclass(frozen=True)
class WindowLayout:
    height: int
    width: int
    w: int
    rows: int  # windows per column
    cols: int  # windows per row
    cells: np.ndarray  # (m, w*w) int, -1 on padding
    valid: np.ndarray  # (m, w*w) bool
    pool: np.ndarray  # (m, C, w*w) averaging weights over the valid part of each region
    regions: Tuple[Tuple[Optional[Tuple[int, int, int, int]], ...], ...]  # global, clipped
    rates: Tuple[int, ...]
    dilated: np.ndarray  # (m, R, w*w) float membership
    dilated_count: np.ndarray  # (m, R)
    center: int  # window-local index of the central vertex

    @property
    def num_windows(self) -> int:
        return self.rows * self.cols

    @property
    def padded_shape(self) -> Tuple[int, int]:
        return self.rows * self.w, self.cols * self.w


@functools.lru_cache(maxsize=128)
def window_layout(
    height: int,
    width: int,
    w: int,
    centroids: int,
    rates: Tuple[int, ...] = (1, 2, 3),
    kernel: int = 3,
) -> WindowLayout:
    if w < 3:
        raise ValueError(f"window size must be >= 3, got {w}")
    if height < 1 or width < 1:
        raise ValueError(f"empty field {height}x{width}")
    rows, cols = -(-height // w), -(-width // w)
    m, n = rows * cols, w * w
    regions_local = grid_regions(w, centroids)
    cells = np.full((m, n), -1, dtype=np.int64)
    pool = np.zeros((m, centroids, n))
    regions = []
    for wi in range(rows):
        for wj in range(cols):
            k = wi * cols + wj
            r0, c0 = wi * w, wj * w
            for a in range(w):
                for b in range(w):
                    if r0 + a < height and c0 + b < width:
                        cells[k, a * w + b] = (r0 + a) * width + c0 + b
            win_regions = []
            for c, (a0, a1, b0, b1) in enumerate(regions_local):
                ga1, gb1 = min(r0 + a1, height), min(c0 + b1, width)
                if r0 + a0 >= ga1 or c0 + b0 >= gb1:
                    win_regions.append(None)
                    continue
                win_regions.append((r0 + a0, ga1, c0 + b0, gb1))
                idx = [a * w + b for a in range(a0, a1) for b in range(b0, b1) if cells[k, a * w + b] >= 0]
                pool[k, c, idx] = 1.0 / len(idx)
            regions.append(tuple(win_regions))
    valid = cells >= 0

    dil = np.zeros((m, len(rates), n))
    for ri, r in enumerate(rates):
        for a, b in dilated_offsets(w, r, kernel):
            dil[:, ri, a * w + b] = 1.0
    dil *= valid[:, None, :]
    for arr in (cells, valid, pool, dil):
        arr.setflags(write=False)
    count = dil.sum(axis=-1)
    count.setflags(write=False)
    return WindowLayout(
        height, width, w, rows, cols, cells, valid, pool, tuple(regions),
        tuple(rates), dil, count, (w // 2) * w + w // 2,
    )


def to_windows(x: Tensor, layout: WindowLayout) -> Tensor:
    """(H, W, D) -> (m, w*w, D), zero-padding bottom/right as needed."""
    h, w, d = x.shape
    hp, wp = layout.padded_shape
    s = layout.w
    xp = pad2d(x, hp - h, wp - w)
    return xp.reshape(layout.rows, s, layout.cols, s, d).transpose(0, 2, 1, 3, 4).reshape(
        layout.num_windows, s * s, d
    )


def from_windows(xw: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`to_windows`, cropping the padding away."""
    s, d = layout.w, xw.shape[-1]
    full = xw.reshape(layout.rows, layout.cols, s, s, d).transpose(0, 2, 1, 3, 4).reshape(
        layout.rows * s, layout.cols * s, d
    )
    if full.shape[:2] == (layout.height, layout.width):
        return full
    return full[: layout.height, : layout.width]


def window_similarity(xs_windows: Tensor, layout: WindowLayout) -> Tuple[Tensor, Tensor]:
    """Pooled centroids (m, C, D) and cosine matrix S (m, C, w*w)."""
    cent = matmul(Tensor(layout.pool), xs_windows)
    return cent, cosine_matrix(cent, xs_windows)


def assign_clusters(
    similarity: np.ndarray, valid: np.ndarray, pool: Optional[np.ndarray] = None
) -> np.ndarray:
    """Argmax over centroids (axis -2) with lowest-index tie-breaking; -1 on padding.

    With ``pool`` given, centroids whose region is all padding attract nobody.
    """
    if pool is not None:
        live = pool.sum(axis=-1, keepdims=True) > 0
        similarity = np.where(live, similarity, -np.inf)
    best = similarity.max(axis=-2, keepdims=True)
    assign = np.argmax(similarity >= best - TIE_TOL, axis=-2)
    return np.where(valid, assign, -1)


# --------------------------------------------------------------- object API
def partition_windows(field: PatchField, w: int, pad: bool = True) -> List[Window]:
    """Disjoint ``w x w`` tiles covering the field (padded when ``pad``)."""
    if w < 3:
        raise ValueError(f"window size must be >= 3, got {w}")
    h, wd = field.height, field.width
    if not pad and (h % w or wd % w):
        raise ValueError(f"{h}x{wd} field is not tiled by {w}x{w} windows and padding is off")
    layout = window_layout(h, wd, w, 1, (1,), 1)
    return [
        Window(k, ((k // layout.cols) * w, (k % layout.cols) * w), w, tuple(int(c) for c in layout.cells[k]))
        for k in range(layout.num_windows)
    ]


def _cluster_edges_from_arrays(
    window: int,
    cells: np.ndarray,
    assignment: np.ndarray,
    S: Tensor,
    centroids: Tensor,
    regions: Sequence[Optional[Tuple[int, int, int, int]]],
) -> List[Hyperedge]:
    edges = []
    for c in range(S.shape[0]):
        local = tuple(int(i) for i in np.flatnonzero(assignment == c))
        edges.append(
            Hyperedge(
                CLUSTER,
                window,
                c,
                tuple(int(cells[i]) for i in local),
                local,
                centroid=centroids[c],
                similarities=S[c, list(local)] if local else Tensor(np.zeros(0)),
                region=regions[c],
            )
        )
    return edges


def cluster_hyperedges(window: Window, feats_sim: Tensor, centroids: int) -> Tuple[List[Hyperedge], Tensor]:
    """Cluster edges of one window from its (w*w, D') similarity-space features.

    Rows of ``feats_sim`` follow ``window.cells``; rows belonging to padding are
    ignored.  Edges that attract no vertex are kept with no members.
    """
    feats_sim = as_tensor(feats_sim)
    w = window.size
    if feats_sim.shape[0] != w * w:
        raise ValueError(f"expected {w * w} feature rows, got {feats_sim.shape[0]}")
    if not 1 <= centroids <= w * w:
        raise ValueError(f"centroid count {centroids} outside [1, {w * w}]")
    cells = np.array(window.cells)
    valid = cells >= 0
    pool = np.zeros((centroids, w * w))
    regions = []
    r0, c0 = window.origin
    for c, (a0, a1, b0, b1) in enumerate(grid_regions(w, centroids)):
        idx = [a * w + b for a in range(a0, a1) for b in range(b0, b1) if valid[a * w + b]]
        if idx:
            pool[c, idx] = 1.0 / len(idx)
            rows = [i // w for i in idx]
            cols = [i % w for i in idx]
            regions.append((r0 + min(rows), r0 + max(rows) + 1, c0 + min(cols), c0 + max(cols) + 1))
        else:
            regions.append(None)
    x = feats_sim * Tensor(valid[:, None].astype(float))
    cent = matmul(Tensor(pool), x)
    S = cosine_matrix(cent, x)
    assignment = assign_clusters(S.data, valid, pool)
    edges = _cluster_edges_from_arrays(window.index, cells, assignment, S, cent, regions)
    return edges, S


def dilated_hyperedges(
    window: Window,
    rates: Sequence[int],
    kernel: int,
    feats: Optional[Tensor] = None,
) -> List[Hyperedge]:
    """One edge per rate around the window centre; centroid = centre feature.

    ``feats`` (w*w, D), when given, supplies the centroid feature.
    """
    w = window.size
    centre_local = (w // 2) * w + w // 2
    centre_id = window.cells[centre_local]
    edges = []
    for r in rates:
        local = tuple(
            sorted(a * w + b for a, b in dilated_offsets(w, r, kernel) if window.cells[a * w + b] >= 0)
        )
        centroid = None
        if feats is not None:
            centroid = as_tensor(feats)[centre_local]
        edges.append(
            Hyperedge(
                DILATED,
                window.index,
                int(r),
                tuple(window.cells[i] for i in local),
                local,
                centroid=centroid,
                center=centre_id if centre_id >= 0 else None,
            )
        )
    return edges


def build_multiscale_hypergraph(
    field: PatchField,
    cfg,
    head: int = 0,
    weights: Optional[DilationWeights] = None,
    counter: Optional["OpCounter"] = None,
) -> MultiScaleHypergraph:
    """Cluster edges followed by dilated edges for every window.

    ``field.features`` are taken to be the similarity-space features of the
    given head.  Edge order is window-major, cluster before dilated, centroid
    index / rate ascending.
    """
    layout = window_layout(field.height, field.width, cfg.window, cfg.centroids, tuple(cfg.rates), cfg.kernel)
    xw = to_windows(field.features, layout)
    cent, S = window_similarity(xw, layout)
    assignment = assign_clusters(S.data, layout.valid, layout.pool)
    if counter is not None:
        counter.similarities += int(layout.valid.sum()) * cfg.centroids

    n_vertices = field.num_vertices
    edges: List[Hyperedge] = []
    incidence: List[List[int]] = [[] for _ in range(n_vertices)]
    similarity = []
    for k in range(layout.num_windows):
        cells = layout.cells[k]
        S_k = S[k]
        similarity.append(S_k)
        win = Window(k, ((k // layout.cols) * layout.w, (k % layout.cols) * layout.w), layout.w, tuple(int(c) for c in cells))
        window_edges = _cluster_edges_from_arrays(k, cells, assignment[k], S_k, cent[k], layout.regions[k])
        window_edges += dilated_hyperedges(win, cfg.rates, cfg.kernel, feats=xw[k])
        for e in window_edges:
            eid = len(edges)
            edges.append(e)
            for v in e.members:
                incidence[v].append(eid)
    return MultiScaleHypergraph(
        field.height, field.width, layout.w, edges, incidence, similarity, assignment, weights, head
    )


# ------------------------------------------------------------------ text dump
def dump_hypergraph(hg: MultiScaleHypergraph) -> str:
    """One line per edge: ``kind window_id param member_ids...``."""
    lines = []
    for e in hg.edges:
        lines.append(" ".join([e.kind, str(e.window), str(e.param)] + [str(v) for v in e.members]))
    return "\n".join(lines) + "\n"


def parse_hypergraph(text: str) -> List[Tuple[str, int, int, Tuple[int, ...]]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 3 or parts[0] not in (CLUSTER, DILATED):
            raise ValueError(f"line {lineno}: malformed hyperedge record {line!r}")
        out.append((parts[0], int(parts[1]), int(parts[2]), tuple(int(v) for v in parts[3:])))
    return out


# ------------------------------------------------------------ KNN + benchmark
@dataclass
class OpCounter:
    similarities: int = 0


def knn_graph_baseline(feats, k: int, counter: Optional[OpCounter] = None, block: int = 1024) -> List[List[int]]:
    """Exact k nearest neighbours under cosine distance via all pairs.

    Deliberately quadratic; neighbours are ordered by decreasing similarity
    with lower vertex ids winning ties.
    """
    x = np.asarray(feats.data if isinstance(feats, Tensor) else feats, dtype=np.float64)
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError(f"need 0 < K < N, got K={k}, N={n}")
    norms = np.maximum(np.linalg.norm(x, axis=1), 1e-12)
    xn = x / norms[:, None]
    neighbours: List[List[int]] = []
    for start in range(0, n, block):
        stop = min(start + block, n)
        sim = np.clip(xn[start:stop] @ xn.T, -1.0, 1.0)
        sim[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # candidates: everything at least as similar as the k-th best
        kth = -np.partition(-sim, k - 1, axis=1)[:, k - 1 : k]
        for row in range(stop - start):
            cand = np.flatnonzero(sim[row] >= kth[row, 0] - TIE_TOL)
            order = np.lexsort((cand, -sim[row, cand]))
            neighbours.append([int(v) for v in cand[order[:k]]])
    if counter is not None:
        counter.similarities += n * (n - 1)
    return neighbours


@dataclass
class BenchRecord:
    method: str
    n: int
    ops: int
    ms: float
    slope: float = float("nan")
    wall_slope: float = float("nan")


def fit_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)[0])


def field_shape(n: int, w: int) -> Tuple[int, int]:
    side = math.isqrt(n)
    if side * side == n:
        return side, side
    if n % w == 0:
        return w, n // w
    raise ValueError(f"N={n} is neither a perfect square nor a multiple of w={w}")


def construction_cost(
    sizes: Sequence[int],
    method: str,
    dim: int = 24,
    cfg=None,
    k: int = 9,
    repeats: int = 3,
    seed: int = 0,
) -> List[BenchRecord]:
    """Time and count similarity evaluations of one construction method per size."""
    from .config import dvhgnn_t

    if len(sizes) < 4:
        raise ValueError("need at least 4 sizes")
    if max(sizes) < 8 * min(sizes):
        raise ValueError("sizes must span at least a factor of 8")
    if method not in ("knn", "cluster_dhgc"):
        raise ValueError(f"unknown method {method!r}")
    cfg = cfg or dvhgnn_t()
    rng = np.random.default_rng(seed)
    records = []
    for n in sizes:
        h, w = field_shape(n, cfg.window)
        feats = rng.standard_normal((h, w, dim))
        times, ops = [], 0
        for _ in range(max(1, repeats)):
            counter = OpCounter()
            t0 = time.perf_counter()
            with no_grad():
                if method == "knn":
                    knn_graph_baseline(feats.reshape(n, dim), k, counter)
                else:
                    build_multiscale_hypergraph(PatchField(Tensor(feats)), cfg, counter=counter)
            times.append((time.perf_counter() - t0) * 1000.0)
            ops = counter.similarities
        records.append(BenchRecord(method, n, ops, float(np.median(times))))
    slope = fit_slope([r.n for r in records], [r.ops for r in records])
    wall = fit_slope([r.n for r in records], [max(r.ms, 1e-6) for r in records])
    for r in records:
        r.slope, r.wall_slope = slope, wall
    return records

"""Spatially-constrained Ward agglomeration, parcel reduction and ANOVA selection."""

from __future__ import annotations

import heapq
import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .volume import AdjacencyGraph

logger = logging.getLogger(__name__)

PARC_MAGIC = b"PARC1\n"


@dataclass(frozen=True, eq=False)
class Parcellation:
    """Voxel-to-parcel assignment plus the merge history that produced it.

    ``merges[i] = (a, b)`` joins clusters ``a < b`` into cluster ``p + i``;
    clusters ``0..p-1`` are the individual voxels.
    """

    n_parcels: int
    assignment: np.ndarray
    merges: np.ndarray
    costs: np.ndarray

    @property
    def p(self) -> int:
        return int(self.assignment.size)

    @property
    def merge_tree(self) -> list[tuple[int, int, float]]:
        return [(int(a), int(b), float(c)) for (a, b), c in zip(self.merges, self.costs)]

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_parcels)

    @cached_property
    def averaging(self) -> sparse.csr_matrix:
        """Sparse (p, n_parcels) matrix mapping voxel values to parcel means."""
        w = 1.0 / self.sizes[self.assignment]
        return sparse.csr_matrix((w, (np.arange(self.p), self.assignment)),
                                 shape=(self.p, self.n_parcels))


def ward_cost(size_a, sum_a, size_b, sum_b):
    """Increase of within-cluster sum of squares when merging two clusters."""
    # one division of the exact-when-integral numerator: equal costs compare equal
    diff = size_b * sum_a - size_a * sum_b
    return float(diff @ diff) / (size_a * size_b * (size_a + size_b))


def ward_parcellate(train_maps: np.ndarray, adjacency: AdjacencyGraph,
                    n_parcels: int) -> Parcellation:
    """Greedy Ward agglomeration of voxels restricted to adjacent clusters.

    Each voxel is a sample whose features are its values across the training
    maps. At every step the adjacent pair with the smallest Ward cost is merged;
    ties go to the lexicographically smallest ``(a, b)`` cluster-id pair. If the
    graph has more connected components than ``n_parcels`` the merging stops at
    the component count with a warning.

    Parameters
    ----------
    train_maps : ndarray, shape (n, p)
    adjacency : AdjacencyGraph over the p voxels
    n_parcels : int, 1 <= n_parcels <= p
    """
    X = np.asarray(train_maps, dtype=np.float64)
    p = adjacency.n_nodes
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"train_maps must have shape (n, {p}), got {X.shape}")
    if not (1 <= n_parcels <= p):
        raise ValueError(f"n_parcels must be in [1, {p}], got {n_parcels}")

    sums = np.ascontiguousarray(X.T)
    sizes = np.ones(2 * p - 1)
    row_of = np.full(2 * p - 1, -1, dtype=np.int64)
    row_of[:p] = np.arange(p)
    parent = np.arange(2 * p - 1)
    active = np.zeros(2 * p - 1, dtype=bool)
    active[:p] = True
    nbrs = [set() for _ in range(2 * p - 1)]

    edges = adjacency.edges
    heap = []
    for start in range(0, len(edges), 4096):
        chunk = edges[start: start + 4096]
        d = sums[chunk[:, 0]] - sums[chunk[:, 1]]
        cost = 0.5 * np.einsum("ij,ij->i", d, d)
        heap.extend(zip(cost.tolist(), chunk[:, 0].tolist(), chunk[:, 1].tolist()))
    for i, j in edges.tolist():
        nbrs[i].add(j)
        nbrs[j].add(i)
    heapq.heapify(heap)

    merges = []
    costs = []
    n_active = p
    new_id = p
    while n_active > n_parcels and heap:
        cost, a, b = heapq.heappop(heap)
        if not (active[a] and active[b]):
            continue
        u = new_id
        new_id += 1
        ra, rb = row_of[a], row_of[b]
        sums[ra] += sums[rb]
        row_of[u] = ra
        sizes[u] = sizes[a] + sizes[b]
        active[a] = active[b] = False
        active[u] = True
        parent[a] = parent[b] = u
        nbrs[u] = (nbrs[a] | nbrs[b]) - {a, b}
        for k in nbrs[u]:
            nbrs[k].discard(a)
            nbrs[k].discard(b)
            nbrs[k].add(u)
        nbrs[a] = nbrs[b] = set()
        merges.append((a, b))
        costs.append(cost)
        n_active -= 1
        if nbrs[u]:
            ks = np.fromiter(sorted(nbrs[u]), dtype=np.int64)
            su = sizes[u]
            sk = sizes[ks]
            d = su * sums[row_of[ks]] - sk[:, None] * sums[ra]
            kc = np.einsum("ij,ij->i", d, d) / (su * sk * (su + sk))
            for k, c in zip(ks.tolist(), kc.tolist()):
                heapq.heappush(heap, (c, k, u))

    if n_active > n_parcels:
        logger.warning("adjacency graph has %d connected components; stopping at %d parcels "
                       "instead of %d", n_active, n_active, n_parcels)

    labels = np.arange(p)
    while True:
        nxt = parent[labels]
        if np.array_equal(nxt, labels):
            break
        labels = nxt
    # parcels numbered by their lowest voxel index
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    assignment = rank[inverse].astype(np.int64)
    return Parcellation(
        n_parcels=int(order.size),
        assignment=assignment,
        merges=np.array(merges, dtype=np.int64).reshape(-1, 2),
        costs=np.array(costs, dtype=np.float64),
    )


def reduce(maps: np.ndarray, parcellation: Parcellation) -> np.ndarray:
    """Parcel means of each map, shape (n, n_parcels)."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape[-1] != parcellation.p:
        raise ValueError(f"maps have {maps.shape[-1]} voxels, parcellation has {parcellation.p}")
    return np.asarray(parcellation.averaging.T @ maps.T).T


@dataclass(frozen=True, eq=False)
class FeatureSelection:
    f_scores: np.ndarray
    selected: np.ndarray


def anova_f(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """One-way F statistic per feature between the two label groups.

    Features with zero total variance score 0; perfectly separated features
    (zero within-group variance, non-zero between) score +inf.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n = y.size
    n1 = int(y.sum())
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("ANOVA needs both classes present")
    if n < 3:
        raise ValueError("ANOVA needs at least 3 samples")
    m1 = X[y].mean(axis=0)
    m0 = X[~y].mean(axis=0)
    grand = X.mean(axis=0)
    ssb = n1 * (m1 - grand) ** 2 + n0 * (m0 - grand) ** 2
    ssw = ((X[y] - m1) ** 2).sum(axis=0) + ((X[~y] - m0) ** 2).sum(axis=0)
    scale = np.maximum(np.abs(grand), X.std(axis=0)) ** 2 * n
    tiny = ssw <= 1e-28 * np.maximum(scale, np.finfo(float).tiny)
    ssb = np.where(ssb <= 1e-28 * np.maximum(scale, np.finfo(float).tiny), 0.0, ssb)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = ssb / (ssw / (n - 2))
    return np.where(tiny, np.where(ssb > 0, np.inf, 0.0), f)


def anova_select(features: np.ndarray, labels: np.ndarray, fraction: float) -> FeatureSelection:
    """Keep the ``ceil(fraction * q)`` features with the largest F (ties: lower index)."""
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("labels contain a single class")
    f = anova_f(features, y)
    k = math.ceil(fraction * f.size - 1e-9)
    top = np.argsort(-f, kind="stable")[:k]
    return FeatureSelection(f_scores=f, selected=np.sort(top))


def backproject(weights: np.ndarray, selection: FeatureSelection | np.ndarray,
                parcellation: Parcellation) -> np.ndarray:
    """Voxel map giving each voxel the weight of its (selected) parcel, 0 elsewhere."""
    idx = selection.selected if isinstance(selection, FeatureSelection) else np.asarray(selection)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != idx.shape:
        raise ValueError(f"{w.size} weights for {idx.size} selected parcels")
    parcel_w = np.zeros(parcellation.n_parcels)
    parcel_w[idx] = w
    return parcel_w[parcellation.assignment]


def save_parcellation(path, parc: Parcellation) -> None:
    """Binary little-endian: magic, u32 p/n_parcels/n_merges, u32 assignment, (u32, u32, f64) merges."""
    m = len(parc.costs)
    rec = np.zeros(m, dtype=[("a", "<u4"), ("b", "<u4"), ("cost", "<f8")])
    rec["a"], rec["b"], rec["cost"] = parc.merges[:, 0], parc.merges[:, 1], parc.costs
    payload = (PARC_MAGIC + struct.pack("<III", parc.p, parc.n_parcels, m)
               + parc.assignment.astype("<u4").tobytes() + rec.tobytes())
    Path(path).write_bytes(payload)


def load_parcellation(path) -> Parcellation:
    buf = Path(path).read_bytes()
    if not buf.startswith(PARC_MAGIC):
        raise ValueError(f"{path}: not a parcellation file")
    off = len(PARC_MAGIC)
    p, q, m = struct.unpack_from("<III", buf, off)
    off += 12
    assignment = np.frombuffer(buf, dtype="<u4", count=p, offset=off).astype(np.int64)
    off += 4 * p
    rec = np.frombuffer(buf, dtype=[("a", "<u4"), ("b", "<u4"), ("cost", "<f8")], count=m, offset=off)
    merges = np.column_stack([rec["a"], rec["b"]]).astype(np.int64).reshape(-1, 2)
    return Parcellation(q, assignment, merges, rec["cost"].astype(np.float64))

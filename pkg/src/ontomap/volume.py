"""Voxel-grid geometry, brain masks, spatial adjacency, smoothing and thresholding.

In-mask voxels are always enumerated in C order over ``(x, y, z)``, so a
vector of length ``mask.p`` is unambiguous given its mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

# Gaussian kernels are cut at this many standard deviations.
TRUNCATE = 4.0


@dataclass(frozen=True)
class VolumeGrid:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(v) for v in self.voxel_size)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be 3 positive integers, got {self.dims}")
        if len(vs) != 3 or not all(v > 0 and math.isfinite(v) for v in vs):
            raise ValueError(f"voxel sizes must be 3 positive reals, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True, eq=False)
class BrainMask:
    """Boolean support of the brain within a grid.

    Parameters
    ----------
    grid : VolumeGrid
    in_mask : ndarray of bool, shape ``grid.dims``
    """

    grid: VolumeGrid
    in_mask: np.ndarray
    flat_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.in_mask).astype(bool)
        if arr.shape != self.grid.dims:
            raise ValueError(f"mask shape {arr.shape} does not match grid {self.grid.dims}")
        if not arr.any():
            raise ValueError("mask must contain at least one voxel")
        arr = arr.copy()
        arr.setflags(write=False)
        flat = np.flatnonzero(arr.ravel(order="C"))
        flat.setflags(write=False)
        object.__setattr__(self, "in_mask", arr)
        object.__setattr__(self, "flat_index", flat)

    @classmethod
    def full(cls, dims: Sequence[int], voxel_size=(1.0, 1.0, 1.0)) -> "BrainMask":
        grid = VolumeGrid(tuple(dims), tuple(voxel_size))
        return cls(grid, np.ones(grid.dims, dtype=bool))

    @classmethod
    def ellipsoid(cls, dims: Sequence[int], voxel_size=(1.0, 1.0, 1.0),
                  scale: float = 1.0) -> "BrainMask":
        """Ellipsoid inscribed in the grid, radii multiplied by ``scale``."""
        grid = VolumeGrid(tuple(dims), tuple(voxel_size))
        axes = [np.arange(d) - (d - 1) / 2.0 for d in grid.dims]
        xx, yy, zz = np.meshgrid(*axes, indexing="ij")
        radii = [scale * d / 2.0 for d in grid.dims]
        inside = (xx / radii[0]) ** 2 + (yy / radii[1]) ** 2 + (zz / radii[2]) ** 2 <= 1.0
        return cls(grid, inside)

    @property
    def p(self) -> int:
        return int(self.flat_index.size)

    @property
    def coords(self) -> np.ndarray:
        """Integer grid coordinates of in-mask voxels, shape (p, 3)."""
        return np.column_stack(np.unravel_index(self.flat_index, self.grid.dims))

    def same_as(self, other: "BrainMask") -> bool:
        return self.grid == other.grid and np.array_equal(self.in_mask, other.in_mask)

    def unmask(self, data: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter a (..., p) array back into (..., nx, ny, nz) volumes."""
        data = np.asarray(data)
        if data.shape[-1] != self.p:
            raise ValueError(f"expected last axis of length {self.p}, got {data.shape[-1]}")
        out = np.full(data.shape[:-1] + (self.grid.n_cells,), fill, dtype=np.result_type(data, fill))
        out[..., self.flat_index] = data
        return out.reshape(data.shape[:-1] + self.grid.dims)

    def apply(self, volume: np.ndarray) -> np.ndarray:
        """Gather in-mask values from (..., nx, ny, nz) volumes."""
        volume = np.asarray(volume)
        lead = volume.shape[:-3]
        return volume.reshape(lead + (-1,))[..., self.flat_index]


@dataclass(frozen=True, eq=False)
class MaskedVector:
    mask: BrainMask
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != (self.mask.p,):
            raise ValueError(f"vector length {data.shape} does not match mask p={self.mask.p}")
        if not np.all(np.isfinite(data)):
            raise ValueError("masked vector contains non-finite values")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected graph over in-mask voxels; ``edges`` rows are (i, j), i < j."""

    n_nodes: int
    edges: np.ndarray

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges.tolist():
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs

    def to_sparse(self):
        from scipy import sparse

        m = len(self.edges)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sparse.csr_matrix((np.ones(2 * m), (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def n_components(self) -> int:
        from scipy.sparse.csgraph import connected_components

        return int(connected_components(self.to_sparse(), directed=False)[0])


def build_adjacency(mask: BrainMask) -> AdjacencyGraph:
    """Face-neighbour (6-connectivity) graph between in-mask voxels."""
    lookup = np.full(mask.grid.n_cells, -1, dtype=np.int64)
    lookup[mask.flat_index] = np.arange(mask.p)
    lookup = lookup.reshape(mask.grid.dims)
    pairs = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = lookup[tuple(lo)].ravel()
        b = lookup[tuple(hi)].ravel()
        keep = (a >= 0) & (b >= 0)
        pairs.append(np.column_stack([a[keep], b[keep]]))
    edges = np.concatenate(pairs, axis=0)
    edges.sort(axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return AdjacencyGraph(mask.p, edges[order])


def _gaussian_volume(vol: np.ndarray, sigma: float, spatial_axes: int = 3) -> np.ndarray:
    sig = (0.0,) * (vol.ndim - spatial_axes) + (sigma,) * spatial_axes
    return ndimage.gaussian_filter(vol, sigma=sig, mode="constant", cval=0.0, truncate=TRUNCATE)


def smooth_data(mask: BrainMask, data: np.ndarray, sigma_voxels: float) -> np.ndarray:
    """Mask-renormalized Gaussian smoothing of a (..., p) array."""
    if sigma_voxels < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma_voxels}")
    data = np.asarray(data, dtype=np.float64)
    if sigma_voxels == 0:
        return data.copy()
    num = _gaussian_volume(mask.unmask(data), sigma_voxels)
    den = _gaussian_volume(mask.in_mask.astype(np.float64), sigma_voxels)
    return mask.apply(num) / mask.apply(den)


def smoothing_gain(mask: BrainMask, sigma_voxels: float) -> np.ndarray:
    """Per-voxel standard deviation of smoothed unit white noise.

    For the renormalized operator ``S = K m / (K m 1)`` the row norm is
    ``sqrt(K^2 m) / (K m)``; with separable kernels ``K^2`` is again separable.
    """
    if sigma_voxels == 0:
        return np.ones(mask.p)
    m = mask.in_mask.astype(np.float64)
    den = mask.apply(_gaussian_volume(m, sigma_voxels))
    radius = int(TRUNCATE * sigma_voxels + 0.5)
    x = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (x / sigma_voxels) ** 2)
    k1 /= k1.sum()
    sq = m
    for axis in range(3):
        sq = ndimage.correlate1d(sq, k1 ** 2, axis=axis, mode="constant", cval=0.0)
    return np.sqrt(mask.apply(sq)) / den


def smooth(vec: MaskedVector, sigma_voxels: float) -> MaskedVector:
    """Isotropic Gaussian smoothing restricted to the mask.

    The kernel is truncated at 4 sigma and renormalized over the in-mask
    support, so constant vectors are preserved exactly (up to rounding).
    ``sigma_voxels == 0`` returns the input values unchanged.
    """
    return MaskedVector(vec.mask, smooth_data(vec.mask, vec.data, sigma_voxels))


def top_fraction_indices(values: np.ndarray, fraction: float) -> np.ndarray:
    if not (0 < fraction <= 1):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    values = np.asarray(values, dtype=np.float64)
    k = math.ceil(fraction * values.size - 1e-9)
    # stable sort on -values keeps lower index first among ties
    return np.argsort(-values, kind="stable")[:k]


def top_fraction_mask(vec: MaskedVector | np.ndarray, fraction: float) -> np.ndarray:
    """Boolean vector selecting the ``ceil(fraction * p)`` largest values.

    Ties are broken in favour of the lowest voxel index.
    """
    values = vec.data if isinstance(vec, MaskedVector) else np.asarray(vec)
    out = np.zeros(values.size, dtype=bool)
    out[top_fraction_indices(values, fraction)] = True
    return out


OUTLINE_ORDERS = ("smooth-then-threshold", "threshold-then-smooth")


def outline_mask(mask: BrainMask, values: np.ndarray, sigma_voxels: float, fraction: float = 0.05,
                 order: str = "smooth-then-threshold") -> np.ndarray:
    """Top-``fraction`` voxels of a map after Gaussian smoothing.

    ``threshold-then-smooth`` smooths the indicator of the raw top voxels and
    keeps the same number of voxels from the smoothed indicator. Either way the
    mask has ``ceil(fraction * p)`` voxels.
    """
    values = np.asarray(values, dtype=np.float64)
    if order == "smooth-then-threshold":
        return top_fraction_mask(smooth_data(mask, values, sigma_voxels), fraction)
    if order == "threshold-then-smooth":
        raw = top_fraction_mask(values, fraction).astype(np.float64)
        return top_fraction_mask(smooth_data(mask, raw, sigma_voxels), fraction)
    raise ValueError(f"unknown outline order {order!r}; expected one of {OUTLINE_ORDERS}")

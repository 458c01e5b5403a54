"""Farthest point sampling, capped fixed-radius neighbor search and
multi-scale grouping.

Neighbor queries use strict inclusion ``|x - c| < r``, evaluated as
``dx*dx + dy*dy + dz*dz < r*r`` in both the numba and numpy paths so the two
agree bit for bit. When more than ``cap`` points qualify, the ``cap`` nearest
are kept with ties going to the smaller index. Results are sorted by
ascending distance.
"""
from dataclasses import dataclass

import numpy as np

from ._accel import NUMBA_ENABLED, njit
from .errors import ConfigurationError, InsufficientPointsError, InvalidArgumentError

UNCAPPED = np.iinfo(np.int64).max


# --- kernels --------------------------------------------------------------------

@njit
def _fps_kernel(points, k, seed):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed
    for s in range(k):
        out[s] = cur
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1.0
        nxt = 0
        for i in range(n):
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best:
                best = mind[i]
                nxt = i
        cur = nxt
    return out


def _fps_numpy(points, k, seed):
    n = points.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    cur = seed
    for s in range(k):
        out[s] = cur
        dx = px - px[cur]
        dy = py - py[cur]
        dz = pz - pz[cur]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        cur = int(np.argmax(mind))
    return out


@njit
def _grid_query_kernel(points, order, cell_keys, cell_starts, cell_ends, origin, cell,
                       dims, centers, self_idx, radius, cap):
    m = centers.shape[0]
    r2 = radius * radius
    ring = int(np.ceil(radius / cell))
    width = min(cap, points.shape[0])
    out_idx = np.full((m, max(width, 1)), -1, dtype=np.int64)
    out_d2 = np.zeros((m, max(width, 1)))
    counts = np.zeros(m, dtype=np.int64)
    cand_i = np.empty(points.shape[0], dtype=np.int64)
    cand_d = np.empty(points.shape[0])
    for c in range(m):
        qx = centers[c, 0]
        qy = centers[c, 1]
        qz = centers[c, 2]
        ix = int(np.floor((qx - origin[0]) / cell))
        iy = int(np.floor((qy - origin[1]) / cell))
        iz = int(np.floor((qz - origin[2]) / cell))
        nc = 0
        for gz in range(max(iz - ring, 0), min(iz + ring, dims[2] - 1) + 1):
            for gy in range(max(iy - ring, 0), min(iy + ring, dims[1] - 1) + 1):
                for gx in range(max(ix - ring, 0), min(ix + ring, dims[0] - 1) + 1):
                    key = gx + dims[0] * (gy + dims[1] * gz)
                    pos = np.searchsorted(cell_keys, key)
                    if pos >= cell_keys.shape[0] or cell_keys[pos] != key:
                        continue
                    for o in range(cell_starts[pos], cell_ends[pos]):
                        i = order[o]
                        dx = points[i, 0] - qx
                        dy = points[i, 1] - qy
                        dz = points[i, 2] - qz
                        d = dx * dx + dy * dy + dz * dz
                        if d < r2:
                            cand_i[nc] = i
                            cand_d[nc] = d
                            nc += 1
        if nc == 0:
            continue
        ci = cand_i[:nc]
        cd = cand_d[:nc]
        by_index = np.argsort(ci)
        ci = ci[by_index]
        cd = cd[by_index]
        key_d = cd.copy()
        s = self_idx[c]
        if s >= 0:
            for j in range(nc):
                if ci[j] == s:
                    key_d[j] = -1.0
        by_dist = np.argsort(key_d, kind="mergesort")
        take = min(nc, width)
        for j in range(take):
            out_idx[c, j] = ci[by_dist[j]]
            out_d2[c, j] = cd[by_dist[j]]
        counts[c] = take
    return out_idx, out_d2, counts


def _brute_query_numpy(points, centers, self_idx, radius, cap, chunk=256):
    r2 = radius * radius
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    idx_parts, d2_parts, counts = [], [], np.zeros(len(centers), dtype=np.int64)
    for start in range(0, len(centers), chunk):
        blk = centers[start:start + chunk]
        dx = px[None, :] - blk[:, 0:1]
        dy = py[None, :] - blk[:, 1:2]
        dz = pz[None, :] - blk[:, 2:3]
        d2 = dx * dx + dy * dy + dz * dz
        for row in range(blk.shape[0]):
            cand = np.flatnonzero(d2[row] < r2)
            if cand.size == 0:
                continue
            cd = d2[row, cand]
            key = cd.copy()
            s = self_idx[start + row]
            if s >= 0:
                key[cand == s] = -1.0
            sel = np.argsort(key, kind="stable")[:min(cap, cand.size)]
            idx_parts.append(cand[sel])
            d2_parts.append(cd[sel])
            counts[start + row] = sel.size
    if idx_parts:
        return np.concatenate(idx_parts), np.concatenate(d2_parts), counts
    return np.zeros(0, dtype=np.int64), np.zeros(0), counts


# --- public API -------------------------------------------------------------------

def _coords(cloud):
    pts = getattr(cloud, "points", cloud)
    return np.ascontiguousarray(pts, dtype=np.float64)


def lexicographic_min(points):
    """Index of the lexicographically smallest (x, y, z); smallest index on ties."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])


def farthest_point_sampling(cloud, k):
    """Greedy farthest point sampling, seeded at the lexicographically smallest point.

    Each step picks the point with the largest squared distance to the selected
    set; ties go to the smallest index. The seed depends only on coordinates,
    so the selected *coordinates* do not depend on the input order.
    """
    pts = _coords(cloud)
    n = pts.shape[0]
    if k <= 0:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if k > n:
        raise InsufficientPointsError(f"cannot sample {k} points from a cloud of {n}")
    seed = lexicographic_min(pts)
    if NUMBA_ENABLED:
        return _fps_kernel(pts, int(k), seed)
    return _fps_numpy(pts, int(k), seed)


@dataclass(frozen=True)
class Neighborhoods:
    """Capped radius-query results for many centers in CSR layout."""

    offsets: np.ndarray
    indices: np.ndarray
    dist2: np.ndarray

    def __len__(self):
        return len(self.offsets) - 1

    def counts(self):
        return np.diff(self.offsets)

    def row(self, i):
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def segment_ids(self):
        return np.repeat(np.arange(len(self)), self.counts())


class NeighborIndex:
    """Uniform grid over the coordinates of a cloud.

    The cell side defaults to the radius the index will mostly be queried with;
    larger query radii scan a wider ring of cells. Immutable after
    construction.
    """

    def __init__(self, cloud, cell_size):
        if not cell_size > 0:
            raise InvalidArgumentError(f"cell size must be positive, got {cell_size}")
        self.points = _coords(cloud)
        self.cell_size = float(cell_size)
        n = self.points.shape[0]
        if n:
            self.origin = self.points.min(axis=0)
            ijk = np.floor((self.points - self.origin) / self.cell_size).astype(np.int64)
            self.dims = ijk.max(axis=0) + 1
        else:
            self.origin = np.zeros(3)
            ijk = np.zeros((0, 3), dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
        if float(np.prod(self.dims.astype(np.float64))) > 2.0 ** 62:
            raise InvalidArgumentError("grid too fine for the cloud extent; increase cell size")
        keys = ijk[:, 0] + self.dims[0] * (ijk[:, 1] + self.dims[1] * ijk[:, 2])
        self.order = np.argsort(keys, kind="stable").astype(np.int64)
        sorted_keys = keys[self.order]
        self.cell_keys, self.cell_starts = np.unique(sorted_keys, return_index=True)
        self.cell_starts = self.cell_starts.astype(np.int64)
        self.cell_ends = np.append(self.cell_starts[1:], n).astype(np.int64)

    def __len__(self):
        return self.points.shape[0]

    def query_many(self, centers, radius, cap=None, self_indices=None):
        """Neighbors of every center; returns :class:`Neighborhoods`.

        ``self_indices[i]``, when >= 0, names a point that must sort first in
        row ``i`` (the center itself during set abstraction).
        """
        if not radius > 0:
            raise InvalidArgumentError(f"radius must be positive, got {radius}")
        cap = UNCAPPED if cap is None else int(cap)
        if cap < 1:
            raise InvalidArgumentError(f"cap must be >= 1, got {cap}")
        centers = np.ascontiguousarray(np.asarray(centers, dtype=np.float64).reshape(-1, 3))
        m = centers.shape[0]
        if self_indices is None:
            self_indices = np.full(m, -1, dtype=np.int64)
        self_indices = np.asarray(self_indices, dtype=np.int64)
        if len(self) == 0 or m == 0:
            return Neighborhoods(np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                 np.zeros(0))
        if NUMBA_ENABLED:
            out_idx, out_d2, counts = _grid_query_kernel(
                self.points, self.order, self.cell_keys, self.cell_starts, self.cell_ends,
                self.origin, self.cell_size, self.dims, centers, self_indices,
                float(radius), cap)
            mask = np.arange(out_idx.shape[1])[None, :] < counts[:, None]
            idx, d2 = out_idx[mask], out_d2[mask]
        else:
            idx, d2, counts = _brute_query_numpy(self.points, centers, self_indices,
                                                 float(radius), cap)
        offsets = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return Neighborhoods(offsets, idx.astype(np.int64), d2)


def radius_neighbors(index, center, radius, cap=None):
    """Indices of points strictly within ``radius`` of ``center``, nearest first."""
    return index.query_many(np.asarray(center, dtype=np.float64).reshape(1, 3), radius, cap).row(0)


@dataclass(frozen=True)
class GroupedNeighborhood:
    center: int
    neighbors: np.ndarray
    displacements: np.ndarray


@dataclass(frozen=True)
class MultiScaleGroups:
    """Per-radius neighborhoods around a fixed list of centers."""

    centers: np.ndarray
    radii: tuple
    caps: tuple
    scales: tuple
    displacements: tuple

    def neighborhood(self, i, level):
        nb = self.scales[level]
        lo, hi = nb.offsets[i], nb.offsets[i + 1]
        return GroupedNeighborhood(int(self.centers[i]), nb.indices[lo:hi],
                                   self.displacements[level][lo:hi])

    def __getitem__(self, i):
        return [self.neighborhood(i, level) for level in range(len(self.radii))]


def group_multi_scale(cloud, centers, radii, caps, index=None):
    """Group every center at each radius; the center always belongs to its group."""
    radii = tuple(float(r) for r in radii)
    caps = tuple(int(c) for c in caps)
    if len(radii) != len(caps) or not radii:
        raise ConfigurationError(f"need one cap per radius, got {len(radii)} radii and {len(caps)} caps")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ConfigurationError(f"radii must be strictly increasing, got {radii}")
    pts = _coords(cloud)
    centers = np.asarray(centers, dtype=np.int64)
    if index is None:
        index = NeighborIndex(pts, radii[-1])
    scales, disps = [], []
    for r, cap in zip(radii, caps):
        nb = index.query_many(pts[centers], r, cap, self_indices=centers)
        scales.append(nb)
        disps.append(pts[nb.indices] - pts[centers][nb.segment_ids()])
    return MultiScaleGroups(centers, radii, caps, tuple(scales), tuple(disps))

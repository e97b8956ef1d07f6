"""Voxelization of LiDAR point clouds.

Grids are indexed (z, x, y): axis 0 is height, axis 1 runs along LiDAR x
(forward) and axis 2 along LiDAR y (left). Voxel intervals are half-open,
so a point on a voxel's upper face belongs to the next voxel and points on
the grid's upper boundary fall outside.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from focal3d.errors import DomainError, StructuralError

DEFAULT_MAX_POINTS = 35


@dataclass(frozen=True)
class PointCloud:
    """(N, 4) array of x, y, z, reflectance."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise StructuralError(f"point cloud must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 4)))


@dataclass(frozen=True)
class VoxelGridSpec:
    """Regular grid: ``origin`` is (x0, y0, z0) in meters; ``voxel_size``
    and ``dims`` follow the (z, x, y) axis order."""

    origin: tuple
    voxel_size: tuple
    dims: tuple

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        size = tuple(float(v) for v in self.voxel_size)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(size) != 3 or len(dims) != 3:
            raise DomainError("grid spec needs 3 components per field")
        if min(size) <= 0:
            raise DomainError(f"voxel sizes must be positive, got {size}")
        if min(dims) < 1:
            raise DomainError(f"grid dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "dims", dims)

    @property
    def n_voxels(self):
        d, h, w = self.dims
        return d * h * w

    @property
    def extent(self):
        """((x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi)) in meters."""
        x0, y0, z0 = self.origin
        dz, dx, dy = self.voxel_size
        d, h, w = self.dims
        return (x0, x0 + h * dx), (y0, y0 + w * dy), (z0, z0 + d * dz)

    def voxel_indices(self, points):
        """Per-point (z, x, y) integer indices and an in-bounds mask."""
        pts = np.asarray(points, dtype=np.float64)
        x0, y0, z0 = self.origin
        dz, dx, dy = self.voxel_size
        idx = np.stack([
            np.floor((pts[:, 2] - z0) / dz),
            np.floor((pts[:, 0] - x0) / dx),
            np.floor((pts[:, 1] - y0) / dy),
        ], axis=1).astype(np.int64) if len(pts) else np.zeros((0, 3), dtype=np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        return idx, inside

    def flat_index(self, idx):
        d, h, w = self.dims
        idx = np.asarray(idx, dtype=np.int64)
        return (idx[..., 0] * h + idx[..., 1]) * w + idx[..., 2]

    def unflatten(self, flat):
        d, h, w = self.dims
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack([flat // (h * w), (flat // w) % h, flat % w], axis=-1)

    def voxel_center(self, idx):
        """Metric (x, y, z) center of voxel(s) with (z, x, y) index."""
        idx = np.asarray(idx, dtype=np.float64)
        x0, y0, z0 = self.origin
        dz, dx, dy = self.voxel_size
        return np.stack([
            x0 + (idx[..., 1] + 0.5) * dx,
            y0 + (idx[..., 2] + 0.5) * dy,
            z0 + (idx[..., 0] + 0.5) * dz,
        ], axis=-1)

    def downsample(self, factors):
        """Coarser grid with the same origin; ``factors`` in (z, x, y) order."""
        f = tuple(int(v) for v in factors)
        dims = tuple(-(-n // k) for n, k in zip(self.dims, f))
        size = tuple(s * k for s, k in zip(self.voxel_size, f))
        return VoxelGridSpec(self.origin, size, dims)

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["origin"], d["voxel_size"], d["dims"])


GRID_PRESETS = {
    # KITTI car extents: x [0, 80], y [-35.2, 35.2], z [-3, 1]
    "voxelnet-car": VoxelGridSpec((0.0, -35.2, -3.0), (0.4, 0.2, 0.2), (10, 400, 352)),
    # x [0, 80], y [-50, 50], z [-3, 0.2] at 10 cm
    "3dfcn-car": VoxelGridSpec((0.0, -50.0, -3.0), (0.1, 0.1, 0.1), (32, 800, 1000)),
    # desk-scale scene: x [0, 25.6], y [-12.8, 12.8], z [-3, 1]
    "voxelnet-mini": VoxelGridSpec((0.0, -12.8, -3.0), (0.4, 0.4, 0.4), (10, 64, 64)),
    "3dfcn-mini": VoxelGridSpec((0.0, -12.8, -3.0), (0.125, 0.4, 0.4), (32, 64, 64)),
}


@dataclass(frozen=True)
class DenseOccupancy:
    grid: np.ndarray
    spec: VoxelGridSpec
    n_dropped: int = 0


@dataclass(frozen=True)
class SparseVoxelSet:
    """Per-voxel point rows, grouped contiguously.

    ``coords`` (V, 3) holds unique (z, x, y) indices sorted by flat index;
    the rows of voxel ``i`` are ``features[starts[i]:starts[i] + counts[i]]``
    with columns x, y, z, r, x - cx, y - cy, z - cz. ``point_voxel`` maps
    every input point to its flat voxel index (-1 when out of bounds),
    including points discarded by the capacity limit.
    """

    coords: np.ndarray
    features: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    point_index: np.ndarray
    point_voxel: np.ndarray
    spec: VoxelGridSpec
    max_points: int
    n_dropped: int = 0

    def __len__(self):
        return len(self.coords)

    def voxel_rows(self, i):
        s = self.starts[i]
        return self.features[s:s + self.counts[i]]

    @property
    def flat_coords(self):
        return self.spec.flat_index(self.coords)


def voxelize_occupancy(cloud, spec):
    """Binary (D, H, W) grid: 1 where at least one point falls."""
    grid = np.zeros(spec.dims, dtype=np.uint8)
    idx, inside = spec.voxel_indices(cloud.points)
    sel = idx[inside]
    grid[sel[:, 0], sel[:, 1], sel[:, 2]] = 1
    return DenseOccupancy(grid, spec, int((~inside).sum()))


def voxelize_sparse(cloud, spec, max_points=DEFAULT_MAX_POINTS, seed=0):
    """Group in-bounds points by voxel, keeping at most ``max_points`` each.

    Over-full voxels keep a uniformly random subset drawn from a generator
    keyed on (seed, voxel index), so the result does not depend on how the
    cloud is traversed. Retained rows stay in original point order.
    """
    if max_points is None:
        max_points = np.iinfo(np.int64).max
    if max_points < 1:
        raise DomainError(f"max points per voxel must be >= 1, got {max_points}")
    pts = cloud.points
    idx, inside = spec.voxel_indices(pts)
    point_voxel = np.full(len(pts), -1, dtype=np.int64)
    point_voxel[inside] = spec.flat_index(idx[inside])

    members = np.flatnonzero(inside)
    order = members[np.argsort(point_voxel[members], kind="stable")]
    flat_sorted = point_voxel[order]
    uniq, first, counts = np.unique(flat_sorted, return_index=True, return_counts=True)

    keep = []
    for v, s, n in zip(uniq, first, counts):
        rows = order[s:s + n]
        if n > max_points:
            rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(v)])
            rows = np.sort(rows[rng.permutation(n)[:max_points]])
        keep.append(rows)
    if keep:
        kept_counts = np.array([len(r) for r in keep], dtype=np.int64)
        point_index = np.concatenate(keep)
    else:
        kept_counts = np.zeros(0, dtype=np.int64)
        point_index = np.zeros(0, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(kept_counts)[:-1]]).astype(np.int64) if len(keep) else kept_counts

    raw = pts[point_index]
    features = np.zeros((len(point_index), 7))
    features[:, :4] = raw
    if len(point_index):
        centroid = np.add.reduceat(raw[:, :3], starts, axis=0) / kept_counts[:, None]
        features[:, 4:] = raw[:, :3] - np.repeat(centroid, kept_counts, axis=0)
    return SparseVoxelSet(
        coords=spec.unflatten(uniq) if len(uniq) else np.zeros((0, 3), dtype=np.int64),
        features=features,
        starts=starts,
        counts=kept_counts,
        point_index=point_index,
        point_voxel=point_voxel,
        spec=spec,
        max_points=int(min(max_points, np.iinfo(np.int32).max)),
        n_dropped=int((~inside).sum()),
    )


def scatter_to_dense(coords, features, spec):
    """Place per-voxel feature vectors into a zero (C, D, H, W) array."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(coords):
        raise StructuralError(f"need one feature row per voxel: {features.shape} vs {len(coords)} voxels")
    flat = spec.flat_index(coords)
    if len(np.unique(flat)) != len(flat):
        raise StructuralError("duplicate voxel indices in scatter")
    if len(coords) and (np.any(coords < 0) or np.any(coords >= np.asarray(spec.dims))):
        raise StructuralError("voxel index out of bounds")
    dense = np.zeros((features.shape[1], spec.n_voxels))
    dense[:, flat] = features.T
    return dense.reshape((features.shape[1],) + spec.dims)


def gather_from_dense(dense, coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return dense[:, coords[:, 0], coords[:, 1], coords[:, 2]].T.copy()


@dataclass(frozen=True)
class OccupancyStats:
    non_empty: int
    fraction: float
    per_z: np.ndarray


def occupancy_stats(grid):
    """Non-empty voxel count, occupied fraction and counts per z slice."""
    if isinstance(grid, SparseVoxelSet):
        spec = grid.spec
        per_z = np.bincount(grid.coords[:, 0], minlength=spec.dims[0]) if len(grid) else np.zeros(spec.dims[0], int)
        total = spec.n_voxels
    else:
        arr = grid.grid if isinstance(grid, DenseOccupancy) else np.asarray(grid)
        per_z = (arr != 0).reshape(arr.shape[0], -1).sum(axis=1)
        total = arr.size
    non_empty = int(per_z.sum())
    return OccupancyStats(non_empty, non_empty / total, per_z.astype(np.int64))

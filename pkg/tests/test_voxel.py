import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from focal3d.errors import DomainError, StructuralError
from focal3d.voxel import (
    GRID_PRESETS, PointCloud, VoxelGridSpec, gather_from_dense, occupancy_stats, scatter_to_dense,
    voxelize_occupancy, voxelize_sparse,
)

SPEC = VoxelGridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (2, 3, 4))


def cloud(rows):
    return PointCloud(np.asarray(rows, dtype=np.float64).reshape(-1, 4))


def random_cloud(rng, n, spec=SPEC, pad=0.5):
    (x0, x1), (y0, y1), (z0, z1) = spec.extent
    pts = np.c_[rng.uniform(x0 - pad, x1 + pad, n), rng.uniform(y0 - pad, y1 + pad, n),
                rng.uniform(z0 - pad, z1 + pad, n), rng.random(n)]
    return PointCloud(pts)


def test_point_cloud_validation():
    with pytest.raises(StructuralError):
        PointCloud(np.zeros((3, 3)))
    with pytest.raises(DomainError):
        PointCloud(np.array([[0, 0, np.inf, 0]]))
    assert len(PointCloud.empty()) == 0


def test_spec_validation():
    with pytest.raises(DomainError):
        VoxelGridSpec((0, 0, 0), (0, 1, 1), (1, 1, 1))
    with pytest.raises(DomainError):
        VoxelGridSpec((0, 0, 0), (1, 1, 1), (0, 1, 1))


def test_single_point_occupancy():
    occ = voxelize_occupancy(cloud([[1.5, 2.5, 0.5, 0.0]]), SPEC)
    assert occ.grid.sum() == 1
    assert occ.grid[0, 1, 2] == 1


def test_boundary_rule():
    # on an interior upper face -> next voxel; on the grid's upper boundary -> dropped
    occ = voxelize_occupancy(cloud([[1.0, 0.0, 0.0, 0], [3.0, 0.5, 0.5, 0]]), SPEC)
    assert occ.grid[0, 1, 0] == 1
    assert occ.grid.sum() == 1 and occ.n_dropped == 1


def test_empty_cloud():
    occ = voxelize_occupancy(PointCloud.empty(), SPEC)
    assert occ.grid.sum() == 0
    s = voxelize_sparse(PointCloud.empty(), SPEC)
    assert len(s) == 0 and s.features.shape == (0, 7)


def test_capacity_limit_and_features():
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(0.1, 0.9, (50, 3)), rng.random(50)]
    s = voxelize_sparse(PointCloud(pts), SPEC, max_points=35, seed=3)
    assert len(s) == 1 and s.counts[0] == 35
    rows = s.voxel_rows(0)
    assert np.allclose(rows[:, 4:].mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(rows[:, :4], pts[s.point_index])
    assert np.all(np.diff(s.point_index) > 0)
    with pytest.raises(DomainError):
        voxelize_sparse(PointCloud(pts), SPEC, max_points=0)


@given(st.integers(0, 400), st.integers(0, 2**31 - 1), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_sparse_invariants(n, seed, cap):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, n)
    s = voxelize_sparse(c, SPEC, max_points=cap, seed=seed)
    occ = voxelize_occupancy(c, SPEC)
    assert len(s) == occ.grid.sum()
    assert np.all(s.counts >= 1) and np.all(s.counts <= cap)
    flat = s.flat_coords
    assert np.all(np.diff(flat) > 0)
    inside = s.point_voxel >= 0
    assert inside.sum() + s.n_dropped == n
    # every retained point lies in the voxel it is filed under
    owners = np.repeat(flat, s.counts)
    assert np.array_equal(s.point_voxel[s.point_index], owners)


def test_sparse_deterministic_and_order_independent():
    rng = np.random.default_rng(5)
    pts = np.c_[rng.uniform(0, 0.99, (200, 3)), rng.random(200)]
    a = voxelize_sparse(PointCloud(pts), SPEC, 10, seed=1)
    b = voxelize_sparse(PointCloud(pts), SPEC, 10, seed=1)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.point_index, b.point_index)
    perm = rng.permutation(200)
    c = voxelize_sparse(PointCloud(pts[perm]), SPEC, 10, seed=1)
    assert len(c) == len(a)


def test_scatter_gather_round_trip():
    rng = np.random.default_rng(2)
    coords = SPEC.unflatten(rng.choice(SPEC.n_voxels, 7, replace=False))
    feats = rng.normal(size=(7, 5))
    dense = scatter_to_dense(coords, feats, SPEC)
    assert dense.shape == (5,) + SPEC.dims
    assert np.array_equal(gather_from_dense(dense, coords), feats)
    assert np.count_nonzero(dense.any(axis=0)) == 7


def test_scatter_errors():
    with pytest.raises(StructuralError):
        scatter_to_dense([[0, 0, 0], [0, 0, 0]], np.ones((2, 1)), SPEC)
    with pytest.raises(StructuralError):
        scatter_to_dense([[5, 0, 0]], np.ones((1, 1)), SPEC)
    with pytest.raises(StructuralError):
        scatter_to_dense([[0, 0, 0]], np.ones((2, 1)), SPEC)


def test_occupancy_stats():
    occ = voxelize_occupancy(cloud([[0.5, 0.5, 0.5, 0], [0.5, 1.5, 0.5, 0], [0.5, 0.5, 1.5, 0]]), SPEC)
    st_ = occupancy_stats(occ)
    assert st_.non_empty == 3
    assert st_.fraction == pytest.approx(3 / 24)
    assert st_.per_z.tolist() == [2, 1]


def test_flat_index_round_trip():
    idx = np.array([[1, 2, 3], [0, 0, 0], [1, 0, 2]])
    assert np.array_equal(SPEC.unflatten(SPEC.flat_index(idx)), idx)
    centers = SPEC.voxel_center(idx)
    back, inside = SPEC.voxel_indices(centers)
    assert inside.all() and np.array_equal(back, idx)


def test_presets_and_serialization():
    car = GRID_PRESETS["voxelnet-car"]
    assert car.dims == (10, 400, 352)
    assert VoxelGridSpec.from_dict(car.to_dict()) == car
    (x0, x1), (y0, y1), (z0, z1) = car.extent
    assert (x1 - x0, y1 - y0, z1 - z0) == pytest.approx((80.0, 70.4, 4.0))


def test_spec_voxel_examples():
    occ = voxelize_occupancy(cloud([[0, 0, 0, 0]]), SPEC)
    assert occ.grid[0, 0, 0] == 1 and occ.grid.sum() == 1
    # one point per voxel: single rows with zero offsets
    pts = [[0.5, 0.5, 0.5, 0.1], [1.5, 2.5, 1.5, 0.2]]
    s = voxelize_sparse(cloud(pts), SPEC)
    assert s.counts.tolist() == [1, 1]
    assert np.all(s.features[:, 4:] == 0.0)
    # 2T identical points -> T rows
    s = voxelize_sparse(cloud([[0.5, 0.5, 0.5, 0.3]] * 70), SPEC, max_points=35)
    assert s.counts.tolist() == [35]
    # empty set scatters to zeros; single voxel scatters to its index only
    assert not scatter_to_dense(np.zeros((0, 3)), np.zeros((0, 3)), SPEC).any()
    d = scatter_to_dense([[1, 2, 3]], [[1.0, 2.0, 3.0]], SPEC)
    assert d[:, 1, 2, 3].tolist() == [1.0, 2.0, 3.0] and np.count_nonzero(d) == 3
    full = np.ones(SPEC.dims)
    assert occupancy_stats(full).fraction == 1.0
    zero = occupancy_stats(np.zeros(SPEC.dims))
    assert (zero.non_empty, zero.fraction) == (0, 0.0) and not zero.per_z.any()


def test_occupancy_equivalence_unbounded_capacity():
    rng = np.random.default_rng(9)
    c = random_cloud(rng, 500)
    s = voxelize_sparse(c, SPEC, max_points=None)
    occ = voxelize_occupancy(c, SPEC)
    dense = np.zeros(SPEC.dims, dtype=np.uint8)
    dense[tuple(s.coords.T)] = 1
    assert np.array_equal(dense, occ.grid)
    assert s.counts.sum() == (s.point_voxel >= 0).sum()

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bootreg.errors import InputError, ParameterError
from bootreg.geometry import (
    KnnIndex,
    PointCloud,
    RigidTransform,
    apply_transform,
    chamfer_distance,
    estimate_normals,
    knn_search,
    project_to_rotation,
    rotation_from_axis_angle,
    rotation_from_quaternion,
    voxel_downsample,
)

from conftest import random_transform


def brute_knn(query, reference, k):
    """O(N^2) scan; ties by lower index via a stable sort."""
    d = np.linalg.norm(query[:, None, :] - reference[None, :, :], axis=2)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


class TestPointCloud:
    def test_channels_must_align(self):
        with pytest.raises(InputError):
            PointCloud(np.zeros((3, 3)), colors=np.zeros((2, 3)))

    def test_normals_must_be_unit(self):
        with pytest.raises(InputError):
            PointCloud(np.zeros((1, 3)), normals=[[0.0, 0.0, 2.0]])

    def test_immutable(self, random_cloud):
        with pytest.raises(ValueError):
            random_cloud.positions[0, 0] = 5.0

    def test_select_keeps_channels(self, random_cloud):
        sub = random_cloud.select([3, 1])
        assert np.array_equal(sub.positions, random_cloud.positions[[3, 1]])
        assert np.array_equal(sub.colors, random_cloud.colors[[3, 1]])


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ParameterError):
            RigidTransform(np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ParameterError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_and_inverse(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        x = rng.normal(size=(10, 3))
        assert np.allclose((a @ b).apply(x), a.apply(b.apply(x)), atol=1e-12)
        assert np.allclose((a @ a.inverse()).as_matrix(), np.eye(4), atol=1e-12)

    def test_dict_round_trip(self, rng):
        T = random_transform(rng)
        back = RigidTransform.from_dict(T.to_dict())
        assert np.array_equal(back.as_matrix(), T.as_matrix())

    def test_quaternion_matches_axis_angle(self):
        angle = 0.7
        axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        assert np.allclose(rotation_from_quaternion(q), rotation_from_axis_angle(axis, angle), atol=1e-12)

    def test_project_to_rotation(self, rng):
        R = project_to_rotation(rng.normal(size=(3, 3)))
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)


class TestApplyTransform:
    def test_identity(self, random_cloud):
        out = apply_transform(RigidTransform.identity(), random_cloud)
        assert np.array_equal(out.positions, random_cloud.positions)
        assert np.array_equal(out.colors, random_cloud.colors)

    def test_round_trip(self, rng, random_cloud):
        T = random_transform(rng)
        back = apply_transform(T.inverse(), apply_transform(T, random_cloud))
        assert np.allclose(back.positions, random_cloud.positions, atol=1e-9)

    def test_distances_preserved(self, rng, random_cloud):
        T = random_transform(rng, max_shift=5.0)
        moved = apply_transform(T, random_cloud)
        d0 = np.linalg.norm(random_cloud.positions[:, None] - random_cloud.positions[None], axis=2)
        d1 = np.linalg.norm(moved.positions[:, None] - moved.positions[None], axis=2)
        assert np.max(np.abs(d0 - d1)) < 1e-9

    def test_normals_rotate(self, rng):
        n = rng.normal(size=(20, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(20, 3)), normals=n)
        T = random_transform(rng)
        out = apply_transform(T, cloud)
        assert np.allclose(out.normals, n @ T.rotation.T, atol=1e-12)


class TestVoxelDownsample:
    def test_cube_corners_unchanged(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        out, grid = voxel_downsample(PointCloud(corners), 0.025)
        assert len(out) == 8
        assert sorted(map(tuple, out.positions)) == sorted(map(tuple, corners))

    def test_duplicates_collapse(self):
        out, grid = voxel_downsample(PointCloud(np.tile([[0.3, 0.2, 0.1]], (100, 1))), 0.025)
        assert len(out) == 1
        assert len(grid.members[0]) == 100

    def test_count_matches_hash_oracle(self, rng):
        pts = rng.uniform(0, 1, size=(1000, 3))
        out, _ = voxel_downsample(PointCloud(pts), 0.025)
        cells = {tuple(int(v) for v in np.floor(p / 0.025)) for p in pts}
        assert len(out) == len(cells)

    def test_representative_inside_voxel(self, rng):
        pts = rng.uniform(-1, 1, size=(2000, 3))
        out, grid = voxel_downsample(PointCloud(pts), 0.1)
        lo = grid.keys * 0.1
        assert np.all(out.positions >= lo - 1e-12)
        assert np.all(out.positions <= lo + 0.1 + 1e-12)

    def test_members_cover_input(self, rng):
        pts = rng.uniform(0, 1, size=(500, 3))
        _, grid = voxel_downsample(PointCloud(pts), 0.2)
        absorbed = np.sort(np.concatenate(grid.members))
        assert np.array_equal(absorbed, np.arange(500))
        for i, m in enumerate(grid.members):
            assert np.all(grid.inverse[m] == i)

    def test_idempotent(self, rng):
        pts = rng.uniform(0, 1, size=(3000, 3))
        once, _ = voxel_downsample(PointCloud(pts), 0.05)
        twice, _ = voxel_downsample(once, 0.05)
        assert np.array_equal(once.positions, twice.positions)

    def test_colors_and_normals_averaged(self):
        pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]])
        n = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        out, _ = voxel_downsample(PointCloud(pts, colors=[[0, 0, 0], [1, 1, 1]], normals=n), 0.1)
        assert np.allclose(out.colors, 0.5)
        assert np.allclose(out.normals, [[np.sqrt(0.5), np.sqrt(0.5), 0.0]])

    @pytest.mark.parametrize("size", [0.0, -0.1])
    def test_bad_voxel_size(self, random_cloud, size):
        with pytest.raises(ParameterError):
            voxel_downsample(random_cloud, size)


class TestKnnSearch:
    def test_self_query(self, rng):
        ref = rng.normal(size=(50, 3))
        idx, dist = knn_search(ref[7], ref, 1)
        assert idx[0, 0] == 7 and dist[0, 0] == 0.0

    @pytest.mark.parametrize("dim", [3, 32])
    def test_matches_brute_force(self, rng, dim):
        ref = rng.normal(size=(200, dim))
        q = rng.normal(size=(200, dim))
        idx, dist = knn_search(q, ref, 2)
        bi, bd = brute_knn(q, ref, 2)
        assert np.array_equal(idx, bi)
        assert np.allclose(dist, bd, atol=1e-12)

    @pytest.mark.parametrize("dim", [3, 32])
    def test_ties_go_to_lower_index(self, dim):
        ref = np.zeros((6, dim))
        ref[:, 0] = [1.0, -1.0, 1.0, 2.0, -1.0, 0.5]
        idx, _ = knn_search(np.zeros((1, dim)), ref, 4)
        assert idx[0].tolist() == [5, 0, 1, 2]

    def test_k_too_large(self, rng):
        with pytest.raises(ParameterError):
            knn_search(rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), 4)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ParameterError):
            KnnIndex(rng.normal(size=(5, 3))).query(rng.normal(size=(2, 4)), 1)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(5, 500), dim=st.sampled_from([3, 32]), k=st.integers(1, 5),
           seed=st.integers(0, 2**31 - 1), grid=st.booleans())
    def test_property_brute_force(self, n, dim, k, seed, grid):
        r = np.random.default_rng(seed)
        ref = r.normal(size=(n, dim))
        q = r.normal(size=(20, dim))
        if grid:  # coarse lattice values force distance ties
            ref, q = np.round(ref), np.round(q)
        idx, dist = knn_search(q, ref, k)
        bi, bd = brute_knn(q, ref, k)
        assert np.allclose(dist, bd, atol=1e-9)
        assert np.array_equal(idx, bi)


class TestNormals:
    def test_plane(self, rng):
        pts = np.c_[rng.uniform(-1, 1, size=(200, 2)), np.zeros(200)]
        out, degenerate = estimate_normals(PointCloud(pts), k=10, viewpoint=(0, 0, 1))
        assert not degenerate.any()
        assert np.allclose(out.normals, [0.0, 0.0, 1.0], atol=1e-6)

    def test_sphere_points_inward(self, rng):
        pts = rng.normal(size=(2000, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        out, _ = estimate_normals(PointCloud(pts), k=10)
        dots = np.einsum("ij,ij->i", out.normals, -pts)
        assert np.all(dots > 0.99)

    def test_collinear_flagged(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        _, degenerate = estimate_normals(PointCloud(pts), k=3, viewpoint=(0, 0, 5))
        assert degenerate.all()

    def test_k_bounds(self, random_cloud):
        with pytest.raises(ParameterError):
            estimate_normals(random_cloud, k=2)
        with pytest.raises(ParameterError):
            estimate_normals(random_cloud.select(np.arange(5)), k=10)


class TestChamfer:
    def test_zero_on_self(self, random_cloud):
        assert chamfer_distance(random_cloud, random_cloud) == 0.0

    def test_single_points(self):
        assert chamfer_distance(PointCloud([[0, 0, 0]]), PointCloud([[1, 0, 0]])) == 1.0

    def test_matches_oracle(self, rng):
        a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        assert abs(chamfer_distance(PointCloud(a), PointCloud(b)) - brute_chamfer(a, b)) < 1e-12

    def test_symmetric_and_rigid_invariant(self, rng):
        a, b = PointCloud(rng.normal(size=(80, 3))), PointCloud(rng.normal(size=(120, 3)))
        T = random_transform(rng, max_shift=3.0)
        base = chamfer_distance(a, b)
        assert chamfer_distance(b, a) == pytest.approx(base, abs=1e-15)
        assert abs(chamfer_distance(apply_transform(T, a), apply_transform(T, b)) - base) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            chamfer_distance(PointCloud(np.zeros((0, 3))), PointCloud([[0, 0, 0]]))

import numpy as np
import pytest

from bootreg.errors import InputError, ParameterError
from bootreg.features import (
    FEATURE_DIM,
    GEO_DIM,
    GEOMETRIC,
    HEAD_SHAPES,
    VIS_DIM,
    VISUAL,
    EncoderParams,
    Neighborhoods,
    build_context,
    encode,
    encoder_shapes,
    fpfh_descriptor,
    load_params,
    param_count,
    project_head,
    random_init,
    save_params,
    standardize,
)
from bootreg.geometry import PointCloud, RigidTransform, apply_transform, estimate_normals

from conftest import random_transform


def column_standardize(h, eps=1e-5):
    out = np.empty_like(h)
    for j in range(h.shape[1]):
        col = h[:, j]
        mu = sum(col) / len(col)
        var = sum((c - mu) ** 2 for c in col) / len(col)
        out[:, j] = (col - mu) / np.sqrt(var + eps)
    return out


def dense_oracle(values, shapes, x, standardized=False):
    """Hand-rolled forward pass over an explicit layer list."""
    off = 0
    h = np.array(x, dtype=float)
    for i, (fi, fo) in enumerate(shapes):
        W = np.array(values[off:off + fi * fo]).reshape(fi, fo)
        off += fi * fo
        b = np.array(values[off:off + fo])
        off += fo
        h = h.dot(W) + b
        if standardized:
            h = column_standardize(h)
        if i < len(shapes) - 1:
            h = np.where(h > 0, h, 0.0)
    return h / np.sqrt((h * h).sum(axis=1))[:, None]


def textured_cloud(rng, n=600):
    pts = rng.uniform(0, 0.6, size=(n, 3))
    pts[:, 2] = 0.2 * np.sin(4 * pts[:, 0]) + 0.05 * rng.normal(size=n)
    colors = 0.5 + 0.5 * np.sin(np.c_[7 * pts[:, 0], 5 * pts[:, 1], 3 * pts[:, 0] + pts[:, 1]])
    return PointCloud(pts, colors=colors)


class TestParams:
    def test_shapes(self):
        assert encoder_shapes(GEOMETRIC) == ((GEO_DIM, 64), (64, 64), (64, FEATURE_DIM))
        assert encoder_shapes(VISUAL)[0] == (VIS_DIM, 64)
        assert HEAD_SHAPES == ((32, 32), (32, 32))

    def test_size_checked(self):
        with pytest.raises(ParameterError):
            EncoderParams(np.zeros(5), HEAD_SHAPES)

    def test_same_seed_identical(self):
        a = random_init(7, HEAD_SHAPES)
        b = random_init(7, HEAD_SHAPES)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, random_init(8, HEAD_SHAPES).values)

    def test_init_variance(self):
        shapes = ((200, 100), (100, 150))
        p = random_init(3, shapes)
        for (W, b), (fi, _) in zip(p.layers(), shapes):
            assert W.size >= 10**4
            assert abs(W.var() / (2.0 / fi) - 1.0) < 0.2
            assert np.all(b == 0)


class TestEncode:
    def test_unit_norm(self, rng):
        p = random_init(0, encoder_shapes(VISUAL))
        f = encode(p, rng.normal(size=(50, VIS_DIM)))
        assert f.shape == (50, FEATURE_DIM)
        assert np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-6)

    def test_matches_dense_oracle(self, rng):
        shapes = encoder_shapes(GEOMETRIC)
        p = EncoderParams(rng.normal(size=param_count(shapes)) * 0.2, shapes)
        x = rng.normal(size=(30, GEO_DIM))
        assert np.max(np.abs(encode(p, x) - dense_oracle(p.values, shapes, x, standardized=True))) < 1e-9

    def test_zero_params_constant(self, rng):
        shapes = encoder_shapes(VISUAL)
        p = EncoderParams(np.zeros(param_count(shapes)), shapes)
        f = encode(p, rng.normal(size=(10, VIS_DIM)))
        assert np.all(f == f[0])

    def test_layer_outputs_standardized(self, rng):
        p = random_init(4, encoder_shapes(GEOMETRIC))
        x = rng.normal(size=(40, GEO_DIM)) * 5 + 3
        W, b = next(p.layers())
        h = standardize(x @ W + b)
        assert np.allclose(h.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(h.std(axis=0), 1.0, atol=1e-3)

    def test_features_spread(self, rng):
        """Standardized layers keep a random encoder's features apart."""
        p = random_init(6, encoder_shapes(GEOMETRIC))
        f = encode(p, rng.normal(size=(200, GEO_DIM)) * 1e-3 + 1.0)
        assert np.sqrt(FEATURE_DIM) * f.std(axis=0).mean() > 0.5

    def test_identical_contexts(self, rng):
        p = random_init(1, encoder_shapes(VISUAL))
        x = rng.normal(size=(1, VIS_DIM))
        f = encode(p, np.vstack([x, x]))
        assert np.array_equal(f[0], f[1])

    def test_dim_mismatch(self, rng):
        with pytest.raises(ParameterError):
            encode(random_init(0, encoder_shapes(VISUAL)), rng.normal(size=(3, GEO_DIM)))


class TestProjectHead:
    def test_norm_and_determinism(self, rng):
        head = random_init(2, HEAD_SHAPES)
        g = rng.normal(size=(20, FEATURE_DIM))
        z = project_head(head, g)
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
        assert np.array_equal(z, project_head(head, g))

    def test_single_vector(self, rng):
        head = random_init(2, HEAD_SHAPES)
        g = rng.normal(size=FEATURE_DIM)
        assert np.array_equal(project_head(head, g), project_head(head, g[None])[0])

    def test_matches_dense_oracle(self, rng):
        head = random_init(5, HEAD_SHAPES)
        g = rng.normal(size=(15, FEATURE_DIM))
        assert np.max(np.abs(project_head(head, g) - dense_oracle(head.values, HEAD_SHAPES, g))) < 1e-9

    def test_rejects_wrong_head(self):
        with pytest.raises(ParameterError):
            project_head(random_init(0, ((32, 16), (16, 16))), np.zeros(32))


class TestContext:
    def test_dimensions(self, rng):
        cloud = textured_cloud(rng)
        assert build_context(cloud, GEOMETRIC).shape == (len(cloud), GEO_DIM)
        assert build_context(cloud, VISUAL).shape == (len(cloud), VIS_DIM)

    def test_visual_needs_colors(self, rng):
        with pytest.raises(InputError):
            build_context(textured_cloud(rng).without_colors(), VISUAL)

    def test_shared_neighborhoods(self, rng):
        cloud = textured_cloud(rng)
        nbh = Neighborhoods.build(cloud)
        for modality in (GEOMETRIC, VISUAL):
            assert np.array_equal(build_context(cloud, modality, neighborhoods=nbh),
                                  build_context(cloud, modality))

    def test_geometric_translation_invariant(self, rng):
        cloud = textured_cloud(rng)
        p = random_init(0, encoder_shapes(GEOMETRIC))
        moved = apply_transform(RigidTransform(np.eye(3), [0.5, -0.25, 0.125]), cloud)
        f0 = encode(p, build_context(cloud, GEOMETRIC))
        f1 = encode(p, build_context(moved, GEOMETRIC))
        assert np.max(np.linalg.norm(f0 - f1, axis=1)) < 1e-9

    def test_too_few_points(self, rng):
        with pytest.raises(ParameterError):
            build_context(textured_cloud(rng, n=10), GEOMETRIC)


def wedge(n_side=25, spacing=0.02):
    """Two planes meeting at a right-angled crease along the y axis.

    Crease points carry the bisector normal.
    """
    u = np.arange(n_side) * spacing
    a, b = np.meshgrid(u, u, indexing="ij")
    floor = np.c_[a.ravel(), b.ravel(), np.zeros(a.size)]
    wall = np.c_[np.zeros(a.size), b.ravel(), a.ravel() + spacing]
    pts = np.vstack([floor, wall])
    normals = np.vstack([np.tile([0.0, 0.0, 1.0], (a.size, 1)), np.tile([1.0, 0.0, 0.0], (a.size, 1))])
    crease = np.abs(pts[:, 0]) + np.abs(pts[:, 2]) < 1e-12
    normals[crease] = [np.sqrt(0.5), 0.0, np.sqrt(0.5)]
    return PointCloud(pts, normals=normals)


class TestFpfh:
    def test_planar_patch_uniform(self):
        u = np.arange(40) * 0.01
        a, b = np.meshgrid(u, u, indexing="ij")
        pts = np.c_[a.ravel(), b.ravel(), np.zeros(a.size)]
        cloud = PointCloud(pts, normals=np.tile([0.0, 0.0, 1.0], (len(pts), 1)))
        f, empty = fpfh_descriptor(cloud, k=8)
        assert not empty.any()
        assert np.max(np.abs(f - f[0])) < 1e-6

    def test_plane_vs_edge(self):
        cloud = wedge()
        f, _ = fpfh_descriptor(cloud, k=16)
        pts = cloud.positions
        plane = np.argmin(np.linalg.norm(pts - [0.3, 0.24, 0.0], axis=1))
        edge = np.argmin(np.linalg.norm(pts - [0.0, 0.24, 0.0], axis=1))
        assert 1.0 - f[plane] @ f[edge] > 0.1

    def test_rigid_invariance(self, rng):
        pts = rng.normal(size=(400, 3))
        cloud, _ = estimate_normals(PointCloud(pts), k=10)
        T = random_transform(rng)
        f0, _ = fpfh_descriptor(cloud)
        f1, _ = fpfh_descriptor(apply_transform(T, cloud))
        assert np.max(np.abs(f0 - f1)) < 1e-6

    def test_invalid_normals(self):
        cloud = wedge(8)
        valid = np.ones(len(cloud), dtype=bool)
        valid[:5] = False
        f, empty = fpfh_descriptor(cloud, k=8, valid_normals=valid)
        assert not empty.any()
        f, empty = fpfh_descriptor(cloud, k=8, valid_normals=np.zeros(len(cloud), dtype=bool))
        assert empty.all() and np.all(f == 0)

    def test_requires_normals(self, random_cloud):
        with pytest.raises(InputError):
            fpfh_descriptor(random_cloud)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        blocks = {"visual": random_init(1, encoder_shapes(VISUAL)), "head": random_init(2, HEAD_SHAPES),
                  "plain": EncoderParams(np.arange(param_count(((2, 3),)), dtype=float), ((2, 3),))}
        path = tmp_path / "p.bin"
        save_params(path, blocks)
        back = load_params(path)
        assert list(back) == list(blocks)
        for name, p in blocks.items():
            assert back[name].values.tobytes() == p.values.tobytes()
            assert back[name].shapes == p.shapes and back[name].seed == p.seed

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOTPARAMS")
        with pytest.raises(InputError):
            load_params(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "p.bin"
        save_params(path, {"head": random_init(2, HEAD_SHAPES)})
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(InputError):
            load_params(path)

"""Point clouds, rigid transforms and exact nearest-neighbour queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, ParameterError

# kd-trees lose to blocked brute force above this dimension (both are exact)
KDTREE_MAX_DIM = 8
_BLOCK_ROWS = 1024


def _frozen(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions (N, 3) in meters, optional RGB colors in [0, 1] and unit normals."""

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        for name in ("colors", "normals"):
            val = getattr(self, name)
            if val is None:
                continue
            val = _frozen(np.asarray(val, dtype=np.float64).reshape(-1, 3))
            if len(val) != n:
                raise InputError(f"{name} has {len(val)} rows, positions has {n}")
            object.__setattr__(self, name, val)
        if self.normals is not None and n:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise InputError("normals must have unit norm")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, index) -> "PointCloud":
        """Subset of points, keeping every channel aligned."""
        index = np.asarray(index)
        return PointCloud(
            self.positions[index],
            None if self.colors is None else self.colors[index],
            None if self.normals is None else self.normals[index],
        )

    def with_normals(self, normals: np.ndarray | None) -> "PointCloud":
        return PointCloud(self.positions, self.colors, normals)

    def without_colors(self) -> "PointCloud":
        return PointCloud(self.positions, None, self.normals)


def _require_nonempty(cloud: PointCloud, what: str = "cloud"):
    if len(cloud) == 0:
        raise InputError(f"{what} is empty")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3) acting as x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ParameterError("transform contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-6:
            raise ParameterError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) >= 1e-6:
            raise ParameterError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(x) == a(b(x))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"])


def apply_transform(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ T.rotation.T
        # re-normalise to absorb rounding so the unit-norm invariant holds
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(T.apply(cloud.positions), cloud.colors, normals)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula. ``angle`` in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_from_quaternion(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to ``m`` in Frobenius norm."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


# --------------------------------------------------------------------------
# voxel grid


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Occupied cells of a voxelization and the input points each absorbed.

    ``keys[i]`` is the integer cell of output point ``i``; ``members[i]`` the
    input indices averaged into it; ``inverse[j]`` the output point that input
    point ``j`` went to.
    """

    voxel_size: float
    keys: np.ndarray
    members: list = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    def cell_map(self) -> dict:
        return {tuple(int(v) for v in k): i for i, k in enumerate(self.keys)}


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> tuple[PointCloud, VoxelGrid]:
    """Replace the points of each occupied voxel by their centroid.

    Colors are averaged; normals are averaged then renormalised (a cell
    whose normals cancel keeps its first member's normal). Output order is
    lexicographic in the integer cell key.
    """
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    _require_nonempty(cloud)
    pos = cloud.positions
    cells = np.floor(pos / voxel_size).astype(np.int64)
    keys, first, inverse, counts = np.unique(
        cells, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    m = len(keys)

    def cell_mean(values):
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    centroid = cell_mean(pos)
    # keep the centroid inside its cell despite rounding (idempotence)
    lo = np.full((m, 3), np.inf)
    hi = np.full((m, 3), -np.inf)
    np.minimum.at(lo, inverse, pos)
    np.maximum.at(hi, inverse, pos)
    centroid = np.clip(centroid, lo, hi)

    colors = None if cloud.colors is None else np.clip(cell_mean(cloud.colors), 0.0, 1.0)
    normals = None
    if cloud.normals is not None:
        acc = cell_mean(cloud.normals)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-9
        acc[bad] = cloud.normals[first[bad]]
        norm[bad] = 1.0
        normals = acc / norm
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(counts)[:-1]
    members = np.split(order, splits)
    grid = VoxelGrid(float(voxel_size), keys, members, inverse)
    return PointCloud(centroid, colors, normals), grid


# --------------------------------------------------------------------------
# nearest neighbours


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ParameterError(f"{name} must be a list of vectors")
    return a


def _sort_candidates(idx: np.ndarray, dist: np.ndarray, k: int):
    """Order candidates by (distance, index) and keep the first k."""
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k]
    dist = np.take_along_axis(dist, order, axis=1)[:, :k]
    return idx, dist


class KnnIndex:
    """Exact k-nearest-neighbour index over a fixed reference set.

    Low-dimensional data goes through a kd-tree; higher dimensions use a
    blocked brute-force scan. Results are sorted by distance with ties
    broken by the lower reference index.
    """

    def __init__(self, reference):
        self.reference = _as_matrix(reference, "reference")
        self.dim = self.reference.shape[1]
        self._tree = cKDTree(self.reference) if self.dim <= KDTREE_MAX_DIM else None
        self._sqnorm = None if self._tree is not None else np.einsum(
            "ij,ij->i", self.reference, self.reference)

    def __len__(self):
        return len(self.reference)

    def query(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        query = _as_matrix(query, "query")
        if k < 1:
            raise ParameterError("k must be >= 1")
        if k > len(self.reference):
            raise ParameterError(f"k={k} exceeds reference size {len(self.reference)}")
        if query.shape[1] != self.dim:
            raise ParameterError(f"query dim {query.shape[1]} != reference dim {self.dim}")
        if len(query) == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        if self._tree is not None:
            return self._query_tree(query, k)
        return self._query_brute(query, k)

    def _query_tree(self, query, k):
        n = len(self.reference)
        extra = min(n, k + 2)
        while True:
            dist, idx = self._tree.query(query, k=extra)
            dist = dist.reshape(len(query), extra)
            idx = idx.reshape(len(query), extra).astype(np.int64)
            # a tie straddling the cut needs a wider candidate list
            if extra == n or not np.any(dist[:, k - 1] == dist[:, extra - 1]):
                break
            extra = min(n, 2 * extra)
        if k == 1 and extra == 1:
            return idx, dist
        return _sort_candidates(idx, dist, k)

    def _query_brute(self, query, k):
        nq = len(query)
        out_i = np.empty((nq, k), dtype=np.int64)
        out_d = np.empty((nq, k))
        ref = self.reference
        for s in range(0, nq, _BLOCK_ROWS):
            q = query[s:s + _BLOCK_ROWS]
            d2 = np.einsum("ij,ij->i", q, q)[:, None] + self._sqnorm[None, :] - 2.0 * (q @ ref.T)
            out_i[s:s + len(q)] = _smallest_k(d2, k)
        # exact distances for the selected candidates
        diff = query[:, None, :] - ref[out_i]
        out_d[:] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return _sort_candidates(out_i, out_d, k)


def _smallest_k(d2: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, lower index on ties."""
    rows = np.arange(len(d2))
    if k <= 4:
        work = d2.copy() if k > 1 else d2
        picks = []
        for j in range(k):
            c = np.argmin(work, axis=1)  # first occurrence -> lower index
            picks.append(c)
            if j + 1 < k:
                work[rows, c] = np.inf
        return np.stack(picks, axis=1)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
    ties = np.count_nonzero(d2 <= kth[:, None], axis=1) > k
    for r in np.flatnonzero(ties):
        part[r] = np.lexsort((np.arange(d2.shape[1]), d2[r]))[:k]
    return part


def knn_search(query, reference, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours of each query row in ``reference``.

    Returns ``(indices, distances)``, both shaped (Q, k), ascending by
    distance; ties go to the lower reference index.
    """
    return KnnIndex(reference).query(query, k)


# --------------------------------------------------------------------------
# normals and chamfer


def estimate_normals(cloud: PointCloud, k: int = 16, viewpoint=(0.0, 0.0, 0.0)):
    """PCA normals oriented toward ``viewpoint``.

    Returns ``(cloud_with_normals, degenerate)`` where ``degenerate`` flags
    points whose neighbourhood covariance has rank < 2; those get the unit
    direction toward the viewpoint instead.
    """
    if k < 3:
        raise ParameterError("k must be >= 3")
    if len(cloud) < k:
        raise ParameterError(f"cloud has {len(cloud)} points, need >= k={k}")
    pos = cloud.positions
    idx, _ = knn_search(pos, pos, k)
    nb = pos[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 1e-300)

    to_view = np.asarray(viewpoint, dtype=np.float64)[None, :] - pos
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1.0
    if np.any(degenerate):
        tv = to_view[degenerate]
        norm = np.linalg.norm(tv, axis=1, keepdims=True)
        fallback = np.where(norm > 0, tv / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
        normals[degenerate] = fallback
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals), degenerate


def nn_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each row of ``a`` to its nearest row of ``b``."""
    _, d = knn_search(a, b, 1)
    return d[:, 0]


def chamfer_distance(A: PointCloud, B: PointCloud) -> float:
    """Symmetric chamfer distance in meters: average of the two mean NN distances."""
    _require_nonempty(A, "A")
    _require_nonempty(B, "B")
    ab = nn_distances(A.positions, B.positions).mean()
    ba = nn_distances(B.positions, A.positions).mean()
    return float(0.5 * (ab + ba))

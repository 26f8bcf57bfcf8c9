"""Per-point descriptors.

Two small learnable encoders stand in for the image and sparse-conv
networks: each is a per-point MLP over a fixed-size local context vector.
The *visual* context sees color statistics, the *geometric* context sees
only positions. A projection head, a hand-crafted FPFH-style histogram and
the binary parameter checkpoint format live here too.

Context layouts (column ranges)
-------------------------------
geometric (GEO_DIM = 62)
    0:45   offsets of the k-1 nearest neighbours in the point's PCA frame,
           nearest first, divided by FINE_SCALE
    45:48  sqrt covariance eigenvalues of the k-neighbourhood (descending)
    48:55  coarse level 1, 55:62 coarse level 2; per level: sqrt eigenvalues
           of the COARSE_K nearest coarse centroids (3), |offset of the point
           from their mean| along their eigenvectors (3), |fine normal .
           coarse normal| (1), all lengths divided by the level scale
visual (VIS_DIM = 21)
    0:3    center color, 3:6 / 6:9 mean / std of the k-neighbourhood colors,
    9:15 / 15:21 mean and std of colors over the COARSE_K nearest centroids
    of coarse level 1 / 2. Means are mapped to [-1, 1], stds doubled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Node, Tape
from .errors import InputError, ParameterError
from .geometry import PointCloud, knn_search, voxel_downsample

FEATURE_DIM = 32
DEFAULT_K = 16
FINE_SCALE = 0.05
COARSE_LEVELS = ((0.10, 0.20), (0.30, 0.60))  # (voxel size, length scale), meters
COARSE_K = 16
GEO_DIM = 3 * (DEFAULT_K - 1) + 3 + 7 * len(COARSE_LEVELS)
VIS_DIM = 9 + 6 * len(COARSE_LEVELS)
HIDDEN = (64, 64)
STD_EPS = 1e-5

VISUAL = "visual"
GEOMETRIC = "geometric"
MODALITIES = (VISUAL, GEOMETRIC)


def encoder_shapes(modality: str) -> tuple[tuple[int, int], ...]:
    in_dim = {VISUAL: VIS_DIM, GEOMETRIC: GEO_DIM}[modality]
    dims = (in_dim, *HIDDEN, FEATURE_DIM)
    return tuple(zip(dims[:-1], dims[1:]))


HEAD_SHAPES = ((FEATURE_DIM, FEATURE_DIM), (FEATURE_DIM, FEATURE_DIM))


# --------------------------------------------------------------------------
# parameters


def param_count(shapes) -> int:
    return sum(fi * fo + fo for fi, fo in shapes)


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Flat weight vector of a dense ReLU MLP.

    Layer ``i`` occupies ``W_i`` (fan_in x fan_out, row-major) followed by
    ``b_i`` (fan_out). ``seed`` is the initialisation seed, or None.
    """

    values: np.ndarray
    shapes: tuple
    seed: int | None = None

    def __post_init__(self):
        shapes = tuple((int(a), int(b)) for a, b in self.shapes)
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.size != param_count(shapes):
            raise ParameterError(
                f"parameter vector has {values.size} entries, shapes need {param_count(shapes)}")
        values.setflags(write=False)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "values", values)

    @property
    def in_dim(self) -> int:
        return self.shapes[0][0]

    @property
    def out_dim(self) -> int:
        return self.shapes[-1][1]

    def layers(self):
        """Yield ``(W, b)`` views per layer."""
        off = 0
        for fi, fo in self.shapes:
            W = self.values[off:off + fi * fo].reshape(fi, fo)
            off += fi * fo
            b = self.values[off:off + fo]
            off += fo
            yield W, b

    def replace(self, values) -> "EncoderParams":
        return EncoderParams(values, self.shapes, self.seed)


def random_init(seed: int, shapes) -> EncoderParams:
    """He-scaled Gaussian weights, zero biases, from a Philox stream."""
    rng = np.random.Generator(np.random.Philox(seed))
    chunks = []
    for fi, fo in shapes:
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fi), size=fi * fo))
        chunks.append(np.zeros(fo))
    return EncoderParams(np.concatenate(chunks), shapes, seed)


def standardize(x: np.ndarray, eps: float = STD_EPS) -> np.ndarray:
    """Zero mean, unit variance per column over the rows (the points of one cloud)."""
    return (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + eps)


def _mlp(params: EncoderParams, x: np.ndarray, standardized: bool = False) -> np.ndarray:
    layers = list(params.layers())
    for i, (W, b) in enumerate(layers):
        x = x @ W + b
        if standardized:
            x = standardize(x)
        if i + 1 < len(layers):
            x = np.maximum(x, 0.0)
    return x


def _normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, eps)


def encode(params: EncoderParams, contexts: np.ndarray) -> np.ndarray:
    """Per-point MLP forward pass followed by L2 normalisation.

    Every layer output is standardized over the points of the cloud before
    the nonlinearity, so features of one cloud cannot all coincide. The
    rows of ``contexts`` must therefore be one cloud (or one subsample).
    """
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 2 or contexts.shape[1] != params.in_dim:
        raise ParameterError(
            f"context dim {contexts.shape[-1]} does not match encoder input {params.in_dim}")
    return _normalize(_mlp(params, contexts, standardized=True))


def project_head(head_params: EncoderParams, g: np.ndarray) -> np.ndarray:
    """Two-layer projection of features, unit-normalised. Accepts (F,) or (N, F)."""
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 1
    g2 = g[None, :] if single else g
    if head_params.in_dim != FEATURE_DIM or head_params.out_dim != FEATURE_DIM:
        raise ParameterError("projection head must map 32 -> 32")
    if g2.shape[1] != head_params.in_dim:
        raise ParameterError(f"feature dim {g2.shape[1]} != head input {head_params.in_dim}")
    z = _normalize(_mlp(head_params, g2))
    return z[0] if single else z


def mlp_on_tape(tape: Tape, flat: Node, shapes, x, normalize: bool = True,
                standardized: bool = True) -> Node:
    """Same network as :func:`encode`, recorded on ``tape`` with ``flat`` as parameters.

    With ``standardized`` off it is the plain MLP of :func:`project_head`.
    """
    h = x if isinstance(x, Node) else tape.constant(x)
    off = 0
    for i, (fi, fo) in enumerate(shapes):
        W = tape.slice_reshape(flat, off, off + fi * fo, (fi, fo))
        off += fi * fo
        b = tape.slice_reshape(flat, off, off + fo, (fo,))
        off += fo
        h = tape.add(tape.matmul(h, W), b)
        if standardized:
            h = tape.standardize(h, STD_EPS)
        if i + 1 < len(shapes):
            h = tape.relu(h)
    return tape.normalize_rows(h) if normalize else h


@dataclass(frozen=True, eq=False)
class FeatureCloud:
    cloud: PointCloud
    features: np.ndarray
    modality: str

    def __post_init__(self):
        if len(self.features) != len(self.cloud):
            raise ParameterError("one feature vector per point is required")
        if self.modality not in MODALITIES:
            raise ParameterError(f"unknown modality {self.modality!r}")


# --------------------------------------------------------------------------
# local contexts


def _local_frames(offsets: np.ndarray, cov: np.ndarray):
    """Right-handed PCA frames with sign fixed by the third moment of the offsets.

    Returns ``(eigvals_desc, frames)`` with frame columns (major, middle, normal).
    """
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, :, 2]
    normal = evecs[:, :, 0]
    for axis in (major, normal):
        skewness = np.einsum("nkd,nd->nk", offsets, axis) ** 3
        flip = skewness.sum(axis=1) < 0
        axis[flip] *= -1.0
    middle = np.cross(normal, major)
    frames = np.stack([major, middle, normal], axis=2)
    return evals[:, ::-1], frames


@dataclass(frozen=True, eq=False)
class Neighborhoods:
    """k-nearest neighbours and coarse centroid levels of a cloud.

    Built in a frame anchored at the cloud minimum; shared by both context
    modalities.
    """

    shifted: np.ndarray
    idx: np.ndarray
    levels: tuple  # (coarse cloud, (N, COARSE_K) indices, length scale) per level

    @classmethod
    def build(cls, cloud: PointCloud, k: int = DEFAULT_K) -> "Neighborhoods":
        n = len(cloud)
        if n < k:
            raise ParameterError(f"cloud has {n} points, need >= k={k}")
        shifted = cloud.positions - cloud.positions.min(axis=0)
        idx, _ = knn_search(shifted, shifted, k)
        levels = []
        for voxel, scale in COARSE_LEVELS:
            coarse, _ = voxel_downsample(PointCloud(shifted, cloud.colors), voxel)
            cidx, _ = knn_search(shifted, coarse.positions, min(COARSE_K, len(coarse)))
            levels.append((coarse, cidx, scale))
        return cls(shifted, idx, tuple(levels))


def build_context(cloud: PointCloud, modality: str, k: int = DEFAULT_K,
                  neighborhoods: Neighborhoods | None = None) -> np.ndarray:
    """One context row per point; see the module docstring for the layout."""
    if modality not in MODALITIES:
        raise ParameterError(f"unknown modality {modality!r}")
    if k != DEFAULT_K:
        raise ParameterError(f"context layout is fixed at k={DEFAULT_K}")
    if modality == VISUAL and cloud.colors is None:
        raise InputError("visual context requires colors")
    nbh = neighborhoods or Neighborhoods.build(cloud, k)
    n = len(cloud)
    idx, shifted, levels = nbh.idx, nbh.shifted, nbh.levels

    if modality == VISUAL:
        col = cloud.colors
        nb = col[idx]
        parts = [2.0 * col - 1.0, 2.0 * nb.mean(axis=1) - 1.0, 2.0 * nb.std(axis=1)]
        for coarse, cidx, _ in levels:
            cc = coarse.colors[cidx]
            parts += [2.0 * cc.mean(axis=1) - 1.0, 2.0 * cc.std(axis=1)]
        return np.concatenate(parts, axis=1)

    nb = shifted[idx]
    offsets = nb - shifted[:, None, :]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, frames = _local_frames(offsets, cov)
    # drop the query point itself (column 0 of its own neighbour list)
    local = np.einsum("nkd,nde->nke", offsets[:, 1:], frames) / FINE_SCALE
    parts = [local.reshape(n, -1), np.sqrt(np.maximum(evals, 0.0)) / FINE_SCALE]
    fine_normal = frames[:, :, 2]
    for coarse, cidx, scale in levels:
        cn = coarse.positions[cidx]
        mu = cn.mean(axis=1)
        cc = cn - mu[:, None, :]
        ccov = np.einsum("nki,nkj->nij", cc, cc) / cidx.shape[1]
        cev, cvec = np.linalg.eigh(ccov)
        d = shifted - mu
        parts += [
            np.sqrt(np.maximum(cev[:, ::-1], 0.0)) / scale,
            np.abs(np.einsum("nd,nde->ne", d, cvec[:, :, ::-1])) / scale,
            np.abs(np.einsum("nd,nd->n", fine_normal, cvec[:, :, 0]))[:, None],
        ]
    return np.concatenate(parts, axis=1)


# --------------------------------------------------------------------------
# FPFH-style baseline

FPFH_BINS = 11


def _bin(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    b = np.floor((values - lo) / (hi - lo) * FPFH_BINS).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def fpfh_descriptor(cloud: PointCloud, k: int = DEFAULT_K, valid_normals=None):
    """Simplified fast point feature histograms (33-dim, L2-normalised).

    Pair features (alpha, phi, theta) of the Darboux frame between each point
    and its k-1 nearest neighbours are binned 11 ways each (SPFH); each
    point then adds the inverse-distance weighted mean of its neighbours'
    SPFH (weights sum to one, so the result does not depend on units).
    Returns ``(descriptors, empty)`` where ``empty`` marks points for which
    no valid pair exists in the whole neighbourhood (all-zero descriptor).
    """
    if cloud.normals is None:
        raise InputError("fpfh_descriptor requires normals")
    n = len(cloud)
    if n < k or k < 2:
        raise ParameterError(f"need 2 <= k <= cloud size, got k={k}, n={n}")
    pos, nrm = cloud.positions, cloud.normals
    ok = np.ones(n, dtype=bool) if valid_normals is None else np.asarray(valid_normals, bool)

    idx, dist = knn_search(pos, pos, k)
    src = np.repeat(np.arange(n), k - 1)
    tgt = idx[:, 1:].reshape(-1)
    d = pos[tgt] - pos[src]
    length = np.linalg.norm(d, axis=1)
    u = nrm[src]
    v = np.cross(u, d)
    vlen = np.linalg.norm(v, axis=1)
    pair_ok = ok[src] & ok[tgt] & (length > 1e-12) & (vlen > 1e-12 * np.maximum(length, 1e-300))
    safe_len = np.where(length > 0, length, 1.0)
    v = v / np.where(vlen > 0, vlen, 1.0)[:, None]
    w = np.cross(u, v)
    nt = nrm[tgt]
    alpha = np.einsum("ij,ij->i", v, nt)
    phi = np.einsum("ij,ij->i", u, d) / safe_len
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))

    spfh = np.zeros((n, 3 * FPFH_BINS))
    rows = src[pair_ok]
    for j, (vals, lo, hi) in enumerate(((alpha, -1.0, 1.0), (phi, -1.0, 1.0), (theta, -np.pi, np.pi))):
        cols = j * FPFH_BINS + _bin(vals[pair_ok], lo, hi)
        np.add.at(spfh, (rows, cols), 1.0)
    counts = np.bincount(rows, minlength=n).astype(np.float64)
    empty = counts == 0
    spfh[~empty] *= 100.0 / counts[~empty, None]

    nd = dist[:, 1:]
    weights = np.where(nd > 1e-12, 1.0 / np.maximum(nd, 1e-12), 0.0)
    weights = weights * (~empty[idx[:, 1:]])
    wsum = weights.sum(axis=1, keepdims=True)
    nb_mean = np.einsum("nk,nkd->nd", weights, spfh[idx[:, 1:]]) / np.where(wsum > 0, wsum, 1.0)
    fpfh = spfh + nb_mean
    # a point without pairs of its own still inherits its neighbours' histograms
    return _normalize(fpfh), ~fpfh.any(axis=1)


# --------------------------------------------------------------------------
# checkpoint files
#
# little-endian layout:
#   b"BRPARAMS" | u32 version | u32 n_blocks
#   per block: u16 name_len | name (utf-8) | i64 seed (-1: none)
#              | u32 n_layers | n_layers x (u32 fan_in, u32 fan_out)
#              | u64 n_values | n_values x f64

MAGIC = b"BRPARAMS"
VERSION = 1


def save_params(path, blocks: dict[str, EncoderParams]) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(blocks))
    for name, p in blocks.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<qI", -1 if p.seed is None else int(p.seed), len(p.shapes))
        for fi, fo in p.shapes:
            out += struct.pack("<II", fi, fo)
        out += struct.pack("<Q", p.values.size)
        out += p.values.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path) -> dict[str, EncoderParams]:
    data = Path(path).read_bytes()
    try:
        return _parse_params(data, path)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_params(data: bytes, path) -> dict[str, EncoderParams]:
    if data[:8] != MAGIC:
        raise InputError(f"{path}: not a parameter checkpoint")
    off = 8
    version, n_blocks = struct.unpack_from("<II", data, off)
    off += 8
    if version != VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        seed, n_layers = struct.unpack_from("<qI", data, off)
        off += 12
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", data, off))
            off += 8
        (n_values,) = struct.unpack_from("<Q", data, off)
        off += 8
        values = np.frombuffer(data, dtype="<f8", count=n_values, offset=off).astype(np.float64)
        off += 8 * n_values
        blocks[name] = EncoderParams(values, tuple(shapes), None if seed < 0 else seed)
    if off != len(data):
        raise InputError(f"{path}: {len(data) - off} trailing bytes")
    return blocks

"""Rigid transform estimation: weighted Procrustes, randomized fitting, ICP, RANSAC.

Closed-form fits minimise the *squared* weighted residual. Energies that
are reported or compared use the registration energy

    E(C, T) = 1/|C| * sum_i (w_i / sum w) * ||x_q - T(x_p)||

with the plain (unsquared) norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceSet
from .errors import DegenerateConfigError, InsufficientDataError, ParameterError
from .geometry import KnnIndex, PointCloud, RigidTransform, rotation_from_axis_angle

DEGENERACY_RATIO = 1e-10


@dataclass(frozen=True, eq=False)
class FitResult:
    transform: RigidTransform
    residual_energy: float
    inlier_count: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rotation": self.transform.rotation.reshape(-1).tolist(),
            "translation": self.transform.translation.tolist(),
            "energy": float(self.residual_energy),
            "inlier_count": self.inlier_count,
            "diagnostics": self.diagnostics,
        }


def _gather(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud):
    return P0.positions[C.p], P1.positions[C.q]


def _weights(C: CorrespondenceSet, use_weights: bool) -> np.ndarray:
    return C.weight.copy() if use_weights else np.ones(len(C))


def energy_arrays(xp, xq, w, T: RigidTransform) -> float:
    """Registration energy on raw arrays; ``w`` need not be normalised."""
    n = len(xp)
    if n == 0:
        raise InsufficientDataError("energy of an empty correspondence set")
    total = np.sum(w)
    if not total > 0:
        raise ParameterError("weights sum to zero")
    r = np.linalg.norm(xq - T.apply(xp), axis=1)
    return float(np.sum((w / total) * r) / n)


def residual_energy(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud,
                    T: RigidTransform, use_weights: bool = True) -> float:
    """Weighted mean residual norm of ``C`` under ``T`` (uniform weights when off)."""
    xp, xq = _gather(C, P0, P1)
    return energy_arrays(xp, xq, _weights(C, use_weights), T)


def procrustes_arrays(xp: np.ndarray, xq: np.ndarray, w: np.ndarray):
    """Closed-form weighted least-squares rigid fit ``xq ~ R xp + t``.

    Returns ``(R, t, info)``; ``info`` holds the weighted centroids, the
    cross-covariance ``S`` and its singular values, which the registration
    loss reuses for its gradient.
    """
    w = np.asarray(w, dtype=np.float64)
    if len(xp) < 3 or np.count_nonzero(w > 0) < 3:
        raise InsufficientDataError("weighted Procrustes needs >= 3 weighted correspondences")
    total = w.sum()
    a = w / total
    mp = a @ xp
    mq = a @ xq
    S = (xq - mq).T @ ((xp - mp) * a[:, None])
    U, sv, Vt = np.linalg.svd(S)
    if not sv[0] > 0 or sv[1] < DEGENERACY_RATIO * sv[0]:
        raise DegenerateConfigError("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = mq - R @ mp
    return R, t, {"mp": mp, "mq": mq, "S": S, "singular_values": sv, "reflection": d < 0}


def weighted_procrustes(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud,
                        use_weights: bool = True) -> FitResult:
    xp, xq = _gather(C, P0, P1)
    w = _weights(C, use_weights)
    R, t, info = procrustes_arrays(xp, xq, w)
    T = RigidTransform(R, t)
    return FitResult(T, energy_arrays(xp, xq, w, T), None,
                     {"use_weights": use_weights, "reflection_corrected": bool(info["reflection"])})


def refine_energy(xp, xq, w, T: RigidTransform, iters: int = 20, floor: float = 1e-4):
    """Lower the unsquared energy by iteratively reweighted Procrustes.

    Each step solves the squared problem with weights ``w / max(r, floor)``,
    a majoriser of the weighted residual-norm sum. Stops early if a step
    fails to improve.
    """
    best_T, best_e = T, energy_arrays(xp, xq, w, T)
    for _ in range(iters):
        r = np.linalg.norm(xq - best_T.apply(xp), axis=1)
        try:
            R, t, _ = procrustes_arrays(xp, xq, w / np.maximum(r, floor))
        except DegenerateConfigError:
            break
        cand = RigidTransform(R, t)
        e = energy_arrays(xp, xq, w, cand)
        if not e < best_e:
            break
        best_T, best_e = cand, e
    return best_T, best_e


def randomized_fit(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud,
                   n_subsets: int = 10, subset_size: int = 80, seed: int = 0,
                   use_weights: bool = True, refine_iters: int = 20,
                   refine_best: int = 3) -> FitResult:
    """Best of several subset fits, scored on the full set.

    Candidates are the full-set fit plus ``n_subsets`` fits on subsets drawn
    without replacement with probability proportional to weight. The
    ``refine_best`` lowest-energy candidates are then also refined toward a
    lower full-set energy, and the lowest energy overall wins (earliest on
    ties).
    """
    if subset_size < 3:
        raise ParameterError("subset_size must be >= 3")
    if len(C) < subset_size:
        raise InsufficientDataError(f"need >= {subset_size} correspondences, got {len(C)}")
    xp, xq = _gather(C, P0, P1)
    w = _weights(C, use_weights)
    if not w.sum() > 0:
        raise ParameterError("weights sum to zero")
    rng = np.random.Generator(np.random.Philox(seed))
    prob = w / w.sum()
    nonzero = np.count_nonzero(prob)

    candidates = []
    degenerate = 0
    subsets = [None] + [
        rng.choice(len(C), size=min(subset_size, nonzero), replace=False, p=prob)
        for _ in range(n_subsets)
    ]
    for sub in subsets:
        try:
            if sub is None:
                R, t, _ = procrustes_arrays(xp, xq, w)
            else:
                R, t, _ = procrustes_arrays(xp[sub], xq[sub], w[sub])
        except DegenerateConfigError:
            degenerate += 1
            continue
        T = RigidTransform(R, t)
        candidates.append((T, energy_arrays(xp, xq, w, T)))
    raw = len(candidates)
    if refine_iters:
        ranked = sorted(range(raw), key=lambda i: (candidates[i][1], i))
        for i in ranked[:refine_best]:
            candidates.append(refine_energy(xp, xq, w, candidates[i][0], refine_iters))
    if not candidates:
        raise DegenerateConfigError("every subset was degenerate")
    best = min(range(len(candidates)), key=lambda i: (candidates[i][1], i))
    T, e = candidates[best]
    return FitResult(T, e, None, {
        "use_weights": use_weights, "candidates": len(candidates),
        "degenerate_subsets": degenerate, "chosen": best,
    })


# --------------------------------------------------------------------------
# ICP


def _small_rotation(omega: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(omega)
    if angle < 1e-15:
        return np.eye(3)
    return rotation_from_axis_angle(omega / angle, angle)


def icp(P0: PointCloud, P1: PointCloud, variant: str = "point-to-point",
        init: RigidTransform | None = None, max_iters: int = 50, tol: float = 1e-6,
        max_distance: float | None = None) -> FitResult:
    """Iterative closest point from ``init``.

    ``variant`` is ``"point-to-point"`` (Procrustes update) or
    ``"point-to-plane"`` (linearised normal-equation update; needs normals
    on ``P1``). Pairs farther apart than ``max_distance`` are ignored when
    it is given. Stops when the relative change of the mean squared
    closest-point distance drops below ``tol``.
    """
    if variant not in ("point-to-point", "point-to-plane"):
        raise ParameterError(f"unknown ICP variant {variant!r}")
    if variant == "point-to-plane" and P1.normals is None:
        raise ParameterError("point-to-plane ICP needs normals on the target cloud")
    T = init or RigidTransform.identity()
    index = KnnIndex(P1.positions)
    src = P0.positions
    history = []
    flags = []
    prev = None
    iters = 0

    def match(T):
        y = T.apply(src)
        nn, d = index.query(y, 1)
        keep = np.ones(len(src), bool) if max_distance is None else d[:, 0] <= max_distance
        return y, nn[:, 0], d[:, 0], keep

    best_T, best_e = T, np.inf
    for iters in range(1, max_iters + 1):
        y, nn, d, keep = match(T)
        if np.count_nonzero(keep) < 3:
            flags.append("too_few_matches")
            break
        e_sq = float(np.mean(d[keep] ** 2))
        history.append(e_sq)
        if e_sq < best_e:
            best_T, best_e = T, e_sq
        if prev is not None and abs(prev - e_sq) <= tol * max(prev, 1e-300):
            break
        prev = e_sq
        try:
            if variant == "point-to-point":
                R, t, _ = procrustes_arrays(src[keep], P1.positions[nn[keep]], np.ones(np.count_nonzero(keep)))
                T = RigidTransform(R, t)
            else:
                T = _point_to_plane_step(y[keep], P1.positions[nn[keep]], P1.normals[nn[keep]]) @ T
        except DegenerateConfigError:
            flags.append("degenerate_update")
            break
        if e_sq == 0.0:
            break
    else:
        flags.append("max_iters")

    if flags and flags[-1] != "max_iters":
        T = best_T
    # report against the closest-point pairs of the returned transform
    y, nn, d, keep = match(T)
    if np.count_nonzero(keep) == 0:
        keep = np.ones(len(src), bool)
    e = energy_arrays(src[keep], P1.positions[nn[keep]], np.ones(np.count_nonzero(keep)), T)
    return FitResult(T, e, int(np.count_nonzero(keep)), {
        "iterations": iters, "mean_sq_history": history, "flags": flags,
    })


def _point_to_plane_step(y, q, n) -> RigidTransform:
    """Solve min sum (n.(y + w x y + t - q))^2 for a small motion (w, t)."""
    A = np.hstack([np.cross(y, n), n])
    b = np.einsum("ij,ij->i", n, q - y)
    H = A.T @ A
    ev = np.linalg.eigvalsh(H)
    if not ev[-1] > 0 or ev[0] < 1e-12 * ev[-1]:
        raise DegenerateConfigError("point-to-plane system is rank deficient")
    x = np.linalg.solve(H, A.T @ b)
    return RigidTransform(_small_rotation(x[:3]), x[3:])


# --------------------------------------------------------------------------
# RANSAC


def _batched_kabsch(P: np.ndarray, Q: np.ndarray):
    """Uniform-weight fits for a batch of (m, 3) point triples."""
    mp = P.mean(axis=1, keepdims=True)
    mq = Q.mean(axis=1, keepdims=True)
    S = np.einsum("bki,bkj->bij", Q - mq, P - mp)
    U, sv, Vt = np.linalg.svd(S)
    d = np.sign(np.linalg.det(U @ Vt))
    d[d == 0] = 1.0
    D = np.zeros((len(P), 3, 3))
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = U @ D @ Vt
    t = mq[:, 0, :] - np.einsum("bij,bj->bi", R, mp[:, 0, :])
    ok = (sv[:, 0] > 0) & (sv[:, 1] >= DEGENERACY_RATIO * sv[:, 0])
    return R, t, ok


def ransac_fit(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud, n_iters: int = 1000,
               inlier_threshold: float = 0.05, seed: int = 0) -> FitResult:
    """Three-point hypothesize-and-verify with a uniform refit on the best inlier set."""
    if len(C) < 3:
        raise InsufficientDataError("RANSAC needs >= 3 correspondences")
    xp, xq = _gather(C, P0, P1)
    rng = np.random.Generator(np.random.Philox(seed))
    n = len(C)
    samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(n_iters)])
    best_count, best_mask = 0, None
    batch = 256
    for s in range(0, n_iters, batch):
        idx = samples[s:s + batch]
        R, t, ok = _batched_kabsch(xp[idx], xq[idx])
        moved = np.einsum("bij,nj->bni", R, xp) + t[:, None, :]
        inl = np.linalg.norm(moved - xq[None], axis=2) < inlier_threshold
        counts = np.where(ok, inl.sum(axis=1), 0)
        j = int(np.argmax(counts))  # first maximum wins
        if counts[j] > best_count:
            best_count, best_mask = int(counts[j]), inl[j]
    ones = np.ones(n)
    if best_count < 3:
        T = RigidTransform.identity()
        return FitResult(T, energy_arrays(xp, xq, ones, T), best_count,
                         {"failed": True, "reason": "no hypothesis with >= 3 inliers",
                          "use_weights": False})
    try:
        R, t, _ = procrustes_arrays(xp[best_mask], xq[best_mask], np.ones(best_count))
        T = RigidTransform(R, t)
        failed = False
    except DegenerateConfigError:
        T, failed = RigidTransform.identity(), True
    final = np.linalg.norm(xq - T.apply(xp), axis=1) < inlier_threshold
    return FitResult(T, energy_arrays(xp, xq, ones, T), int(final.sum()),
                     {"failed": failed, "hypothesis_inliers": best_count, "use_weights": False})

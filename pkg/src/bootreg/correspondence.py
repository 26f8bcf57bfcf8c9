"""Ratio-weighted feature matching, top-k filtering and cross-modal transfer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .features import FeatureCloud

DEFAULT_TOP_K = 400


def _sorted_order(p, q, w) -> np.ndarray:
    # weight descending, then (p, q) ascending
    return np.lexsort((q, p, -w))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Weighted index pairs ``(p, q, weight)``, sorted by weight descending.

    ``p`` indexes cloud 0 and ``q`` cloud 1. ``provenance`` is the feature
    modality the matches came from. ``nn2`` optionally keeps, per entry, the
    second-nearest neighbour used for the ratio and which side the query
    point was on (0: query p in cloud 0, 1: query q in cloud 1); the
    differentiable losses need it to route gradients.
    """

    p: np.ndarray
    q: np.ndarray
    weight: np.ndarray
    provenance: str = "geometric"
    sources: tuple = ("cloud0", "cloud1")
    nn2: np.ndarray | None = field(default=None, repr=False)
    side: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        q = np.asarray(self.q, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not (len(p) == len(q) == len(w)):
            raise ParameterError("p, q and weight must have equal length")
        if np.any(w < 0) or np.any(w > 1):
            raise ParameterError("weights must lie in [0, 1]")
        order = _sorted_order(p, q, w)
        object.__setattr__(self, "p", p[order])
        object.__setattr__(self, "q", q[order])
        object.__setattr__(self, "weight", w[order])
        for name in ("nn2", "side"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=np.int64)[order])

    def __len__(self) -> int:
        return len(self.p)

    def subset(self, index) -> "CorrespondenceSet":
        index = np.asarray(index)
        return CorrespondenceSet(
            self.p[index], self.q[index], self.weight[index], self.provenance, self.sources,
            None if self.nn2 is None else self.nn2[index],
            None if self.side is None else self.side[index],
        )

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"p": int(a), "q": int(b), "weight": float(c), "provenance": self.provenance})
            for a, b, c in zip(self.p, self.q, self.weight)
        ]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str, sources=("cloud0", "cloud1")) -> "CorrespondenceSet":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        prov = recs[0]["provenance"] if recs else "geometric"
        return cls(
            [r["p"] for r in recs], [r["q"] for r in recs], [r["weight"] for r in recs],
            prov, sources,
        )


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 1 - cos(a, b); zero vectors count as orthogonal."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    cos = np.where(denom > 0, np.sum(a * b, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)
    return 1.0 - cos


def ratio_weight(d1, d2) -> np.ndarray:
    """1 - d1 / d2, defined as 0 where d2 == 0 (fully ambiguous)."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    w = np.where(d2 > 0, 1.0 - d1 / np.where(d2 > 0, d2, 1.0), 0.0)
    return np.clip(w, 0.0, 1.0)


def _unit(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    return f / np.where(norm > 0, norm, 1.0)


_BLOCK = 1024


def _two_nn(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Indices of the two most similar rows of ``fb`` for each row of ``fa``.

    Unit vectors, so the smallest cosine distance is the largest dot
    product; ties go to the lower index.
    """
    out = np.empty((len(fa), 2), dtype=np.int64)
    for s in range(0, len(fa), _BLOCK):
        S = fa[s:s + _BLOCK] @ fb.T
        rows = np.arange(len(S))
        first = np.argmax(S, axis=1)
        S[rows, first] = -np.inf
        out[s:s + len(S), 0] = first
        out[s:s + len(S), 1] = np.argmax(S, axis=1)
    return out


def _two_nn_both_ways(f0: np.ndarray, f1: np.ndarray):
    return _two_nn(f0, f1), _two_nn(f1, f0)


def ratio_candidates(f0: np.ndarray, f1: np.ndarray) -> dict:
    """Both-direction two-NN candidates in cosine distance.

    Returns arrays ``p, q, nn2, side, d1, d2, weight`` of length N0 + N1.
    For ``side == 0`` the query is ``p`` and ``nn2`` indexes cloud 1; for
    ``side == 1`` the query is ``q`` and ``nn2`` indexes cloud 0.
    """
    f0 = _unit(np.asarray(f0, dtype=np.float64))
    f1 = _unit(np.asarray(f1, dtype=np.float64))
    if f0.shape[1] != f1.shape[1]:
        raise ParameterError(f"feature dims differ: {f0.shape[1]} vs {f1.shape[1]}")
    if len(f0) < 2 or len(f1) < 2:
        raise ParameterError("both clouds need at least 2 points")
    i01, i10 = _two_nn_both_ways(f0, f1)
    n0, n1 = len(f0), len(f1)
    p = np.concatenate([np.arange(n0), i10[:, 0]])
    q = np.concatenate([i01[:, 0], np.arange(n1)])
    nn2 = np.concatenate([i01[:, 1], i10[:, 1]])
    side = np.concatenate([np.zeros(n0, np.int64), np.ones(n1, np.int64)])
    d1 = np.concatenate([
        cosine_distance(f0, f1[i01[:, 0]]), cosine_distance(f1, f0[i10[:, 0]])])
    d2 = np.concatenate([
        cosine_distance(f0, f1[i01[:, 1]]), cosine_distance(f1, f0[i10[:, 1]])])
    d1 = np.maximum(d1, 0.0)
    d2 = np.maximum(d2, 0.0)
    return {"p": p, "q": q, "nn2": nn2, "side": side, "d1": d1, "d2": d2,
            "weight": ratio_weight(d1, d2)}


def match_ratio_test(F0: FeatureCloud, F1: FeatureCloud) -> CorrespondenceSet:
    """All N0 + N1 nearest-neighbour candidates weighted by the ratio test."""
    c = ratio_candidates(F0.features, F1.features)
    return CorrespondenceSet(c["p"], c["q"], c["weight"], F0.modality,
                             nn2=c["nn2"], side=c["side"])


def top_k_filter(C: CorrespondenceSet, k: int = DEFAULT_TOP_K) -> CorrespondenceSet:
    """The k highest-weight entries (ties by (p, q)); everything if |C| <= k."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    order = _sorted_order(C.p, C.q, C.weight)[:k]
    return C.subset(order)


def transfer_correspondences(C_vis: CorrespondenceSet, G0: FeatureCloud, G1: FeatureCloud):
    """Geometric feature pairs at the visual correspondence indices (weights dropped)."""
    g0 = np.asarray(G0.features)
    g1 = np.asarray(G1.features)
    if len(C_vis) and (C_vis.p.max() >= len(g0) or C_vis.q.max() >= len(g1)
                       or C_vis.p.min() < 0 or C_vis.q.min() < 0):
        raise IndexError("correspondence index out of range for the geometric feature cloud")
    return g0[C_vis.p], g1[C_vis.q]

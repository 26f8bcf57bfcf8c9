"""Registration error metrics, accuracy tables and feature-match recall."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceSet
from .errors import ParameterError
from .geometry import PointCloud, RigidTransform, chamfer_distance

THRESHOLDS = {
    "rotation": (5.0, 10.0, 45.0),  # degrees
    "translation": (5.0, 10.0, 25.0),  # cm
    "chamfer": (1.0, 5.0, 10.0),  # cm
}
UNITS = {"rotation": "deg", "translation": "cm", "chamfer": "cm"}


def _check_rotation(R, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ParameterError(f"{name} must be a finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ParameterError(f"{name} is not a rotation")
    return R


def rotation_error(R_pr, R_gt) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R_pr = _check_rotation(R_pr, "R_pr")
    R_gt = _check_rotation(R_gt, "R_gt")
    c = (np.trace(R_pr @ R_gt.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_error(t_pr, t_gt) -> float:
    """Euclidean distance between translations given in meters, returned in cm."""
    d = np.asarray(t_pr, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)
    return float(100.0 * np.linalg.norm(d))


def chamfer_error(P0: PointCloud, T_pr: RigidTransform, T_gt: RigidTransform) -> float:
    """Chamfer distance between cloud0 placed by the estimate and by ground truth, in cm."""
    A = PointCloud(T_pr.apply(P0.positions))
    B = PointCloud(T_gt.apply(P0.positions))
    return 100.0 * chamfer_distance(A, B)


@dataclass(frozen=True)
class PairMetrics:
    rotation: float
    translation: float
    chamfer: float
    pair_id: str = ""
    scene_id: str = ""

    def __post_init__(self):
        if min(self.rotation, self.translation, self.chamfer) < 0 or self.rotation > 180.0 + 1e-9:
            raise ParameterError("errors must be >= 0 and rotation <= 180")

    def accuracy_flags(self, thresholds=THRESHOLDS) -> dict:
        return {m: {t: getattr(self, m) < t for t in ts} for m, ts in thresholds.items()}

    @classmethod
    def from_transforms(cls, P0: PointCloud, T_pr: RigidTransform, T_gt: RigidTransform,
                        pair_id: str = "", scene_id: str = "") -> "PairMetrics":
        return cls(rotation_error(T_pr.rotation, T_gt.rotation),
                   translation_error(T_pr.translation, T_gt.translation),
                   chamfer_error(P0, T_pr, T_gt), pair_id, scene_id)


def _key(t: float) -> str:
    return f"{t:g}"


@dataclass
class Report:
    rows: list
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.rows, **self.extra}, indent=2, sort_keys=True)

    def to_text(self) -> str:
        header = ["metric", "mean", "median", "acc@1", "acc@2", "acc@3"]
        lines = []
        for r in self.rows:
            accs = [f"<{k}{UNITS.get(r['metric'], '')}: {v:5.1f}%" for k, v in r["accuracies"].items()]
            lines.append([r["metric"], f"{r['mean']:.3f}", f"{r['median']:.3f}", *accs])
        widths = [max(len(str(x)) for x in col) for col in zip(header, *lines)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
        out += [fmt.format(*line) for line in lines]
        for k, v in self.extra.items():
            out.append(f"{k}: {v}")
        return "\n".join(out) + "\n"


def summarize(metrics, thresholds=THRESHOLDS) -> Report:
    """Mean, median and percentage below each threshold (strict ``<``) per metric."""
    metrics = list(metrics)
    if not metrics:
        raise ParameterError("summarize needs at least one pair")
    rows = []
    for name, ts in thresholds.items():
        vals = np.array([getattr(m, name) for m in metrics], dtype=np.float64)
        rows.append({
            "metric": name,
            "mean": float(vals.mean()),
            "median": float(np.median(vals)),
            "accuracies": {_key(t): float(100.0 * np.mean(vals < t)) for t in ts},
        })
    return Report(rows)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["metrics"],
    "properties": {
        "metrics": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric", "mean", "median", "accuracies"],
                "properties": {
                    "metric": {"type": "string"},
                    "mean": {"type": "number"},
                    "median": {"type": "number"},
                    "accuracies": {"type": "object", "additionalProperties": {"type": "number"}},
                },
            },
        },
    },
}


# --------------------------------------------------------------------------
# feature-match recall


@dataclass(frozen=True)
class FmrConfig:
    tau1: float = 0.10  # inlier distance, meters
    tau2: float = 0.05  # inlier fraction that must be exceeded

    def __post_init__(self):
        if not self.tau1 > 0:
            raise ParameterError("tau1 must be > 0")
        if not 0 < self.tau2 < 1:
            raise ParameterError("tau2 must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class FmrItem:
    correspondences: CorrespondenceSet
    cloud0: PointCloud
    cloud1: PointCloud
    transform: RigidTransform  # ground truth, cloud0 frame -> cloud1 frame
    group: str = ""


def inlier_fraction(item: FmrItem, tau1: float) -> float:
    C = item.correspondences
    if len(C) == 0:
        return 0.0
    # indicator ||x_p - T x_q|| < tau1 with T mapping cloud1 into cloud0's frame;
    # equal to ||T_gt x_p - x_q|| because rigid motions preserve distances
    xp = item.cloud0.positions[C.p]
    xq = item.transform.inverse().apply(item.cloud1.positions[C.q])
    return float(np.mean(np.linalg.norm(xp - xq, axis=1) < tau1))


def feature_match_recall(items, cfg: FmrConfig = FmrConfig()):
    """Fraction of pairs whose inlier fraction exceeds tau2, and its std over groups.

    Returns ``(recall, group_std, per_pair_flags)``. The std is the population
    std of per-group recalls (0 for a single group).
    """
    items = list(items)
    if not items:
        raise ParameterError("feature_match_recall needs at least one pair")
    flags = np.array([len(it.correspondences) > 0 and inlier_fraction(it, cfg.tau1) > cfg.tau2
                      for it in items])
    groups = {}
    for it, f in zip(items, flags):
        groups.setdefault(it.group, []).append(f)
    per_group = np.array([np.mean(v) for v in groups.values()])
    return float(flags.mean()), float(per_group.std()), flags.tolist()

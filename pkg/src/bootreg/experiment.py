"""Manifest-level runs: prepare pairs, register them, collect metrics."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .alignment import FitResult, icp
from .data import GeneratorParams, ManifestEntry, PairManifest, load_pair
from .errors import BootregError, ParameterError
from .evaluation import FmrConfig, FmrItem, PairMetrics, Report, feature_match_recall, summarize
from .features import EncoderParams, GEOMETRIC
from .geometry import estimate_normals
from .learning import DEFAULT_VOXEL, PreparedPair, prepare_pair, register_prepared

ESTIMATORS = ("procrustes", "randomized", "ransac", "icp-p2p", "icp-p2pl")
FEATURE_SOURCES = ("learned", "random", "fpfh")


@dataclass(frozen=True)
class EvalSettings:
    estimator: str = "randomized"
    features: str = "learned"
    modality: str = GEOMETRIC
    voxel_size: float = DEFAULT_VOXEL
    top_k: int = 400
    seed: int = 0
    icp_max_distance: float = 0.25

    def validate(self) -> "EvalSettings":
        if self.estimator not in ESTIMATORS:
            raise ParameterError(f"estimator must be one of {ESTIMATORS}")
        if self.features not in FEATURE_SOURCES:
            raise ParameterError(f"features must be one of {FEATURE_SOURCES}")
        return self


def prepare_entry(manifest: PairManifest, entry: ManifestEntry, voxel_size: float = DEFAULT_VOXEL,
                  visual: bool = True, params: GeneratorParams | None = None) -> PreparedPair:
    c0, c1, T = load_pair(manifest, entry, params)
    return prepare_pair(c0, c1, voxel_size, T, visual, entry.pair_id, entry.scene_id)


@dataclass(frozen=True, eq=False)
class PairOutcome:
    pair_id: str
    scene_id: str
    metrics: PairMetrics | None
    fit: dict | None
    fmr_item: FmrItem | None
    error: str = ""


def run_pair(prep: PreparedPair, params: EncoderParams | None, settings: EvalSettings) -> PairOutcome:
    """Register one prepared pair and score it against its ground truth."""
    try:
        if settings.estimator.startswith("icp"):
            fit = _icp(prep, settings)
            item = None
        else:
            reg = register_prepared(prep, params, settings.estimator, settings.modality,
                                    "fpfh" if settings.features == "fpfh" else "learned",
                                    settings.top_k, settings.seed, detailed=True)
            fit = reg.fit
            item = None
            if prep.transform is not None:
                item = FmrItem(reg.correspondences, reg.cloud0, reg.cloud1, prep.transform,
                               prep.scene_id)
    except BootregError as exc:
        return PairOutcome(prep.pair_id, prep.scene_id, None, None, None, f"{type(exc).__name__}: {exc}")
    metrics = None
    if prep.transform is not None:
        metrics = PairMetrics.from_transforms(prep.cloud0, fit.transform, prep.transform,
                                              prep.pair_id, prep.scene_id)
    return PairOutcome(prep.pair_id, prep.scene_id, metrics, fit.to_dict(), item)


def _icp(prep: PreparedPair, settings: EvalSettings) -> FitResult:
    if settings.estimator == "icp-p2p":
        return icp(prep.cloud0, prep.cloud1, "point-to-point", max_distance=settings.icp_max_distance)
    target, _ = estimate_normals(prep.cloud1)
    return icp(prep.cloud0, target, "point-to-plane", max_distance=settings.icp_max_distance)


def _worker(args):
    manifest, entry, params, settings, gen_params = args
    prep = prepare_entry(manifest, entry, settings.voxel_size,
                         visual=settings.modality != GEOMETRIC, params=gen_params)
    return run_pair(prep, params, settings)


def evaluate_manifest(manifest: PairManifest, entries, params: EncoderParams | None,
                      settings: EvalSettings, workers: int = 1,
                      gen_params: GeneratorParams | None = None) -> list[PairOutcome]:
    """Outcomes in manifest order, whatever the worker count."""
    settings = settings.validate()
    jobs = [(manifest, e, params, settings, gen_params) for e in entries]
    if workers <= 1:
        return [_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def build_report(outcomes: list[PairOutcome], settings: EvalSettings,
                 fmr: FmrConfig = FmrConfig()) -> Report:
    metrics = [o.metrics for o in outcomes if o.metrics is not None]
    failures = [{"pair_id": o.pair_id, "error": o.error} for o in outcomes if o.error]
    if not metrics:
        raise ParameterError("no pair could be evaluated")
    report = summarize(metrics)
    extra = {
        "pairs": len(outcomes), "failures": failures,
        "settings": {k: getattr(settings, k) for k in settings.__dataclass_fields__},
    }
    items = [o.fmr_item for o in outcomes if o.fmr_item is not None]
    if items:
        recall, std, _ = feature_match_recall(items, fmr)
        extra["feature_match_recall"] = {"recall": recall, "scene_std": std,
                                         "tau1": fmr.tau1, "tau2": fmr.tau2}
    extra["per_pair"] = [
        {"pair_id": m.pair_id, "scene_id": m.scene_id, "rotation": m.rotation,
         "translation": m.translation, "chamfer": m.chamfer} for m in metrics]
    report.extra = extra
    return report


def median_rotation(outcomes) -> float:
    vals = [o.metrics.rotation for o in outcomes if o.metrics is not None]
    return float(np.median(vals)) if vals else float("nan")

"""Command-line entry point: gen-data, train, register, evaluate, report.

Option values come from, in increasing precedence: built-in defaults, the
``key = value`` file given with ``--config``, explicit flags. Results go to
stdout, progress and diagnostics to stderr. Exit codes: 0 success, 1 input
or configuration error, 2 degenerate computation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import FitResult
from .data import (GeneratorParams, ManifestEntry, generate_scene_pair, load_manifest,
                   params_from_mapping, parse_key_values, ply_read, ply_write, split_for_scene,
                   write_manifest)
from .errors import BootregError, DegenerateConfigError, InputError
from .evaluation import REPORT_SCHEMA, Report, rotation_error
from .experiment import ESTIMATORS, EvalSettings, build_report, evaluate_manifest, prepare_entry
from .features import GEOMETRIC, MODALITIES, VISUAL
from .geometry import PointCloud, apply_transform
from .learning import (DEFAULT_VOXEL, VARIANTS, Model, TrainConfig, demo_model, init_model,
                       register, train)

log = logging.getLogger("bootreg")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE = 0, 1, 2


# --------------------------------------------------------------------------
# option merging


def _coerce(value, default):
    if isinstance(default, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def merge_options(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags (flags parsed with default None)."""
    opts = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        for key, value in parse_key_values(path.read_text(), str(path)).items():
            if key not in opts:
                raise InputError(f"{path}: unknown key {key!r}")
            opts[key] = _coerce(value, opts[key])
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# gen-data

GEN_DEFAULTS = {"pairs": 10, "seed": 0, "pairs_per_scene": 2, "out": "data"}


def cmd_gen_data(args) -> int:
    opts = merge_options(GEN_DEFAULTS, args)
    gen_keys = {f.name for f in fields(GeneratorParams)}
    gen_values = {}
    if args.params:
        gen_values.update(parse_key_values(Path(args.params).read_text(), args.params))
    for key in ("motion_scale", "min_overlap", "noise_sigma"):
        if getattr(args, key, None) is not None:
            gen_values[key] = getattr(args, key)
    params = params_from_mapping({k: v for k, v in gen_values.items() if k in gen_keys})
    n_pairs, per_scene = int(opts["pairs"]), int(opts["pairs_per_scene"])
    if n_pairs < 1:
        raise InputError("--pairs must be >= 1")
    if per_scene < 1:
        raise InputError("--pairs-per-scene must be >= 1")
    out = Path(opts["out"])
    seed = int(opts["seed"])
    n_scenes = -(-n_pairs // per_scene)
    entries, pairs = [], []
    for i in range(n_pairs):
        scene_index = i // per_scene
        scene_seed = int(np.random.SeedSequence([seed, 0, scene_index]).generate_state(1)[0] % 10**8)
        pair_seed = int(np.random.SeedSequence([seed, 1, i]).generate_state(1)[0] % 10**8)
        pair = generate_scene_pair(pair_seed, params, scene_seed)
        pairs.append(pair)
        pid = f"pair{i:05d}"
        entries.append(ManifestEntry(
            pair_id=pid, scene_id=pair.scene_id, split=split_for_scene(scene_index, n_scenes),
            seed=pair_seed, scene_seed=scene_seed, cloud0=f"clouds/{pid}_0.ply",
            cloud1=f"clouds/{pid}_1.ply", gt=pair.transform.to_dict(), overlap=pair.overlap))
        log.info("generated %s (%d/%d)", pid, i + 1, n_pairs)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    for e, pair in zip(entries, pairs):
        ply_write(out / e.cloud0, pair.cloud0)
        ply_write(out / e.cloud1, pair.cloud1)
    write_manifest(out / "manifest.jsonl", entries)
    (out / "generator.cfg").write_text(
        "".join(f"{k} = {getattr(params, k)}\n" for k in sorted(gen_keys)))
    load_manifest(out / "manifest.jsonl")  # self-check
    rot = [rotation_error(p.transform.rotation, np.eye(3)) for p in pairs]
    trans = [100 * float(np.linalg.norm(p.transform.translation)) for p in pairs]
    _emit({
        "pairs": n_pairs, "scenes": n_scenes, "manifest": str(out / "manifest.jsonl"),
        "mean_rotation_deg": float(np.mean(rot)), "mean_translation_cm": float(np.mean(trans)),
        "mean_overlap": float(np.mean([p.overlap for p in pairs])),
        "splits": {s: sum(e.split == s for e in entries) for s in ("train", "valid", "test")},
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
TRAIN_DEFAULTS.update({"manifest": None, "out": "run"})


def cmd_train(args) -> int:
    opts = merge_options(TRAIN_DEFAULTS, args)
    if opts["manifest"] is None:
        raise InputError("--manifest is required")
    cfg = TrainConfig(**{k: opts[k] for k in TrainConfig.__dataclass_fields__}).validate()
    manifest = load_manifest(opts["manifest"])
    visual = cfg.variant != "byoc-geo"
    train_entries = manifest.split("train")
    if not train_entries:
        raise InputError("manifest has no train split")
    log.info("preparing %d training pairs", len(train_entries))
    pairs = [prepare_entry(manifest, e, cfg.voxel_size, visual) for e in train_entries]
    validation = None
    if cfg.validate_every:
        validation = [prepare_entry(manifest, e, cfg.voxel_size, False)
                      for e in manifest.split("valid")]

    def progress(rec):
        log.info("iter %d total=%s skipped=%d", rec["iteration"], rec["total"], rec["skipped"])

    result = train(pairs, cfg, opts["out"], resume=args.resume, validation=validation,
                   progress=progress)
    out = Path(opts["out"])
    _emit({"params": str(out / "params.bin"), "log": str(out / "train_log.jsonl"),
           "iterations": cfg.iterations, "skipped_items": result.skipped,
           "variant": cfg.variant})
    return EXIT_OK


# --------------------------------------------------------------------------
# register


def _load_model(checkpoint, features: str, seed: int) -> Model | None:
    if features == "random":
        return init_model(seed)
    if features == "fpfh":
        return None
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return Model.load(path)
    return demo_model()


def cmd_register(args) -> int:
    for p in (args.cloud0, args.cloud1):
        if not Path(p).exists():
            raise FileNotFoundError(f"point cloud not found: {p}")
    P0, P1 = ply_read(args.cloud0), ply_read(args.cloud1)
    model = _load_model(args.checkpoint, args.features, args.seed)
    modality = args.modality
    params = None if model is None else (model.visual if modality == VISUAL else model.geometric)
    fit = register(P0, P1, params, args.mode, args.voxel_size, modality,
                   "fpfh" if args.features == "fpfh" else "learned", args.top_k, args.seed)
    if args.output:
        ply_write(args.output, apply_transform(fit.transform, P0))
    _emit(fit.to_dict())
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate and report


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    entries = manifest.split(args.split)
    if args.limit:
        entries = entries[: args.limit]
    if not entries:
        raise InputError(f"manifest has no {args.split!r} pairs")
    settings = EvalSettings(args.estimator, args.features, args.modality, args.voxel_size,
                            args.top_k, args.seed).validate()
    params = None
    if not args.estimator.startswith("icp"):
        model = _load_model(args.checkpoint, args.features, args.seed)
        if model is not None:
            params = model.visual if args.modality == VISUAL else model.geometric
    outcomes = evaluate_manifest(manifest, entries, params, settings, args.workers)
    report = build_report(outcomes, settings)
    sys.stderr.write(report.to_text())
    text = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    doc = json.loads(path.read_text())
    rows = doc.pop("metrics", None)
    if rows is None:
        raise InputError(f"{path}: no 'metrics' table")
    doc.pop("per_pair", None)
    report = Report(rows, {k: v for k, v in doc.items() if k in ("pairs", "feature_match_recall")})
    sys.stdout.write(report.to_text() if args.format == "text" else report.to_json() + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bootreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic view pairs and a manifest")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--pairs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--pairs-per-scene", dest="pairs_per_scene", type=int)
    g.add_argument("--params", help="generator key = value file")
    g.add_argument("--motion-scale", dest="motion_scale", type=float)
    g.add_argument("--min-overlap", dest="min_overlap", type=float)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train encoders on the manifest's train split")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--iters", dest="iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lambda-vis", dest="lambda_vis", type=float)
    t.add_argument("--lambda-geo", dest="lambda_geo", type=float)
    t.add_argument("--lambda-v2g", dest="lambda_v2g", type=float)
    t.add_argument("--top-k", dest="top_k", type=int)
    t.add_argument("--voxel-size", dest="voxel_size", type=float)
    t.add_argument("--max-points", dest="max_points", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--validate-every", dest="validate_every", type=int)
    t.add_argument("--log-wall-time", dest="log_wall_time", action="store_const", const=True)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register two PLY clouds")
    r.add_argument("cloud0")
    r.add_argument("cloud1")
    r.add_argument("--checkpoint")
    r.add_argument("--features", choices=("learned", "random", "fpfh"), default="learned")
    r.add_argument("--modality", choices=MODALITIES, default=GEOMETRIC)
    r.add_argument("--mode", choices=("procrustes", "randomized", "ransac"), default="randomized")
    r.add_argument("--voxel-size", dest="voxel_size", type=float, default=DEFAULT_VOXEL)
    r.add_argument("--top-k", dest="top_k", type=int, default=400)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--output", help="write cloud0 moved by the estimate to this PLY")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="register a manifest split and report metrics")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--checkpoint")
    e.add_argument("--features", choices=("learned", "random", "fpfh"), default="learned")
    e.add_argument("--modality", choices=MODALITIES, default=GEOMETRIC)
    e.add_argument("--estimator", choices=ESTIMATORS, default="randomized")
    e.add_argument("--voxel-size", dest="voxel_size", type=float, default=DEFAULT_VOXEL)
    e.add_argument("--top-k", dest="top_k", type=int, default=400)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--out", help="also write the JSON report here")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a saved evaluation report")
    p.add_argument("input")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DegenerateConfigError as exc:
        sys.stderr.write(f"error: degenerate computation: {exc}\n")
        return EXIT_DEGENERATE
    except (BootregError, ValueError, OSError, KeyError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Losses, optimizer, training loop and the end-to-end registration path.

Training on a pair of views runs two branches:

* visual: features from color contexts are matched with the ratio test,
  the top-k correspondences are fit with weighted Procrustes and scored by
  the registration loss; gradients reach the visual encoder through the
  ratio weights;
* geometric: the same for position-only contexts. In addition, geometric
  features sampled at the *visual* correspondences are pulled together by
  a stop-gradient similarity loss, which is how the visual branch teaches
  the geometric one.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .alignment import FitResult, procrustes_arrays, randomized_fit, ransac_fit, weighted_procrustes
from .autodiff import Node, Tape
from .correspondence import CorrespondenceSet, DEFAULT_TOP_K, ratio_candidates, top_k_filter
from .errors import DegenerateConfigError, InputError, ParameterError
from .evaluation import rotation_error, translation_error
from .features import (GEOMETRIC, HEAD_SHAPES, VISUAL, EncoderParams, Neighborhoods, build_context, encode,
                       encoder_shapes, fpfh_descriptor, load_params, mlp_on_tape, random_init,
                       save_params)
from .geometry import (PointCloud, RigidTransform, apply_transform, estimate_normals,
                       rotation_from_quaternion, voxel_downsample)

log = logging.getLogger(__name__)

VARIANTS = ("byoc", "byoc-geo", "byoc-rot")
DEFAULT_VOXEL = 0.025


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# --------------------------------------------------------------------------
# registration loss


def registration_loss_arrays(xp: np.ndarray, xq: np.ndarray, w: np.ndarray):
    """Loss value, its gradient in ``w`` and the fitted transform.

    The transform is the weighted least-squares optimum; the loss is the
    unsquared registration energy evaluated there. The gradient accounts
    for the dependence of the optimum on ``w`` by implicit differentiation
    of the rotation's stationarity condition.
    """
    w = np.asarray(w, dtype=np.float64)
    R, t, info = procrustes_arrays(xp, xq, w)
    n = len(xp)
    W = w.sum()
    a = w / W
    pt = xp - info["mp"]
    qt = xq - info["mq"]
    e = qt - pt @ R.T
    r = np.linalg.norm(e, axis=1)
    loss = float(np.sum(a * r) / n)

    y = qt @ R  # rows R^T q~
    M = (pt * a[:, None]).T @ y
    M = 0.5 * (M + M.T)
    K = np.trace(M) * np.eye(3) - M
    ev = np.linalg.eigvalsh(K)
    if not ev[0] > 1e-12 * max(ev[-1], 1e-300):
        raise DegenerateConfigError("rotation optimum is not isolated")
    safe = np.where(r > 0, r, 1.0)
    u = np.where(r[:, None] > 0, e / safe[:, None], 0.0)
    g = np.sum(a[:, None] * np.cross(pt, u @ R), axis=0)
    ubar = a @ u
    dw = np.linalg.solve(K, g)  # K symmetric: dw_j . g = c_j . K^-1 g
    c = np.cross(pt, y) / W
    grad = ((r - a @ r) / W - c @ dw - (e @ ubar) / W) / n
    return loss, grad, RigidTransform(R, t)


def registration_loss_node(tape: Tape, xp: np.ndarray, xq: np.ndarray, w) -> tuple[Node, RigidTransform]:
    """Record the registration loss on ``tape`` as a function of the weight node ``w``."""
    w = w if isinstance(w, Node) else tape.constant(w)
    loss, grad, T = registration_loss_arrays(xp, xq, w.value)
    node = tape.custom(np.asarray(loss), (w,), lambda gl: (gl * grad,), name="registration_loss")
    return node, T


def registration_loss(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud,
                      use_weights: bool = True, tape: Tape | None = None,
                      weights: Node | None = None):
    """Registration loss of ``C``; returns ``(loss_node, weight_node, transform)``.

    Without a ``weights`` node the correspondence weights become a tape
    parameter, so ``tape.backward(loss)`` yields d loss / d weight. With
    ``use_weights`` off the weights are uniform constants.
    """
    tape = tape or Tape()
    if not use_weights:
        w = tape.constant(np.ones(len(C)))
    elif weights is None:
        w = tape.param(C.weight, name="weights")
    else:
        w = weights
    loss, T = registration_loss_node(tape, P0.positions[C.p], P1.positions[C.q], w)
    return loss, w, T


def ratio_weight_node(tape: Tape, f0: Node, f1: Node, cand: dict, index: np.ndarray) -> Node:
    """Differentiable ratio weights ``1 - d1/d2`` of the selected candidates.

    ``f0``/``f1`` are unit feature rows on the tape; ``cand`` comes from
    :func:`ratio_candidates`. Entries whose second distance is zero are
    constant zeros, matching the matcher.
    """
    p, q = cand["p"][index], cand["q"][index]
    nn2, side = cand["nn2"][index], cand["side"][index]
    # query rows, first and second neighbours, split by which cloud queried
    s0 = side == 0
    order = np.concatenate([np.flatnonzero(s0), np.flatnonzero(~s0)])
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))

    def side_terms(fq_cloud, fn_cloud, qi, n1, n2):
        fq = tape.take_rows(fq_cloud, qi)
        d1 = 1.0 - tape.rowdot(fq, tape.take_rows(fn_cloud, n1))
        d2 = 1.0 - tape.rowdot(fq, tape.take_rows(fn_cloud, n2))
        return d1, d2

    parts = []
    if np.any(s0):
        parts.append(side_terms(f0, f1, p[s0], q[s0], nn2[s0]))
    if np.any(~s0):
        parts.append(side_terms(f1, f0, q[~s0], p[~s0], nn2[~s0]))
    d1 = _concat(tape, [x[0] for x in parts])
    d2 = _concat(tape, [x[1] for x in parts])
    d1 = tape.take_rows(d1, inv)
    d2 = tape.take_rows(d2, inv)
    live = d2.value > 0
    safe_d2 = tape.add(d2, np.where(live, 0.0, 1.0))
    ratio = tape.div(d1, safe_d2)
    w = tape.mul(1.0 - ratio, live.astype(np.float64))
    return w


def _concat(tape: Tape, nodes: list[Node]) -> Node:
    if len(nodes) == 1:
        return nodes[0]
    sizes = [len(n.value) for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes)))

    return tape.custom(np.concatenate([n.value for n in nodes]), nodes, back, name="concat")


# --------------------------------------------------------------------------
# similarity loss


def cosine_distance_node(tape: Tape, a: Node, b: Node) -> Node:
    return 1.0 - tape.rowdot(tape.normalize_rows(a), tape.normalize_rows(b))


def simsiam_loss(tape: Tape, gp: Node, gq: Node, head_flat: Node | None = None,
                 head_shapes=HEAD_SHAPES, project: Callable | None = None) -> Node:
    """Mean over pairs of D(h(g_p), sg(g_q)) + D(h(g_q), sg(g_p)).

    ``h`` is the projection head and ``sg`` the stop-gradient: each feature
    is pulled, through the head, towards a frozen copy of its partner.
    ``project`` overrides the MLP head (for tests).
    """
    if len(gp.value) == 0:
        raise ParameterError("simsiam_loss needs at least one pair")
    if project is None:
        def project(x):
            return mlp_on_tape(tape, head_flat, head_shapes, x, standardized=False)
    per_pair = (cosine_distance_node(tape, project(gp), tape.stop_gradient(gq))
                + cosine_distance_node(tape, project(gq), tape.stop_gradient(gp)))
    return tape.mean(per_pair)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected Adam on a flat vector."""

    def __init__(self, size: int, lr: float = 1e-4, betas=(0.9, 0.99), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# augmentation


def random_rotation(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform rotation from a uniformly sampled unit quaternion; returns (R, q)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return rotation_from_quaternion(q), q


def rotation_augment(P: PointCloud, seed) -> tuple[PointCloud, RigidTransform]:
    R, _ = random_rotation(_rng(7, int(seed)))
    T = RigidTransform(R, np.zeros(3))
    return apply_transform(T, P), T


# --------------------------------------------------------------------------
# configuration and reports


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    iterations: int = 2000
    batch_size: int = 8
    variant: str = "byoc"
    lambda_vis: float = 1.0
    lambda_geo: float = 1.0
    lambda_v2g: float = 1.0
    top_k: int = DEFAULT_TOP_K
    voxel_size: float = DEFAULT_VOXEL
    seed: int = 0
    max_points: int = 1024
    checkpoint_every: int = 0
    validate_every: int = 0
    log_wall_time: bool = False

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}")
        if not (self.lr > 0 and self.eps > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("need lr > 0, eps > 0 and betas in [0, 1)")
        if min(self.lambda_vis, self.lambda_geo, self.lambda_v2g) < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.batch_size < 1 or self.iterations < 0 or self.top_k < 3:
            raise ParameterError("need batch_size >= 1, iterations >= 0, top_k >= 3")
        if not self.voxel_size > 0 or self.max_points < 16:
            raise ParameterError("need voxel_size > 0 and max_points >= 16")
        return self

    def effective(self) -> "TrainConfig":
        """Depth-only training drops the visual and transfer losses."""
        if self.variant == "byoc-geo":
            return replace(self, lambda_vis=0.0, lambda_v2g=0.0)
        return self

    @property
    def weighted_geometric_loss(self) -> bool:
        return self.variant == "byoc-geo"


@dataclass
class LossReport:
    loss_vis: float = 0.0
    loss_geo: float = 0.0
    loss_v2g: float = 0.0
    total: float = 0.0
    rot_err_vis: float | None = None
    trans_err_vis: float | None = None
    rot_err_geo: float | None = None
    trans_err_geo: float | None = None


@dataclass
class Model:
    visual: EncoderParams
    geometric: EncoderParams
    head: EncoderParams

    def blocks(self) -> dict:
        return {"visual": self.visual, "geometric": self.geometric, "head": self.head}

    def save(self, path) -> None:
        save_params(path, self.blocks())

    @classmethod
    def load(cls, path) -> "Model":
        blocks = load_params(path)
        missing = {"visual", "geometric", "head"} - set(blocks)
        if missing:
            raise InputError(f"{path}: checkpoint lacks {sorted(missing)}")
        return cls(blocks["visual"], blocks["geometric"], blocks["head"])


def init_seed(seed: int, block: int) -> int:
    return int(np.random.SeedSequence([seed, block]).generate_state(1)[0])


def init_model(seed: int) -> Model:
    return Model(random_init(init_seed(seed, 0), encoder_shapes(VISUAL)),
                 random_init(init_seed(seed, 1), encoder_shapes(GEOMETRIC)),
                 random_init(init_seed(seed, 2), HEAD_SHAPES))


DEMO_CHECKPOINT = Path(__file__).parent / "data" / "demo_checkpoint.bin"


def demo_model() -> Model:
    """Encoders shipped with the package (trained on generated pairs)."""
    return Model.load(DEMO_CHECKPOINT)


# --------------------------------------------------------------------------
# pair preparation


@dataclass(frozen=True, eq=False)
class PreparedPair:
    """Voxelized views with their context vectors; reusable across seeds and runs."""

    cloud0: PointCloud
    cloud1: PointCloud
    geo0: np.ndarray
    geo1: np.ndarray
    vis0: np.ndarray | None = None
    vis1: np.ndarray | None = None
    transform: RigidTransform | None = None
    pair_id: str = ""
    scene_id: str = ""


def prepare_pair(P0: PointCloud, P1: PointCloud, voxel_size: float = DEFAULT_VOXEL,
                 transform: RigidTransform | None = None, visual: bool = True,
                 pair_id: str = "", scene_id: str = "") -> PreparedPair:
    v0, _ = voxel_downsample(P0, voxel_size)
    v1, _ = voxel_downsample(P1, voxel_size)
    vis = visual and v0.colors is not None and v1.colors is not None
    ctx = []
    for v in (v0, v1):
        nbh = Neighborhoods.build(v)
        ctx.append((build_context(v, GEOMETRIC, neighborhoods=nbh),
                    build_context(v, VISUAL, neighborhoods=nbh) if vis else None))
    return PreparedPair(v0, v1, ctx[0][0], ctx[1][0], ctx[0][1], ctx[1][1],
                        transform, pair_id, scene_id)


# --------------------------------------------------------------------------
# one training item


@dataclass
class ItemResult:
    report: LossReport
    grads: dict
    skipped: bool = False
    reason: str = ""
    augmentation: list | None = None


def _subsample(rng, n: int, m: int) -> np.ndarray:
    return np.arange(n) if n <= m else np.sort(rng.choice(n, size=m, replace=False))


def _branch(tape, f0: Node, f1: Node, x0, x1, k: int, weighted: bool):
    """Match, keep the top k and score one branch; returns (loss, T, p, q)."""
    cand = ratio_candidates(f0.value, f1.value)
    index = _select_index(cand, k)
    if weighted:
        w = ratio_weight_node(tape, f0, f1, cand, index)
    else:
        w = tape.constant(np.ones(len(index)))
    p, q = cand["p"][index], cand["q"][index]
    loss, T = registration_loss_node(tape, x0[p], x1[q], w)
    return loss, T, p, q


def _select_index(cand: dict, k: int) -> np.ndarray:
    """Top-k candidate positions, ordered like :func:`top_k_filter`."""
    order = np.lexsort((cand["q"], cand["p"], -cand["weight"]))
    return order[:k]


def train_item(model: Model, prep: PreparedPair, cfg: TrainConfig, rng: np.random.Generator) -> ItemResult:
    """Forward and backward pass over one view pair."""
    cfg = cfg.effective()
    i0 = _subsample(rng, len(prep.cloud0), cfg.max_points)
    i1 = _subsample(rng, len(prep.cloud1), cfg.max_points)
    x0 = prep.cloud0.positions[i0]
    x1 = prep.cloud1.positions[i1]
    geo0, geo1 = prep.geo0[i0], prep.geo1[i1]
    T_gt = prep.transform
    augmentation = None
    if cfg.variant == "byoc-rot":
        R0, q0 = random_rotation(rng)
        R1, q1 = random_rotation(rng)
        A0, A1 = RigidTransform(R0, np.zeros(3)), RigidTransform(R1, np.zeros(3))
        g0c = build_context(apply_transform(A0, prep.cloud0), GEOMETRIC)
        g1c = build_context(apply_transform(A1, prep.cloud1), GEOMETRIC)
        geo0, geo1 = g0c[i0], g1c[i1]
        xg0, xg1 = A0.apply(x0), A1.apply(x1)
        T_geo = None if T_gt is None else A1 @ T_gt @ A0.inverse()
        augmentation = [q0.tolist(), q1.tolist()]
    else:
        xg0, xg1, T_geo = x0, x1, T_gt

    tape = Tape()
    flat = {name: tape.param(p.values, name=name) for name, p in model.blocks().items()}
    report = LossReport()
    total = None
    use_visual = cfg.lambda_vis > 0 or cfg.lambda_v2g > 0
    try:
        if use_visual:
            if prep.vis0 is None:
                raise InputError("visual losses need colored clouds")
            shapes = model.visual.shapes
            f0 = mlp_on_tape(tape, flat["visual"], shapes, prep.vis0[i0])
            f1 = mlp_on_tape(tape, flat["visual"], shapes, prep.vis1[i1])
            lv, Tv, pv, qv = _branch(tape, f0, f1, x0, x1, cfg.top_k, weighted=True)
            report.loss_vis = float(lv.value)
            total = tape.mul(lv, cfg.lambda_vis)
            if T_gt is not None:
                report.rot_err_vis = rotation_error(Tv.rotation, T_gt.rotation)
                report.trans_err_vis = translation_error(Tv.translation, T_gt.translation)
        gshapes = model.geometric.shapes
        g0 = mlp_on_tape(tape, flat["geometric"], gshapes, geo0)
        g1 = mlp_on_tape(tape, flat["geometric"], gshapes, geo1)
        if use_visual:
            ls = simsiam_loss(tape, tape.take_rows(g0, pv), tape.take_rows(g1, qv),
                              flat["head"], model.head.shapes)
            report.loss_v2g = float(ls.value)
            total = tape.add(total, tape.mul(ls, cfg.lambda_v2g))
        lg, Tg, _, _ = _branch(tape, g0, g1, xg0, xg1, cfg.top_k, weighted=cfg.weighted_geometric_loss)
        report.loss_geo = float(lg.value)
        total = tape.mul(lg, cfg.lambda_geo) if total is None else tape.add(total, tape.mul(lg, cfg.lambda_geo))
        if T_geo is not None:
            report.rot_err_geo = rotation_error(Tg.rotation, T_geo.rotation)
            report.trans_err_geo = translation_error(Tg.translation, T_geo.translation)
    except DegenerateConfigError as exc:
        return ItemResult(report, {}, True, str(exc), augmentation)
    report.total = float(total.value)
    tape.backward(total)
    grads = {name: tape.grad_of(node) for name, node in flat.items()}
    return ItemResult(report, grads, False, "", augmentation)


# --------------------------------------------------------------------------
# training loop


def _save_state(directory: Path, model: Model, optims: dict, iteration: int, cfg: TrainConfig):
    directory.mkdir(parents=True, exist_ok=True)
    model.save(directory / "params.bin")
    blocks = {}
    for name, opt in optims.items():
        shapes = model.blocks()[name].shapes
        blocks[f"m/{name}"] = EncoderParams(opt.m, shapes)
        blocks[f"v/{name}"] = EncoderParams(opt.v, shapes)
    save_params(directory / "optimizer.bin", blocks)
    state = {"iteration": iteration, "adam_t": {k: o.t for k, o in optims.items()},
             "config": asdict(cfg)}
    (directory / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def _load_state(directory: Path, cfg: TrainConfig):
    directory = Path(directory)
    model = Model.load(directory / "params.bin")
    state = json.loads((directory / "state.json").read_text())
    moments = load_params(directory / "optimizer.bin")
    optims = {}
    for name, p in model.blocks().items():
        opt = Adam(p.values.size, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
        opt.m = np.array(moments[f"m/{name}"].values)
        opt.v = np.array(moments[f"v/{name}"].values)
        opt.t = int(state["adam_t"][name])
        optims[name] = opt
    return model, optims, int(state["iteration"])


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


@dataclass
class TrainResult:
    model: Model
    records: list = field(default_factory=list)
    skipped: int = 0


def train(pairs: list[PreparedPair], cfg: TrainConfig, out_dir=None, resume: bool = False,
          model: Model | None = None, validation: list[PreparedPair] | None = None,
          progress: Callable | None = None, stop_after: int | None = None) -> TrainResult:
    """Adam training over prepared view pairs.

    Every random choice is drawn from a stream keyed by ``(seed, iteration,
    item)``, so a run resumed from a checkpoint replays exactly. With
    ``out_dir`` the JSON-lines log goes to ``out_dir/train_log.jsonl``, the
    latest checkpoint to ``out_dir/checkpoint/`` and the final parameters
    to ``out_dir/params.bin``. ``stop_after`` ends the run early after that
    many iterations (used to simulate interruptions).
    """
    cfg = cfg.validate()
    if not pairs:
        raise InputError("training needs at least one pair")
    eff = cfg.effective()
    out = Path(out_dir) if out_dir is not None else None
    start = 0
    if resume:
        if out is None or not (out / "checkpoint" / "state.json").exists():
            raise InputError("no checkpoint to resume from")
        model, optims, start = _load_state(out / "checkpoint", cfg)
    else:
        model = model or init_model(cfg.seed)
        optims = {name: Adam(p.values.size, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
                  for name, p in model.blocks().items()}
    log_path = out / "train_log.jsonl" if out is not None else None
    records = []
    if log_path is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and log_path.exists():
            kept = [line for line in log_path.read_text().splitlines()
                    if line and json.loads(line)["iteration"] <= start]
            log_path.write_text("".join(line + "\n" for line in kept))
        else:
            log_path.write_text("")
    total_skipped = 0
    end = cfg.iterations if stop_after is None else min(cfg.iterations, start + stop_after)
    for it in range(start + 1, end + 1):
        t0 = time.perf_counter()
        brng = _rng(cfg.seed, it)
        batch = brng.choice(len(pairs), size=cfg.batch_size, replace=cfg.batch_size > len(pairs))
        results = [train_item(model, pairs[int(j)], cfg, _rng(cfg.seed, it, b))
                   for b, j in enumerate(batch)]
        ok = [r for r in results if not r.skipped]
        total_skipped += len(results) - len(ok)
        if ok:
            blocks = model.blocks()
            new = {}
            for name, p in blocks.items():
                g = sum(r.grads[name] for r in ok) / len(ok)
                new[name] = p.replace(optims[name].step(p.values, g))
            model = Model(new["visual"], new["geometric"], new["head"])
        reps = [r.report for r in ok]
        rec = {
            "type": "batch", "iteration": it,
            "loss_vis": _mean([r.loss_vis for r in reps]),
            "loss_geo": _mean([r.loss_geo for r in reps]),
            "loss_v2g": _mean([r.loss_v2g for r in reps]),
            "total": _mean([r.total for r in reps]),
            "rot_err_vis": _median([r.rot_err_vis for r in reps]),
            "rot_err_geo": _median([r.rot_err_geo for r in reps]),
            "trans_err_vis": _median([r.trans_err_vis for r in reps]),
            "trans_err_geo": _median([r.trans_err_geo for r in reps]),
            "skipped": len(results) - len(ok),
            "lambda_vis": eff.lambda_vis, "lambda_geo": eff.lambda_geo, "lambda_v2g": eff.lambda_v2g,
            "variant": cfg.variant, "pairs": [int(j) for j in batch],
        }
        if cfg.variant == "byoc-rot":
            rec["augmentation"] = [r.augmentation for r in results]
        if cfg.validate_every and validation and it % cfg.validate_every == 0:
            errs = [rotation_error(register_prepared(v, model.geometric).transform.rotation,
                                   v.transform.rotation) for v in validation if v.transform is not None]
            rec["validation_median_rot_err"] = _median(errs)
        if cfg.log_wall_time:
            rec["wall_time"] = time.perf_counter() - t0
        records.append(rec)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if progress is not None:
            progress(rec)
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            _save_state(out / "checkpoint", model, optims, it, cfg)
    if out is not None:
        if end == cfg.iterations:
            model.save(out / "params.bin")
        _save_state(out / "checkpoint", model, optims, end, cfg)
    return TrainResult(model, records, total_skipped)


# --------------------------------------------------------------------------
# inference


@dataclass(frozen=True, eq=False)
class Registration:
    fit: FitResult
    correspondences: CorrespondenceSet
    cloud0: PointCloud  # voxelized views the correspondences index into
    cloud1: PointCloud


def fit_correspondences(C: CorrespondenceSet, P0: PointCloud, P1: PointCloud,
                        mode: str = "randomized", seed: int = 0) -> FitResult:
    if mode == "procrustes":
        return weighted_procrustes(C, P0, P1)
    if mode == "randomized":
        return randomized_fit(C, P0, P1, subset_size=min(80, len(C)), seed=seed)
    if mode == "ransac":
        return ransac_fit(C, P0, P1, seed=seed)
    raise ParameterError(f"unknown fit mode {mode!r}")


def match_features(f0: np.ndarray, f1: np.ndarray, modality: str, k: int = DEFAULT_TOP_K) -> CorrespondenceSet:
    c = ratio_candidates(f0, f1)
    return top_k_filter(CorrespondenceSet(c["p"], c["q"], c["weight"], modality,
                                          nn2=c["nn2"], side=c["side"]), k)


def register_prepared(prep: PreparedPair, params: EncoderParams | None, mode: str = "randomized",
                      modality: str = GEOMETRIC, features: str = "learned",
                      top_k: int = DEFAULT_TOP_K, seed: int = 0, detailed: bool = False):
    """Encode, match, filter and fit an already voxelized pair."""
    if features == "fpfh":
        n0, ok0 = estimate_normals(prep.cloud0)
        n1, ok1 = estimate_normals(prep.cloud1)
        f0, _ = fpfh_descriptor(n0, valid_normals=~ok0)
        f1, _ = fpfh_descriptor(n1, valid_normals=~ok1)
        modality = GEOMETRIC
    else:
        ctx = (prep.vis0, prep.vis1) if modality == VISUAL else (prep.geo0, prep.geo1)
        if ctx[0] is None:
            raise InputError("visual features need colored clouds")
        f0, f1 = encode(params, ctx[0]), encode(params, ctx[1])
    C = match_features(f0, f1, modality, top_k)
    fit = fit_correspondences(C, prep.cloud0, prep.cloud1, mode, seed)
    if detailed:
        return Registration(fit, C, prep.cloud0, prep.cloud1)
    return fit


def register(P0: PointCloud, P1: PointCloud, params: EncoderParams | None, mode: str = "randomized",
             voxel_size: float = DEFAULT_VOXEL, modality: str = GEOMETRIC,
             features: str = "learned", top_k: int = DEFAULT_TOP_K, seed: int = 0) -> FitResult:
    """Voxelize, build contexts, encode, match, keep the top k and fit.

    Depth-only clouds are fine for the geometric modality.
    """
    prep = prepare_pair(P0, P1, voxel_size, visual=modality == VISUAL)
    return register_prepared(prep, params, mode, modality, features, top_k, seed)

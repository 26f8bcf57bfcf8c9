"""Synthetic RGB-D-like view pairs, ASCII PLY files and pair manifests.

A scene is a room (floor and four walls) holding boxes and cylinders. Every
surface carries its own procedural color pattern, so texture varies
independently of geometry. The scene is sampled once as a dense colored
point set; a view keeps the points that face the camera, fall inside its
frustum and survive a splatted z-buffer test, then perturbs them along the
viewing ray with Gaussian depth noise. Both views of a pair therefore
share physical points wherever they overlap.

Relative camera motion is drawn from Gamma distributions whose means are
the target rotation angle and translation length; failed overlap checks
only re-draw the first camera, so the motion distribution is unbiased.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import GenerationError, InputError, ManifestError, ParameterError, PlyParseError
from .geometry import PointCloud, RigidTransform, rotation_from_axis_angle

log = logging.getLogger(__name__)

GENERATOR_VERSION = 1
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class GeneratorParams:
    room_min: float = 4.0
    room_max: float = 6.0
    room_height: float = 2.7
    objects_min: int = 8
    objects_max: int = 14
    point_spacing: float = 0.04
    texture_freq_min: float = 1.0
    texture_freq_max: float = 5.0
    noise_sigma: float = 0.003
    hfov_deg: float = 60.0
    vfov_deg: float = 46.8
    near: float = 0.3
    far: float = 4.0
    mean_rotation_deg: float = 11.4
    mean_translation_m: float = 0.194
    motion_shape: float = 4.0
    motion_scale: float = 1.0
    min_overlap: float = 0.3
    max_retries: int = 60

    def validate(self) -> "GeneratorParams":
        if not 0 < self.room_min <= self.room_max:
            raise ParameterError("need 0 < room_min <= room_max")
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ParameterError("need 0 <= objects_min <= objects_max")
        if self.point_spacing <= 0 or self.noise_sigma < 0:
            raise ParameterError("point_spacing must be > 0 and noise_sigma >= 0")
        if not 0 < self.min_overlap <= 1:
            raise ParameterError("min_overlap must lie in (0, 1]")
        if self.motion_scale < 0 or self.motion_shape <= 0:
            raise ParameterError("motion_scale must be >= 0 and motion_shape > 0")
        if not 0 < self.near < self.far:
            raise ParameterError("need 0 < near < far")
        return self


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def params_from_mapping(values: dict, base: GeneratorParams | None = None) -> GeneratorParams:
    base = base or GeneratorParams()
    types = {f.name: f.type for f in fields(GeneratorParams)}
    updates = {}
    for key, value in values.items():
        if key not in types:
            raise InputError(f"unknown generator parameter {key!r}")
        updates[key] = int(value) if types[key] in ("int", int) else float(value)
    return replace(base, **updates).validate()


def load_generator_params(path) -> GeneratorParams:
    return params_from_mapping(parse_key_values(Path(path).read_text(), str(path)))


def _rng(*key: int) -> np.random.Generator:
    """Philox stream keyed by a tuple of non-negative integers."""
    seq = np.random.SeedSequence([GENERATOR_VERSION, *key])
    return np.random.Generator(np.random.Philox(seq))


# --------------------------------------------------------------------------
# scene


@dataclass
class Scene:
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    extent: tuple
    obstacles: list = field(default_factory=list)  # (center_xy, radius) footprints


def _texture(rng, u, v, params: GeneratorParams) -> np.ndarray:
    """Three-color pattern from two random plane waves in surface coordinates."""
    c = rng.uniform(0.05, 0.95, size=(3, 3))
    waves = []
    for _ in range(2):
        ang = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(params.texture_freq_min, params.texture_freq_max)
        phase = rng.uniform(0, 2 * np.pi)
        arg = 2 * np.pi * freq * (np.cos(ang) * u + np.sin(ang) * v) + phase
        waves.append(0.5 + 0.5 * np.tanh(3.0 * np.sin(arg)))
    s1, s2 = waves
    col = c[0] + (c[1] - c[0]) * s1[:, None] + (c[2] - c[0]) * (s2 * (1 - s1))[:, None]
    return np.clip(col, 0.0, 1.0)


def _jittered_grid(rng, width: float, height: float, spacing: float):
    nu = max(1, int(math.ceil(width / spacing)))
    nv = max(1, int(math.ceil(height / spacing)))
    gu, gv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = (gu.ravel() + rng.uniform(size=gu.size)) * (width / nu)
    v = (gv.ravel() + rng.uniform(size=gv.size)) * (height / nv)
    return u, v


def _rect(rng, origin, axis_u, axis_v, width, height, normal, params):
    u, v = _jittered_grid(rng, width, height, params.point_spacing)
    pts = origin + u[:, None] * axis_u + v[:, None] * axis_v
    nrm = np.broadcast_to(normal, pts.shape)
    return pts, nrm, _texture(rng, u, v, params)


def build_scene(scene_seed: int, params: GeneratorParams) -> Scene:
    rng = _rng(0, scene_seed)
    W = rng.uniform(params.room_min, params.room_max)
    D = rng.uniform(params.room_min, params.room_max)
    H = params.room_height
    ex, ey, ez = np.eye(3)
    parts = [
        _rect(rng, np.zeros(3), ex, ey, W, D, ez, params),  # floor
        _rect(rng, np.zeros(3), ex, ez, W, H, ey, params),
        _rect(rng, np.array([0, D, 0.0]), ex, ez, W, H, -ey, params),
        _rect(rng, np.zeros(3), ey, ez, D, H, ex, params),
        _rect(rng, np.array([W, 0, 0.0]), ey, ez, D, H, -ex, params),
    ]
    obstacles = []
    n_obj = int(rng.integers(params.objects_min, params.objects_max + 1))
    tops = []  # box tops available for stacking: (center, yaw, sx, sy, z)
    for _ in range(n_obj):
        if rng.uniform() < 0.65:
            sx, sy = rng.uniform(0.2, 1.0, size=2)
            sz = rng.uniform(0.2, 1.2)
            yaw = rng.uniform(0, np.pi)
            if tops and rng.uniform() < 0.25:
                base_c, _, bsx, bsy, z0 = tops[int(rng.integers(len(tops)))]
                sx, sy = min(sx, bsx), min(sy, bsy)
                sz = min(sz, 0.5)
                center = base_c + rng.uniform(-0.1, 0.1, size=2)
            else:
                center = rng.uniform([0.6, 0.6], [W - 0.6, D - 0.6])
                z0 = 0.0
            parts += _box(rng, center, yaw, sx, sy, sz, z0, params)
            tops.append((center, yaw, sx, sy, z0 + sz))
            obstacles.append((center, 0.5 * math.hypot(sx, sy)))
        else:
            r = rng.uniform(0.08, 0.35)
            h = rng.uniform(0.3, 1.4)
            center = rng.uniform([0.5, 0.5], [W - 0.5, D - 0.5])
            parts += _cylinder(rng, center, r, h, params)
            obstacles.append((center, r))
    pts = np.concatenate([p[0] for p in parts])
    nrm = np.concatenate([p[1] for p in parts])
    col = np.concatenate([p[2] for p in parts])
    col = np.round(col * 255.0) / 255.0  # uint8-representable, so PLY round-trips exactly
    return Scene(pts, np.ascontiguousarray(nrm), col, (W, D, H), obstacles)


def _box(rng, center, yaw, sx, sy, sz, z0, params):
    c, s = math.cos(yaw), math.sin(yaw)
    ax = np.array([c, s, 0.0])
    ay = np.array([-s, c, 0.0])
    az = np.array([0.0, 0.0, 1.0])
    base = np.array([center[0], center[1], z0]) - 0.5 * sx * ax - 0.5 * sy * ay
    top = base + sz * az
    return [
        _rect(rng, top, ax, ay, sx, sy, az, params),
        _rect(rng, base, ax, az, sx, sz, -ay, params),
        _rect(rng, base + sy * ay, ax, az, sx, sz, ay, params),
        _rect(rng, base, ay, az, sy, sz, -ax, params),
        _rect(rng, base + sx * ax, ay, az, sy, sz, ax, params),
    ]


def _cylinder(rng, center, r, h, params):
    circ = 2 * np.pi * r
    u, v = _jittered_grid(rng, circ, h, params.point_spacing)
    ang = u / r
    nrm = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)
    pts = np.stack([center[0] + r * nrm[:, 0], center[1] + r * nrm[:, 1], v], axis=1)
    side = (pts, nrm, _texture(rng, u, v, params))
    # top cap: jittered grid over the bounding square, clipped to the disc
    cu, cv = _jittered_grid(rng, 2 * r, 2 * r, params.point_spacing)
    inside = (cu - r) ** 2 + (cv - r) ** 2 <= r * r
    cu, cv = cu[inside], cv[inside]
    cap_pts = np.stack([center[0] - r + cu, center[1] - r + cv, np.full(cu.shape, h)], axis=1)
    cap_nrm = np.broadcast_to(np.array([0.0, 0.0, 1.0]), cap_pts.shape)
    return [side, (cap_pts, cap_nrm, _texture(rng, cu, cv, params))]


# --------------------------------------------------------------------------
# cameras and views


def _intrinsics(params: GeneratorParams, width: int = 64):
    fx = 0.5 * width / math.tan(math.radians(params.hfov_deg) / 2)
    height = int(round(2 * fx * math.tan(math.radians(params.vfov_deg) / 2)))
    return fx, width, height


def sample_relative_motion(rng: np.random.Generator, params: GeneratorParams) -> RigidTransform:
    """Pose of camera 1 in camera 0's frame."""
    k = params.motion_shape
    angle = rng.gamma(k, params.mean_rotation_deg / k) * params.motion_scale
    axis = rng.normal(size=3)
    dist = rng.gamma(k, params.mean_translation_m / k) * params.motion_scale
    direction = rng.normal(size=3)
    R = rotation_from_axis_angle(axis, math.radians(angle)) if angle > 0 else np.eye(3)
    t = dist * direction / np.linalg.norm(direction)
    return RigidTransform(R, t)


def motion_stream(seed: int) -> np.random.Generator:
    return _rng(1, seed)


def _camera_pose(rng, scene: Scene, params: GeneratorParams) -> RigidTransform:
    """Camera-to-world pose looking slightly downward from head height."""
    W, D, _ = scene.extent
    for _ in range(200):
        pos = np.array([rng.uniform(0.6, W - 0.6), rng.uniform(0.6, D - 0.6), rng.uniform(1.2, 1.8)])
        if _clear(pos, scene, margin=0.3):
            break
    yaw = rng.uniform(0, 2 * np.pi)
    pitch = math.radians(rng.uniform(-35.0, -10.0))
    roll = math.radians(rng.uniform(-5.0, 5.0))
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), math.sin(pitch)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    R = rotation_from_axis_angle(fwd, roll) @ R
    return RigidTransform(R, pos)


def _clear(pos, scene: Scene, margin: float) -> bool:
    W, D, H = scene.extent
    if not (0.3 <= pos[0] <= W - 0.3 and 0.3 <= pos[1] <= D - 0.3 and 0.3 <= pos[2] <= H - 0.2):
        return False
    for center, radius in scene.obstacles:
        if math.hypot(pos[0] - center[0], pos[1] - center[1]) < radius + margin:
            return False
    return True


def visible_points(scene: Scene, cam_to_world: RigidTransform, params: GeneratorParams,
                   grid_width: int = 64) -> np.ndarray:
    """Indices of scene points seen by the camera (frustum, facing, z-buffer)."""
    R, c = cam_to_world.rotation, cam_to_world.translation
    rel = scene.points - c
    facing = np.einsum("ij,ij->i", scene.normals, -rel) > 0
    cam = rel @ R
    z = cam[:, 2]
    fx, gw, gh = _intrinsics(params, grid_width)
    ok = facing & (z > params.near)
    u = np.full(len(z), -1.0)
    v = np.full(len(z), -1.0)
    u[ok] = fx * cam[ok, 0] / z[ok] + 0.5 * gw
    v[ok] = fx * cam[ok, 1] / z[ok] + 0.5 * gh
    ok &= (u >= 0) & (u < gw) & (v >= 0) & (v < gh)
    rng_ = np.linalg.norm(cam, axis=1)
    ok &= rng_ <= params.far
    idx = np.flatnonzero(ok)
    iu = u[idx].astype(np.int64)
    iv = v[idx].astype(np.int64)
    zz = z[idx]
    # splat each point over the pixels its surface patch covers
    radius = np.minimum(np.ceil(0.6 * params.point_spacing * fx / zz).astype(np.int64), 4)
    zbuf = np.full((gw, gh), np.inf)
    rmax = int(radius.max()) if len(radius) else 0
    for du in range(-rmax, rmax + 1):
        for dv in range(-rmax, rmax + 1):
            sel = radius >= max(abs(du), abs(dv))
            pu = iu[sel] + du
            pv = iv[sel] + dv
            inb = (pu >= 0) & (pu < gw) & (pv >= 0) & (pv < gh)
            np.minimum.at(zbuf, (pu[inb], pv[inb]), zz[sel][inb])
    tol = 0.03 + 0.03 * zz
    keep = zz <= zbuf[iu, iv] + tol
    return idx[keep]


def _observe(scene: Scene, idx: np.ndarray, cam_to_world: RigidTransform, rng, sigma: float):
    cam = (scene.points[idx] - cam_to_world.translation) @ cam_to_world.rotation
    if sigma > 0:
        dist = np.linalg.norm(cam, axis=1, keepdims=True)
        cam = cam + (cam / dist) * rng.normal(0.0, sigma, size=(len(cam), 1))
    return PointCloud(cam, scene.colors[idx])


@dataclass(frozen=True, eq=False)
class ScenePair:
    """Two partial views. ``transform`` maps cloud0's frame into cloud1's frame.

    The ground-truth transform is for evaluation and diagnostics only.
    """

    cloud0: PointCloud
    cloud1: PointCloud
    transform: RigidTransform
    overlap: float
    scene_id: str
    seed: int
    scene_seed: int
    shared0: np.ndarray = field(default=None, repr=False)  # cloud0 rows also seen in view 1
    shared1: np.ndarray = field(default=None, repr=False)  # matching rows of cloud1


def scene_id_for(scene_seed: int) -> str:
    return f"scene{scene_seed:05d}"


def generate_scene_pair(seed: int, params: GeneratorParams | None = None,
                        scene_seed: int | None = None) -> ScenePair:
    """Deterministic view pair from ``(seed, scene_seed, params)``."""
    params = (params or GeneratorParams()).validate()
    scene_seed = seed if scene_seed is None else scene_seed
    scene = build_scene(scene_seed, params)
    motion = sample_relative_motion(motion_stream(seed), params)
    cam_rng = _rng(2, seed)
    for attempt in range(params.max_retries):
        pose0 = _camera_pose(cam_rng, scene, params)
        pose1 = pose0 @ motion
        if not _clear(pose1.translation, scene, margin=0.15):
            continue
        vis0 = visible_points(scene, pose0, params)
        vis1 = visible_points(scene, pose1, params)
        if len(vis0) < 100 or len(vis1) < 100:
            continue
        common, i0, i1 = np.intersect1d(vis0, vis1, assume_unique=True, return_indices=True)
        overlap = len(common) / len(vis0)
        if overlap >= params.min_overlap:
            break
    else:
        raise GenerationError(
            f"seed {seed}: overlap >= {params.min_overlap} not reached in {params.max_retries} tries")
    noise_rng = _rng(3, seed)
    cloud0 = _observe(scene, vis0, pose0, noise_rng, params.noise_sigma)
    cloud1 = _observe(scene, vis1, pose1, noise_rng, params.noise_sigma)
    T = pose1.inverse() @ pose0
    return ScenePair(cloud0, cloud1, T, float(overlap), scene_id_for(scene_seed),
                     int(seed), int(scene_seed), i0, i1)


# --------------------------------------------------------------------------
# PLY


def ply_write(path, cloud: PointCloud) -> None:
    """ASCII PLY; doubles written with 17 significant digits, colors as uchar."""
    n = len(cloud)
    lines = ["ply", "format ascii 1.0", "comment bootreg point cloud", f"element vertex {n}",
             "property double x", "property double y", "property double z"]
    cols = [cloud.positions]
    fmt = ["%.17g"] * 3
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        cols.append(np.round(cloud.colors * 255.0))
        fmt += ["%d"] * 3
    if cloud.normals is not None:
        lines += ["property double nx", "property double ny", "property double nz"]
        cols.append(cloud.normals)
        fmt += ["%.17g"] * 3
    lines.append("end_header")
    data = np.hstack(cols) if n else np.zeros((0, len(fmt)))
    row_fmt = " ".join(fmt)
    body = "".join(row_fmt % tuple(row) + "\n" for row in data)
    Path(path).write_text("\n".join(lines) + "\n" + body, encoding="ascii")


_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8",
              "int16", "uint16", "int32", "uint32"}
_FLOAT_TYPES = {"float", "double", "float32", "float64"}


def ply_read(path) -> PointCloud:
    try:
        text = Path(path).read_text(encoding="ascii")
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise PlyParseError(f"{path}: not an ASCII PLY ({exc})") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic", 1)
    elements = []  # (name, count, [(prop_name, type)])
    lineno = 1
    header_end = None
    for lineno in range(2, len(lines) + 1):
        tok = lines[lineno - 1].split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 3 or tok[1] != "ascii":
                raise PlyParseError(f"unsupported format {' '.join(tok[1:])!r}", lineno)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyParseError("element line needs a name and a count", lineno)
            try:
                count = int(tok[2])
            except ValueError:
                raise PlyParseError(f"bad element count {tok[2]!r}", lineno) from None
            if count < 0:
                raise PlyParseError("negative element count", lineno)
            elements.append((tok[1], count, []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", lineno)
            if len(tok) == 5 and tok[1] == "list":
                elements[-1][2].append((tok[4], "list"))
            elif len(tok) == 3:
                if tok[1] not in _INT_TYPES | _FLOAT_TYPES:
                    raise PlyParseError(f"unknown property type {tok[1]!r}", lineno)
                elements[-1][2].append((tok[2], tok[1]))
            else:
                raise PlyParseError("malformed property line", lineno)
        elif tok[0] == "end_header":
            header_end = lineno
            break
        else:
            raise PlyParseError(f"unexpected header keyword {tok[0]!r}", lineno)
    if header_end is None:
        raise PlyParseError("missing end_header", lineno)

    cursor = header_end
    vertex = None
    for name, count, props in elements:
        if name != "vertex":
            if count:
                log.warning("%s: skipping element %r (%d entries)", path, name, count)
            cursor += count
            continue
        names = [p[0] for p in props]
        if any(t == "list" for _, t in props):
            raise PlyParseError("list properties on vertices are not supported", header_end)
        for req in ("x", "y", "z"):
            if req not in names:
                raise PlyParseError(f"vertex element lacks property {req!r}", header_end)
        known = {"x", "y", "z", "red", "green", "blue", "nx", "ny", "nz"}
        extra = [p for p in names if p not in known]
        if extra:
            log.warning("%s: skipping unknown vertex properties %s", path, extra)
        rows = np.zeros((count, len(props)))
        for i in range(count):
            ln = cursor + i + 1
            if ln > len(lines):
                raise PlyParseError(f"expected {count} vertices, file ends after {i}", ln)
            tok = lines[ln - 1].split()
            if len(tok) != len(props):
                raise PlyParseError(f"expected {len(props)} values, found {len(tok)}", ln)
            try:
                rows[i] = [float(t) for t in tok]
            except ValueError:
                raise PlyParseError("non-numeric vertex value", ln) from None
        cursor += count
        vertex = (names, dict(props), rows)
    if vertex is None:
        raise PlyParseError("no vertex element", header_end)
    names, types, rows = vertex
    col = {n: rows[:, i] for i, n in enumerate(names)}
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = normals = None
    if all(c in col for c in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1)
        if types["red"] in _INT_TYPES:
            colors = colors / 255.0
    if all(c in col for c in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        if len(normals) and np.any(np.abs(norm - 1.0) > 1e-6):
            normals = normals / np.where(norm > 0, norm, 1.0)
    return PointCloud(pos, colors, normals)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    scene_id: str
    split: str
    seed: int | None = None
    scene_seed: int | None = None
    cloud0: str | None = None
    cloud1: str | None = None
    gt: dict | None = None
    overlap: float | None = None

    @property
    def transform(self) -> RigidTransform | None:
        return None if self.gt is None else RigidTransform.from_dict(self.gt)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class PairManifest:
    entries: tuple
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def validate_splits(entries) -> None:
    owner = {}
    for e in entries:
        if e.split not in SPLITS:
            raise ManifestError(f"pair {e.pair_id}: unknown split {e.split!r}")
        prev = owner.setdefault(e.scene_id, e.split)
        if prev != e.split:
            raise ManifestError(f"scene {e.scene_id} appears in both {prev!r} and {e.split!r}")


def load_manifest(path) -> PairManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entries.append(ManifestEntry(**rec))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        e = entries[-1]
        if e.seed is None and (e.cloud0 is None or e.cloud1 is None):
            raise ManifestError(f"{path}:{lineno}: need a seed or both cloud paths")
    validate_splits(entries)
    manifest = PairManifest(tuple(entries), path.parent)
    missing = [str(manifest.resolve(p)) for e in entries for p in (e.cloud0, e.cloud1)
               if p is not None and not manifest.resolve(p).exists()]
    if missing:
        raise FileNotFoundError("missing point cloud files: " + ", ".join(missing))
    return manifest


def write_manifest(path, entries) -> None:
    validate_splits(entries)
    Path(path).write_text("".join(e.to_json() + "\n" for e in entries))


def load_pair(manifest: PairManifest, entry: ManifestEntry,
              params: GeneratorParams | None = None) -> tuple[PointCloud, PointCloud, RigidTransform | None]:
    """Clouds from files when the entry names them, else regenerated from the seed."""
    if entry.cloud0 is not None:
        c0 = ply_read(manifest.resolve(entry.cloud0))
        c1 = ply_read(manifest.resolve(entry.cloud1))
        return c0, c1, entry.transform
    pair = generate_scene_pair(entry.seed, params, entry.scene_seed)
    return pair.cloud0, pair.cloud1, pair.transform


def split_for_scene(scene_index: int, n_scenes: int, fractions=(0.7, 0.1, 0.2)) -> str:
    """Deterministic split by scene position: first 70% train, next 10% valid, rest test."""
    a = int(round(fractions[0] * n_scenes))
    b = int(round((fractions[0] + fractions[1]) * n_scenes))
    if scene_index < a:
        return "train"
    if scene_index < b:
        return "valid"
    return "test"

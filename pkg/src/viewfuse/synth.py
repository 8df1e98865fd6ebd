"""Synthetic RGB-D rooms and an exact ray-casting renderer.

A scene is an axis-aligned room (floor slab + four wall slabs, no ceiling)
holding boxes, spheres and upright cylinders. Two cylinder classes share the
same shape distribution and differ only in base color, so geometry alone
cannot tell them apart.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, PointCloud, Pose, RgbdFrame
from .errors import ValidationError
from .scene import IGNORE_LABEL, Scene, write_scene

CLASS_NAMES = ("floor", "wall", "box", "sphere", "twin_a", "twin_b")
FLOOR, WALL, BOX, SPHERE, TWIN_A, TWIN_B = range(6)
TWIN_CLASSES = (TWIN_A, TWIN_B)

_LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Cylinder:
    """Upright (z-axis) capped cylinder."""

    center_xy: tuple
    z0: float
    z1: float
    radius: float


@dataclass(frozen=True)
class SceneObject:
    shape: object
    class_id: int
    color: tuple


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_train: int = 32
    num_val: int = 8
    frames_per_scene: int = 20
    width: int = 48
    height: int = 36
    hfov_deg: float = 70.0
    point_density: float = 300.0
    color_noise: float = 0.03
    room_size: tuple = (3.0, 4.0)
    room_height: float = 2.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    room: tuple
    objects: tuple
    cameras: tuple
    width: int = 48
    height: int = 36
    hfov_deg: float = 70.0
    point_density: float = 300.0
    color_noise: float = 0.03
    num_classes: int = len(CLASS_NAMES)


# ---------------------------------------------------------------- intersection

def intersect_box(origins, dirs, box: Box):
    """Slab test. Returns ``(t, normals)``; ``t`` is ``inf`` on a miss."""
    lo, hi = np.asarray(box.lo, float), np.asarray(box.hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    near_axis = np.argmax(tmin, axis=1)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > _EPS)
    t = np.where(hit, t_near, np.inf)
    normals = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    normals[rows, near_axis] = -np.sign(dirs[rows, near_axis])
    return t, normals


def intersect_sphere(origins, dirs, sphere: Sphere):
    c = np.asarray(sphere.center, float)
    oc = origins - c
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2 * np.einsum("ij,ij->i", dirs, oc)
    cc = np.einsum("ij,ij->i", oc, oc) - sphere.radius ** 2
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
    t = np.where(disc >= 0, t, np.inf)
    p = origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs
    return t, (p - c) / sphere.radius


def intersect_cylinder(origins, dirs, cyl: Cylinder):
    cx, cy = cyl.center_xy
    ox, oy = origins[:, 0] - cx, origins[:, 1] - cy
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl.radius ** 2
    disc = b * b - 4 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0))
        best = np.full(len(dirs), np.inf)
        normals = np.zeros_like(dirs)
        for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = origins[:, 2] + root * dz
            ok = (disc >= 0) & (a > 0) & (root > _EPS) & (z >= cyl.z0) & (z <= cyl.z1) & (root < best)
            best = np.where(ok, root, best)
            px, py = ox + root * dx, oy + root * dy
            normals[ok] = np.stack([px[ok], py[ok], np.zeros(ok.sum())], axis=1) / cyl.radius
        for zc, nz in ((cyl.z1, 1.0), (cyl.z0, -1.0)):
            tc = (zc - origins[:, 2]) / dz
            px, py = ox + tc * dx, oy + tc * dy
            ok = (dz != 0) & (tc > _EPS) & (px * px + py * py <= cyl.radius ** 2) & (tc < best)
            best = np.where(ok, tc, best)
            normals[ok] = (0.0, 0.0, nz)
    return best, normals


def intersect(origins, dirs, shape):
    if isinstance(shape, Box):
        return intersect_box(origins, dirs, shape)
    if isinstance(shape, Sphere):
        return intersect_sphere(origins, dirs, shape)
    if isinstance(shape, Cylinder):
        return intersect_cylinder(origins, dirs, shape)
    raise ValidationError(f"unknown shape {type(shape).__name__}")


def room_objects(room, floor_color, wall_color, thickness=0.1) -> list:
    lx, ly, lz = room
    t = thickness
    objs = [SceneObject(Box((-t, -t, -t), (lx + t, ly + t, 0.0)), FLOOR, floor_color)]
    for lo, hi in (((-t, -t, 0.0), (0.0, ly + t, lz)), ((lx, -t, 0.0), (lx + t, ly + t, lz)),
                   ((-t, -t, 0.0), (lx + t, 0.0, lz)), ((-t, ly, 0.0), (lx + t, ly + t, lz))):
        objs.append(SceneObject(Box(lo, hi), WALL, wall_color))
    return objs


def cast_rays(origins, dirs, objects):
    """Closest hit over ``objects``: ``(t, object_index, normals)``; index -1 on miss."""
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    normals = np.zeros_like(dirs)
    for i, obj in enumerate(objects):
        t, n = intersect(origins, dirs, obj.shape)
        closer = t < best
        best = np.where(closer, t, best)
        which[closer] = i
        normals[closer] = n[closer]
    return best, which, normals


def shade(base_colors, normals, rng, noise):
    lam = np.clip(normals @ _LIGHT, 0, None)
    col = base_colors * (0.35 + 0.65 * lam)[:, None]
    if noise:
        col = col + rng.normal(0, noise, size=col.shape)
    return np.clip(col, 0, 1)


def render_frame(objects, intrinsics: CameraIntrinsics, pose: Pose, rng, noise=0.03,
                 frame_id=0):
    """Ray-cast one RGB-D frame. Returns ``(frame, label_map)``."""
    h, w = intrinsics.height, intrinsics.width
    v, u = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(u.ravel() - intrinsics.cx) / intrinsics.fx,
                      (v.ravel() - intrinsics.cy) / intrinsics.fy, np.ones(h * w)], axis=1)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    t, which, normals = cast_rays(origins, dirs, objects)
    hit = which >= 0
    # z-component of the unnormalized camera ray is 1, so t is the z-depth
    depth = np.where(hit, t, 0.0)
    colors = np.array([o.color for o in objects] + [(0.0, 0.0, 0.0)])[which]
    rgb = shade(colors, normals, rng, noise)
    rgb[~hit] = 0.0
    classes = np.array([o.class_id for o in objects] + [IGNORE_LABEL])[which]
    labels = np.where(hit, classes, IGNORE_LABEL)
    # quantize exactly as the on-disk format does
    rgb8 = np.round(rgb.reshape(h, w, 3) * 255) / 255.0
    depth32 = depth.reshape(h, w).astype(np.float32).astype(np.float64)
    return RgbdFrame(rgb8, depth32, intrinsics, pose, frame_id), labels.reshape(h, w)


# ---------------------------------------------------------------- surfaces

def _patches(obj: SceneObject, room, footprints):
    """Sampleable surface patches of an object as ``(area, sampler)`` pairs."""
    s = obj.shape
    lx, ly, lz = room
    out = []
    if obj.class_id == FLOOR:
        def floor_sampler(rng, n):
            pts = np.empty((0, 3))
            while len(pts) < n:
                cand = np.column_stack([rng.uniform(0, lx, 2 * n), rng.uniform(0, ly, 2 * n),
                                        np.zeros(2 * n)])
                cand = cand[~_inside_footprints(cand, footprints)]
                pts = np.concatenate([pts, cand])
            return pts[:n], np.tile([0.0, 0, 1], (n, 1))
        out.append((lx * ly - sum(f[0] for f in footprints), floor_sampler))
    elif obj.class_id == WALL:
        lo, hi = np.asarray(s.lo), np.asarray(s.hi)
        if hi[0] - lo[0] < 0.5:
            x = 0.0 if hi[0] <= 0 else lx
            nx = 1.0 if x == 0 else -1.0
            out.append((ly * lz, lambda rng, n, x=x, nx=nx: (
                np.column_stack([np.full(n, x), rng.uniform(0, ly, n), rng.uniform(0, lz, n)]),
                np.tile([nx, 0, 0], (n, 1)))))
        else:
            y = 0.0 if hi[1] <= 0 else ly
            ny = 1.0 if y == 0 else -1.0
            out.append((lx * lz, lambda rng, n, y=y, ny=ny: (
                np.column_stack([rng.uniform(0, lx, n), np.full(n, y), rng.uniform(0, lz, n)]),
                np.tile([0, ny, 0], (n, 1)))))
    elif isinstance(s, Box):
        lo, hi = np.asarray(s.lo, float), np.asarray(s.hi, float)
        for axis in range(3):
            for side, bound in ((-1, lo), (1, hi)):
                if axis == 2 and side == -1:
                    continue  # resting on the floor
                others = [a for a in range(3) if a != axis]
                area = float(np.prod(hi[others] - lo[others]))

                def face(rng, n, axis=axis, side=side, bound=bound, others=others):
                    p = np.empty((n, 3))
                    p[:, axis] = bound[axis]
                    for a in others:
                        p[:, a] = rng.uniform(lo[a], hi[a], n)
                    nrm = np.zeros((n, 3))
                    nrm[:, axis] = side
                    return p, nrm
                out.append((area, face))
    elif isinstance(s, Sphere):
        c = np.asarray(s.center, float)

        def sph(rng, n):
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return c + s.radius * v, v
        out.append((4 * np.pi * s.radius ** 2, sph))
    elif isinstance(s, Cylinder):
        cx, cy = s.center_xy

        def side_s(rng, n):
            a = rng.uniform(0, 2 * np.pi, n)
            nrm = np.column_stack([np.cos(a), np.sin(a), np.zeros(n)])
            p = np.column_stack([cx + s.radius * nrm[:, 0], cy + s.radius * nrm[:, 1],
                                 rng.uniform(s.z0, s.z1, n)])
            return p, nrm

        def top_s(rng, n):
            r = s.radius * np.sqrt(rng.uniform(0, 1, n))
            a = rng.uniform(0, 2 * np.pi, n)
            p = np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a), np.full(n, s.z1)])
            return p, np.tile([0.0, 0, 1], (n, 1))
        out.append((2 * np.pi * s.radius * (s.z1 - s.z0), side_s))
        out.append((np.pi * s.radius ** 2, top_s))
    return out


def _footprint(shape):
    """``(area, kind, params)`` of the floor region hidden under a shape."""
    if isinstance(shape, Box) and shape.lo[2] <= 0:
        return ((shape.hi[0] - shape.lo[0]) * (shape.hi[1] - shape.lo[1]), "rect",
                (shape.lo[0], shape.lo[1], shape.hi[0], shape.hi[1]))
    if isinstance(shape, Cylinder) and shape.z0 <= 0:
        return (np.pi * shape.radius ** 2, "disc", (*shape.center_xy, shape.radius))
    return None


def _inside_footprints(pts, footprints):
    inside = np.zeros(len(pts), dtype=bool)
    for _, kind, prm in footprints:
        if kind == "rect":
            x0, y0, x1, y1 = prm
            inside |= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        else:
            cx, cy, r = prm
            inside |= (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2 <= r * r
    return inside


def surface_areas(spec: SceneSpec) -> np.ndarray:
    """Visible (sampleable) surface area per class."""
    objects = all_objects(spec)
    footprints = [f for f in (_footprint(o.shape) for o in objects if o.class_id > WALL)
                  if f is not None]
    areas = np.zeros(spec.num_classes)
    for obj in objects:
        for area, _ in _patches(obj, spec.room, footprints):
            areas[obj.class_id] += area
    return areas


def sample_surface(spec: SceneSpec, rng) -> tuple:
    """Points uniform per unit visible area: ``(positions, normals, object_index)``."""
    objects = all_objects(spec)
    footprints = [f for f in (_footprint(o.shape) for o in objects if o.class_id > WALL)
                  if f is not None]
    patches = [(i, area, fn) for i, o in enumerate(objects)
               for area, fn in _patches(o, spec.room, footprints)]
    areas = np.array([a for _, a, _ in patches])
    total = int(round(spec.point_density * areas.sum()))
    counts = rng.multinomial(total, areas / areas.sum())
    pos, nrm, owner = [], [], []
    for (i, _, fn), n in zip(patches, counts):
        if n == 0:
            continue
        p, nm = fn(rng, int(n))
        pos.append(p)
        nrm.append(nm)
        owner.append(np.full(int(n), i))
    return np.concatenate(pos), np.concatenate(nrm), np.concatenate(owner)


# ---------------------------------------------------------------- scenes

def all_objects(spec: SceneSpec) -> list:
    return list(spec.objects)


def _random_color(rng):
    hsv_h = rng.uniform(0, 1)
    sat = rng.uniform(0.3, 0.8)
    val = rng.uniform(0.5, 0.9)
    i = int(hsv_h * 6) % 6
    f = hsv_h * 6 - int(hsv_h * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    return [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i]


def random_scene_spec(seed: int, config: SynthConfig = SynthConfig()) -> SceneSpec:
    """Draw a random room, furniture layout and camera orbit."""
    rng = np.random.default_rng(seed)
    lx, ly = rng.uniform(*config.room_size, size=2)
    lz = config.room_height
    room = (float(lx), float(ly), float(lz))
    jitter = lambda c, s=0.05: tuple(float(x) for x in np.clip(np.asarray(c) + rng.uniform(-s, s, 3), 0, 1))
    objects = room_objects(room, jitter((0.55, 0.5, 0.45)), jitter((0.8, 0.78, 0.72)))

    placed = []  # (x, y, radius) bounding circles

    def place(radius):
        for _ in range(200):
            x = rng.uniform(0.15 + radius, lx - 0.15 - radius)
            y = rng.uniform(0.15 + radius, ly - 0.15 - radius)
            if all((x - px) ** 2 + (y - py) ** 2 > (radius + pr + 0.1) ** 2 for px, py, pr in placed):
                placed.append((x, y, radius))
                return x, y
        return None

    kinds = ([BOX] * int(rng.integers(2, 4)) + [SPHERE] * int(rng.integers(1, 3))
             + [TWIN_A] * int(rng.integers(2, 4)) + [TWIN_B] * int(rng.integers(2, 4)))
    for k in rng.permutation(kinds):
        if k == BOX:
            sx, sy = rng.uniform(0.3, 0.7, 2)
            sz = rng.uniform(0.3, 0.9)
            at = place(0.5 * np.hypot(sx, sy))
            if at is None:
                continue
            x, y = at
            shape = Box((x - sx / 2, y - sy / 2, 0.0), (x + sx / 2, y + sy / 2, sz))
            color = _random_color(rng)
        elif k == SPHERE:
            r = rng.uniform(0.2, 0.35)
            at = place(r)
            if at is None:
                continue
            shape = Sphere((at[0], at[1], r), r)
            color = _random_color(rng)
        else:
            r = rng.uniform(0.15, 0.28)
            hgt = rng.uniform(0.5, 1.0)
            at = place(r)
            if at is None:
                continue
            shape = Cylinder((at[0], at[1]), 0.0, hgt, r)
            color = jitter((0.8, 0.25, 0.2) if k == TWIN_A else (0.2, 0.4, 0.8), 0.08)
        objects.append(SceneObject(_floatify(shape), int(k), tuple(float(c) for c in color)))

    cameras = []
    center = np.array([lx / 2, ly / 2])
    rho = 0.3 * min(lx, ly)
    for i in range(config.frames_per_scene):
        ang = 2 * np.pi * i / config.frames_per_scene + rng.uniform(-0.2, 0.2)
        eye = np.array([*(center + rho * np.array([np.cos(ang), np.sin(ang)])),
                        rng.uniform(1.3, 1.8)])
        for _ in range(100):
            target = np.array([rng.uniform(0.3, lx - 0.3), rng.uniform(0.3, ly - 0.3),
                               rng.uniform(0.1, 0.7)])
            if np.linalg.norm(target[:2] - eye[:2]) > 1.0:
                break
        pose = Pose.look_at(eye, target)
        cameras.append((tuple(pose.rotation.ravel().tolist()), tuple(pose.translation.tolist())))
    return SceneSpec(seed=int(seed), room=room, objects=tuple(objects), cameras=tuple(cameras),
                     width=config.width, height=config.height, hfov_deg=config.hfov_deg,
                     point_density=config.point_density, color_noise=config.color_noise)


def _floatify(shape):
    if isinstance(shape, Box):
        return Box(tuple(float(x) for x in shape.lo), tuple(float(x) for x in shape.hi))
    if isinstance(shape, Sphere):
        return Sphere(tuple(float(x) for x in shape.center), float(shape.radius))
    return Cylinder(tuple(float(x) for x in shape.center_xy), float(shape.z0), float(shape.z1),
                    float(shape.radius))


def validate_spec(spec: SceneSpec):
    lx, ly, lz = spec.room
    if min(lx, ly, lz) <= 0:
        raise ValidationError("room extents must be positive")
    if spec.width < 1 or spec.height < 1 or not spec.cameras:
        raise ValidationError("need a positive resolution and at least one camera")
    bad = {o.class_id for o in spec.objects} - set(range(spec.num_classes))
    if bad:
        raise ValidationError(f"class ids must lie in [0, {spec.num_classes}), got {sorted(bad)}")
    for o in spec.objects:
        s = o.shape
        if o.class_id in (FLOOR, WALL):
            continue
        if isinstance(s, Box):
            lo, hi = np.asarray(s.lo), np.asarray(s.hi)
            if np.any(hi <= lo):
                raise ValidationError("box with non-positive extent")
            if np.any(lo < 0) or hi[0] > lx or hi[1] > ly or hi[2] > lz:
                raise ValidationError("box outside the room")
        elif isinstance(s, Sphere):
            c = np.asarray(s.center)
            if s.radius <= 0 or np.any(c - s.radius < -1e-12) or c[0] + s.radius > lx \
                    or c[1] + s.radius > ly or c[2] + s.radius > lz:
                raise ValidationError("sphere degenerate or outside the room")
        elif isinstance(s, Cylinder):
            cx, cy = s.center_xy
            if s.radius <= 0 or s.z1 <= s.z0 or cx - s.radius < 0 or cy - s.radius < 0 \
                    or cx + s.radius > lx or cy + s.radius > ly or s.z0 < 0 or s.z1 > lz:
                raise ValidationError("cylinder degenerate or outside the room")


def generate_scene(spec: SceneSpec, name: str | None = None) -> Scene:
    """Sample the scene point cloud and render every camera of ``spec``.

    All outputs are quantized exactly like the on-disk format (f32 positions
    and depth, 8-bit colors), so writing and re-reading a scene is lossless.
    """
    validate_spec(spec)
    rng = np.random.default_rng([spec.seed, 1])
    objects = all_objects(spec)
    pos, nrm, owner = sample_surface(spec, rng)
    base = np.array([o.color for o in objects])[owner]
    colors = np.round(shade(base, nrm, rng, spec.color_noise) * 255) / 255.0
    labels = np.array([o.class_id for o in objects])[owner]
    pos = pos.astype(np.float32).astype(np.float64)
    cloud = PointCloud(pos, colors, labels)
    intr = CameraIntrinsics.from_fov(spec.width, spec.height, spec.hfov_deg)
    frames, labels2d = [], []
    for fid, (rot, trans) in enumerate(spec.cameras):
        frame, lab = render_frame(objects, intr, Pose(np.array(rot).reshape(3, 3), trans), rng,
                                  spec.color_noise, fid)
        frames.append(frame)
        labels2d.append(lab)
    return Scene(name or f"scene_{spec.seed}", cloud, frames, labels2d, floor_z=0.0,
                 meta={"seed": spec.seed, "room": list(spec.room)})


def corpus_seeds(config: SynthConfig) -> dict:
    seq = np.random.SeedSequence(config.seed)
    seeds = seq.generate_state(config.num_train + config.num_val, dtype=np.uint32)
    return {"train": [int(s) for s in seeds[: config.num_train]],
            "val": [int(s) for s in seeds[config.num_train:]]}


def generate_corpus(config: SynthConfig = SynthConfig(), with_coverage: bool = True) -> dict:
    """In-memory corpus ``{"train": [Scene], "val": [Scene]}``."""
    from .viewsel import build_coverage_index
    out = {}
    for split, seeds in corpus_seeds(config).items():
        scenes = []
        for i, s in enumerate(seeds):
            scene = generate_scene(random_scene_spec(s, config), f"{split}_{i:03d}")
            if with_coverage:
                scene.coverage = build_coverage_index(scene.points, scene.frames)
            scenes.append(scene)
        out[split] = scenes
    return out


def write_corpus(config: SynthConfig, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(config)
    for split, scenes in corpus.items():
        for scene in scenes:
            write_scene(scene, root / split / scene.name)
    (root / "corpus.json").write_text(json.dumps(
        {"synth": asdict(config), "class_names": list(CLASS_NAMES),
         "splits": {k: [s.name for s in v] for k, v in corpus.items()}}, indent=1, sort_keys=True))
    return root


def read_corpus(directory) -> dict:
    from .errors import DependencyError
    from .scene import read_scene
    root = Path(directory)
    meta_path = root / "corpus.json"
    if not meta_path.exists():
        raise DependencyError(f"{root}: corpus.json missing (run `synth` first)")
    meta = json.loads(meta_path.read_text())
    return {split: [read_scene(root / split / name) for name in names]
            for split, names in meta["splits"].items()}

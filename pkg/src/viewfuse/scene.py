"""Scene container and the on-disk scene directory format.

Directory layout (all little-endian)::

    points.bin              f32 x,y,z triples
    labels.bin              u16 class id per point
    colors.bin              u8 r,g,b per point (optional)
    frames/<id>/rgb.ppm     binary PPM, P6, maxval 255
    frames/<id>/depth.f32   row-major f32 meters, 0 = invalid
    frames/<id>/camera.json intrinsics, row-major 3x3 rotation, translation
    labels2d/<id>.u16       row-major u16 per-pixel class id (optional)
    coverage.json           cached view-selection coverage index (optional)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, PointCloud, Pose, RgbdFrame
from .errors import DependencyError, ValidationError

IGNORE_LABEL = 65535


@dataclass(eq=False)
class Scene:
    name: str
    points: PointCloud
    frames: list
    labels2d: list | None = None
    coverage: object = None
    floor_z: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.points.labels is None:
            raise ValidationError("scene points need labels")
        if self.floor_z is None:
            self.floor_z = float(self.points.positions[:, 2].min()) if len(self.points) else 0.0

    @property
    def colors(self):
        return self.points.features

    def with_points(self, indices) -> "Scene":
        """Same frames / coverage index, point cloud restricted to ``indices``."""
        return replace(self, points=self.points.subset(indices))


def quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def _write_ppm(path: Path, rgb8: np.ndarray):
    h, w, _ = rgb8.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb8.tobytes())


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValidationError(f"{path}: expected binary P6 PPM with maxval 255")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3)


def camera_to_json(intr: CameraIntrinsics, pose: Pose) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "rotation": [float(x) for x in pose.rotation.ravel()],
        "translation": [float(x) for x in pose.translation],
    }


def camera_from_json(d: dict):
    intr = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            int(d["width"]), int(d["height"]))
    pose = Pose(np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                np.array(d["translation"], dtype=np.float64))
    return intr, pose


def write_scene(scene: Scene, directory):
    out = Path(directory)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    scene.points.positions.astype("<f4").tofile(out / "points.bin")
    scene.points.labels.astype("<u2").tofile(out / "labels.bin")
    if scene.colors is not None:
        quantize_rgb(scene.colors).tofile(out / "colors.bin")
    for frame in scene.frames:
        fdir = out / "frames" / str(frame.frame_id)
        fdir.mkdir(parents=True, exist_ok=True)
        _write_ppm(fdir / "rgb.ppm", quantize_rgb(frame.rgb))
        frame.depth.astype("<f4").tofile(fdir / "depth.f32")
        (fdir / "camera.json").write_text(
            json.dumps(camera_to_json(frame.intrinsics, frame.pose), indent=1, sort_keys=True))
    if scene.labels2d is not None:
        (out / "labels2d").mkdir(exist_ok=True)
        for frame, lab in zip(scene.frames, scene.labels2d):
            lab.astype("<u2").tofile(out / "labels2d" / f"{frame.frame_id}.u16")
    meta = dict(scene.meta, name=scene.name, floor_z=scene.floor_z)
    (out / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if scene.coverage is not None:
        from .viewsel import save_coverage_index
        save_coverage_index(scene.coverage, out / "coverage.json")


def read_scene(directory) -> Scene:
    src = Path(directory)
    if not (src / "points.bin").exists():
        raise DependencyError(f"{src}: not a scene directory (points.bin missing)")
    pos = np.fromfile(src / "points.bin", dtype="<f4").reshape(-1, 3).astype(np.float64)
    labels = np.fromfile(src / "labels.bin", dtype="<u2").astype(np.int64)
    colors = None
    if (src / "colors.bin").exists():
        colors = np.fromfile(src / "colors.bin", dtype=np.uint8).reshape(-1, 3) / 255.0
    frame_ids = sorted(int(p.name) for p in (src / "frames").iterdir() if p.is_dir())
    frames, labels2d = [], []
    for fid in frame_ids:
        fdir = src / "frames" / str(fid)
        intr, pose = camera_from_json(json.loads((fdir / "camera.json").read_text()))
        rgb = _read_ppm(fdir / "rgb.ppm") / 255.0
        depth = np.fromfile(fdir / "depth.f32", dtype="<f4").reshape(intr.height, intr.width)
        frames.append(RgbdFrame(rgb, depth.astype(np.float64), intr, pose, fid))
        lab_path = src / "labels2d" / f"{fid}.u16"
        if lab_path.exists():
            labels2d.append(np.fromfile(lab_path, dtype="<u2").reshape(intr.height, intr.width)
                            .astype(np.int64))
    meta = {}
    if (src / "scene.json").exists():
        meta = json.loads((src / "scene.json").read_text())
    name = meta.pop("name", src.name)
    floor_z = meta.pop("floor_z", None)
    coverage = None
    if (src / "coverage.json").exists():
        from .viewsel import load_coverage_index
        coverage = load_coverage_index(src / "coverage.json")
    return Scene(name, PointCloud(pos, colors, labels), frames,
                 labels2d if len(labels2d) == len(frames) else None, coverage, floor_z, meta)

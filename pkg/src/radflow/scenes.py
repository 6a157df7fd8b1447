"""Analytic scenes: closed-form fields, dense-quadrature ground truth, datasets.

Scenes are unions of constant-density primitives (spheres and boxes) over a
background radiance. The same compositing integral the model renders is
evaluated here with dense midpoint quadrature to produce reference images
and expected-termination depths, so any gap between model renders and the
dataset is learning error, not a modelling mismatch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import imgio
from .render import Camera, composite, expected_depth, final_transmittance, stratified_samples

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Primitive:
    shape: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # sphere: (radius,); box: half-extents (hx, hy, hz)
    density: float
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape '{self.shape}'")
        if self.density < 0:
            raise ValueError("primitive density must be >= 0")
        if not all(0.0 <= c <= 1.0 for c in self.albedo):
            raise ValueError("albedo must lie in [0,1]^3")

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        rel = x - np.asarray(self.center)
        if self.shape == "sphere":
            return (rel**2).sum(axis=-1) <= self.size[0] ** 2
        half = np.asarray(self.size)
        return np.all(np.abs(rel) <= half, axis=-1)


@dataclass(frozen=True)
class AnalyticScene:
    name: str
    primitives: tuple[Primitive, ...]
    background: tuple[float, float, float]
    bounds_lo: tuple[float, float, float]
    bounds_hi: tuple[float, float, float]
    near: float
    far: float
    camera_radius: float = 3.2
    camera_elevation_deg: float = 12.0
    train_azimuths_deg: tuple[float, ...] = (-40.0, -15.0, 10.0, 35.0)
    test_azimuths_deg: tuple[float, ...] = (45.0, 55.0)
    # per-view elevations (parallel to the azimuth lists); falls back to the
    # shared elevation. Spreading them improves vertical parallax, which
    # sparse arcs otherwise lack.
    train_elevations_deg: tuple[float, ...] | None = None
    test_elevations_deg: tuple[float, ...] | None = None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.bounds_lo), np.asarray(self.bounds_hi)

    def elevation_for(self, split: str, index: int) -> float:
        table = self.train_elevations_deg if split == "train" else self.test_elevations_deg
        if table is not None and index < len(table):
            return table[index]
        return self.camera_elevation_deg


def scene_field(scene: AnalyticScene, x: np.ndarray, d: np.ndarray | None = None):
    """Density and radiance of the analytic medium at positions x.

    Density is the sum of the densities of all primitives containing the
    point; radiance is their density-weighted albedo (view independent),
    background albedo in empty space.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = np.zeros(x.shape[:-1])
    weighted = np.zeros(x.shape[:-1] + (3,))
    for prim in scene.primitives:
        inside = prim.contains(x)
        alpha = alpha + prim.density * inside
        weighted = weighted + (prim.density * inside)[..., None] * np.asarray(prim.albedo)
    rgb = np.where(
        alpha[..., None] > 0,
        weighted / np.maximum(alpha, 1e-300)[..., None],
        np.asarray(scene.background),
    )
    return alpha, rgb


def oracle_render(
    scene: AnalyticScene,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_dense: int = 2048,
):
    """Ground-truth colors/depths by dense midpoint quadrature.

    Returns (color (R, 3), depth (R,), vacuum (R,) bool). The background
    radiance enters through the residual transmittance, so rays that miss
    every primitive return the background color exactly and carry the
    vacuum depth flag.
    """
    if n_dense < 1024:
        raise ValueError("oracle quadrature needs at least 1024 nodes")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    nodes = stratified_samples(scene.near, scene.far, n_dense, None)
    t, delta = nodes.t[0], nodes.delta[0]
    color = np.empty((origins.shape[0], 3))
    depth = np.empty(origins.shape[0])
    vacuum = np.empty(origins.shape[0], dtype=bool)
    chunk = max(1, 2_000_000 // n_dense)
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        pts = origins[lo:hi, None, :] + t[None, :, None] * dirs[lo:hi, None, :]
        alpha, rgb = scene_field(scene, pts)
        c, w = composite(alpha, rgb, delta)
        trans = final_transmittance(alpha, delta)
        color[lo:hi] = c + trans[:, None] * np.asarray(scene.background)
        dep, vac = expected_depth(w, t)
        depth[lo:hi] = dep
        vacuum[lo:hi] = vac
    return color, depth, vacuum


# -- builtin scenes --------------------------------------------------------------


def two_sphere_scene() -> AnalyticScene:
    """Two opaque-ish spheres, black background; the training benchmark."""
    return AnalyticScene(
        name="two-sphere",
        primitives=(
            Primitive("sphere", (-0.45, 0.0, 0.0), (0.42,), 8.0, (0.9, 0.25, 0.2)),
            Primitive("sphere", (0.5, 0.15, 0.1), (0.33,), 8.0, (0.2, 0.45, 0.9)),
        ),
        background=(0.0, 0.0, 0.0),
        bounds_lo=(-1.2, -1.2, -1.2),
        bounds_hi=(1.2, 1.2, 1.2),
        near=1.6,
        far=5.2,
        camera_radius=3.2,
        camera_elevation_deg=12.0,
        train_azimuths_deg=(-40.0, -15.0, 10.0, 35.0),
        test_azimuths_deg=(45.0, 55.0),
        train_elevations_deg=(2.0, 28.0, 8.0, 20.0),
        test_elevations_deg=(12.0, 18.0),
    )


def occlusion_scene() -> AnalyticScene:
    """A small sphere tucked under a larger one, hidden from every training view.

    Training cameras sweep a wide azimuth arc from above (good parallax for
    everything they can see); the small sphere sits directly underneath the
    large one, so no training ray ever reaches it. Test cameras look up
    from below and reveal it. This is the calibration benchmark: a model
    that knows what it cannot know should be uncertain exactly there.
    """
    return AnalyticScene(
        name="occlusion",
        primitives=(
            Primitive("sphere", (0.0, 0.12, 0.0), (0.5,), 10.0, (0.85, 0.4, 0.15)),
            Primitive("box", (0.0, -0.5, 0.0), (1.0, 0.08, 1.0), 60.0, (0.6, 0.6, 0.62)),
            Primitive("sphere", (0.0, -0.82, 0.0), (0.2,), 10.0, (0.1, 0.8, 0.7)),
        ),
        background=(0.0, 0.0, 0.0),
        bounds_lo=(-1.25, -1.2, -1.25),
        bounds_hi=(1.25, 1.1, 1.25),
        near=1.5,
        far=5.4,
        camera_radius=3.2,
        camera_elevation_deg=20.0,
        train_azimuths_deg=(-40.0, -15.0, 10.0, 35.0),
        # one held-out view inside the training arc (familiar surfaces and
        # directions) plus one from below that reveals the hidden sphere
        # and the plate underside
        test_azimuths_deg=(-27.0, 10.0),
        train_elevations_deg=(18.0, 30.0, 24.0, 12.0),
        test_elevations_deg=(21.0, -20.0),
    )


BUILTIN_SCENES = {
    "two-sphere": two_sphere_scene,
    "occlusion": occlusion_scene,
}


def load_scene(name_or_path: str) -> AnalyticScene:
    if name_or_path in BUILTIN_SCENES:
        return BUILTIN_SCENES[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(
            f"scene '{name_or_path}' is neither a builtin ({', '.join(BUILTIN_SCENES)}) "
            f"nor a file"
        )
    return scene_from_dict(json.loads(path.read_text()))


def scene_to_dict(scene: AnalyticScene) -> dict:
    return {
        "name": scene.name,
        "background": list(scene.background),
        "bounds_lo": list(scene.bounds_lo),
        "bounds_hi": list(scene.bounds_hi),
        "near": scene.near,
        "far": scene.far,
        "camera_radius": scene.camera_radius,
        "camera_elevation_deg": scene.camera_elevation_deg,
        "train_azimuths_deg": list(scene.train_azimuths_deg),
        "test_azimuths_deg": list(scene.test_azimuths_deg),
        "train_elevations_deg": (
            list(scene.train_elevations_deg) if scene.train_elevations_deg else None
        ),
        "test_elevations_deg": (
            list(scene.test_elevations_deg) if scene.test_elevations_deg else None
        ),
        "primitives": [
            {
                "shape": p.shape,
                "center": list(p.center),
                "size": list(p.size),
                "density": p.density,
                "albedo": list(p.albedo),
            }
            for p in scene.primitives
        ],
    }


def scene_from_dict(d: dict) -> AnalyticScene:
    prims = tuple(
        Primitive(
            p["shape"],
            tuple(p["center"]),
            tuple(p["size"]),
            float(p["density"]),
            tuple(p["albedo"]),
        )
        for p in d["primitives"]
    )
    return AnalyticScene(
        name=d.get("name", "custom"),
        primitives=prims,
        background=tuple(d["background"]),
        bounds_lo=tuple(d["bounds_lo"]),
        bounds_hi=tuple(d["bounds_hi"]),
        near=float(d["near"]),
        far=float(d["far"]),
        camera_radius=float(d.get("camera_radius", 3.2)),
        camera_elevation_deg=float(d.get("camera_elevation_deg", 12.0)),
        train_azimuths_deg=tuple(d.get("train_azimuths_deg", (-40.0, -15.0, 10.0, 35.0))),
        test_azimuths_deg=tuple(d.get("test_azimuths_deg", (45.0, 55.0))),
        train_elevations_deg=(
            tuple(d["train_elevations_deg"]) if d.get("train_elevations_deg") else None
        ),
        test_elevations_deg=(
            tuple(d["test_elevations_deg"]) if d.get("test_elevations_deg") else None
        ),
    )


# -- datasets ----------------------------------------------------------------------


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float64 in [0,1], 8-bit representable
    depth: np.ndarray  # (H, W) float64, f32-representable; 0 marks vacuum
    split: str  # "train" | "test"


@dataclass
class RayDataset:
    scene_name: str
    views: list[View]
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    near: float
    far: float
    scene: AnalyticScene | None = None  # present when generated in-process

    def split_views(self, split: str) -> list[View]:
        return [v for v in self.views if v.split == split]

    def flat_rays(self, split: str):
        """All rays of a split: (origins, dirs, colors, depths, has_reference).

        Oracle-generated depths are references for every ray: a vacuum ray's
        expected termination depth is exactly 0, and supervising it pushes
        spurious density out of empty space. (Depth *metrics* still mask
        vacuum pixels out; disparity is undefined there.)
        """
        from .render import camera_rays

        origins, dirs, colors, depths = [], [], [], []
        for v in self.split_views(split):
            o, d = camera_rays(v.camera)
            origins.append(o)
            dirs.append(d)
            colors.append(v.image.reshape(-1, 3))
            depths.append(v.depth.reshape(-1))
        if not origins:
            raise ValueError(f"dataset has no '{split}' views")
        origins = np.concatenate(origins)
        dirs = np.concatenate(dirs)
        colors = np.concatenate(colors)
        depths = np.concatenate(depths)
        return origins, dirs, colors, depths, np.ones(len(depths), dtype=bool)


def arc_camera(
    scene: AnalyticScene,
    azimuth_deg: float,
    width: int,
    height: int,
    focal: float,
    elevation_deg: float | None = None,
) -> Camera:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(
        scene.camera_elevation_deg if elevation_deg is None else elevation_deg
    )
    r = scene.camera_radius
    eye = np.array(
        [r * np.cos(el) * np.sin(az), r * np.sin(el), r * np.cos(el) * np.cos(az)]
    )
    return Camera.look_at(
        eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), focal, width, height, scene.near, scene.far
    )


def default_focal(resolution: int) -> float:
    # ~35 degree horizontal FOV regardless of resolution
    return 1.6 * resolution


def generate_dataset(
    scene: AnalyticScene,
    n_train: int,
    n_test: int,
    resolution: int,
    rng: np.random.Generator,
    n_dense: int = 2048,
) -> RayDataset:
    """Render every view of the arc layout with the dense-quadrature oracle.

    Images are quantized to 8-bit and depths to float32 at generation time
    so the in-memory dataset is exactly what save/load round-trips.
    The rng argument reserves a hook for randomized layouts; the arc layout
    itself is deterministic.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test view")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    del rng
    train_az = list(scene.train_azimuths_deg)
    test_az = list(scene.test_azimuths_deg)
    if n_train > len(train_az) or n_test > len(test_az):
        # extend the arcs evenly when more views are requested
        train_az = list(np.linspace(min(train_az), max(train_az), n_train))
        span = max(test_az) - min(test_az)
        test_az = list(min(test_az) + span * np.arange(n_test) / max(n_test - 1, 1))
    focal = default_focal(resolution)
    views = []
    from .render import camera_rays

    for split, azimuths, count in (("train", train_az, n_train), ("test", test_az, n_test)):
        for i, az in enumerate(azimuths[:count]):
            cam = arc_camera(scene, az, resolution, resolution, focal, scene.elevation_for(split, i))
            o, d = camera_rays(cam)
            color, depth, vacuum = oracle_render(scene, o, d, n_dense)
            img = imgio.u8_to_float(imgio.quantize_u8(color.reshape(resolution, resolution, 3)))
            dep = depth.reshape(resolution, resolution).astype(np.float32).astype(np.float64)
            dep[vacuum.reshape(resolution, resolution)] = 0.0
            views.append(View(cam, img, dep, split))
    lo, hi = scene.bounds()
    return RayDataset(scene.name, views, lo, hi, scene.near, scene.far, scene=scene)


def save_dataset(dataset: RayDataset, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "scene_name": dataset.scene_name,
        "bounds_lo": dataset.bounds_lo.tolist(),
        "bounds_hi": dataset.bounds_hi.tolist(),
        "near": dataset.near,
        "far": dataset.far,
        "views": [],
    }
    if dataset.scene is not None:
        manifest["scene"] = scene_to_dict(dataset.scene)
    for i, v in enumerate(dataset.views):
        stem = f"view_{i:03d}"
        imgio.write_png(out_dir / f"{stem}.png", v.image)
        imgio.write_pfm(out_dir / f"{stem}.pfm", v.depth)
        manifest["views"].append(
            {
                "name": stem,
                "split": v.split,
                "pose": [float(x) for x in v.camera.pose_matrix().reshape(-1)],
                "focal": v.camera.focal,
                "width": v.camera.width,
                "height": v.camera.height,
                "image": f"{stem}.png",
                "depth": f"{stem}.pfm",
            }
        )
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(path: str | Path) -> RayDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset manifest version {version!r}")
    views = []
    for entry in manifest["views"]:
        img = imgio.u8_to_float(imgio.read_png(path / entry["image"]))
        dep = imgio.read_pfm(path / entry["depth"])
        cam = Camera.from_pose(
            np.asarray(entry["pose"]).reshape(4, 4),
            entry["focal"],
            entry["width"],
            entry["height"],
            manifest["near"],
            manifest["far"],
        )
        if img.shape[:2] != (cam.height, cam.width) or dep.shape != (cam.height, cam.width):
            raise ValueError(
                f"{entry['name']}: payload dims {img.shape[:2]}/{dep.shape} do not match "
                f"camera {cam.height}x{cam.width}"
            )
        views.append(View(cam, img, dep, entry["split"]))
    scene = scene_from_dict(manifest["scene"]) if "scene" in manifest else None
    return RayDataset(
        manifest["scene_name"],
        views,
        np.asarray(manifest["bounds_lo"]),
        np.asarray(manifest["bounds_hi"]),
        manifest["near"],
        manifest["far"],
        scene=scene,
    )


# -- visibility oracle --------------------------------------------------------------


def point_visibility(
    scene: AnalyticScene,
    points: np.ndarray,
    camera: Camera,
    n_dense: int = 1024,
    pullback: float = 0.0,
) -> np.ndarray:
    """Fraction of light reaching each world point from `camera`.

    Transmittance along the segment camera->point (dense quadrature), with
    points outside the camera frustum reported as 0 (unobservable).
    `pullback` shortens each segment at the point end, so a surface point
    is not counted as occluded by the medium it belongs to.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    rel = points - camera.origin
    dist = np.linalg.norm(rel, axis=-1)
    dirs = rel / dist[:, None]
    dist = np.maximum(dist - pullback, 0.0)
    # in-frustum check via projection
    cam_coords = rel @ camera.rotation  # world->camera (R^T columns)
    in_front = cam_coords[:, 2] < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * (-cam_coords[:, 0] / cam_coords[:, 2]) + camera.width / 2.0
        v = camera.focal * (cam_coords[:, 1] / cam_coords[:, 2]) + camera.height / 2.0
    in_frame = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    # accumulate optical depth along each segment (midpoint rule)
    taus = np.zeros(points.shape[0])
    ts = (np.arange(n_dense) + 0.5) / n_dense
    chunk = max(1, 500_000 // n_dense)
    for lo in range(0, points.shape[0], chunk):
        hi = min(lo + chunk, points.shape[0])
        seg = dist[lo:hi, None] * ts[None, :]
        pts = camera.origin + seg[..., None] * dirs[lo:hi, None, :]
        alpha, _ = scene_field(scene, pts)
        taus[lo:hi] = (alpha * (dist[lo:hi, None] / n_dense)).sum(axis=1)
    trans = np.exp(-taus)
    trans[~in_frame] = 0.0
    return trans

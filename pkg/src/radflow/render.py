"""Rays, stratified quadrature, and discrete volume compositing.

The renderer integrates sampled radiance along camera rays with the usual
alpha-compositing discretization: transmittance T_i = exp(-sum_{j<i} a_j d_j),
weight w_i = T_i (1 - exp(-a_i d_i)), color = sum w_i r_i, and expected
termination depth sum w_i t_i. Compositing runs through the diffcore
dispatch so the same code appears inside the training graph and in plain
numpy inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .field import FieldModel

VACUUM_WEIGHT_EPS = 1e-6


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: looks down its local -z axis, y up in camera frame."""

    origin: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3), camera-to-world
    focal: float  # pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("require 0 < near < far")

    def pose_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.origin
        return m

    @staticmethod
    def from_pose(pose: np.ndarray, focal: float, width: int, height: int, near: float, far: float) -> "Camera":
        pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
        return Camera(pose[:3, 3], pose[:3, :3], focal, width, height, near, far)

    @staticmethod
    def look_at(
        eye: np.ndarray,
        target: np.ndarray,
        up: np.ndarray,
        focal: float,
        width: int,
        height: int,
        near: float,
        far: float,
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        z_c = -fwd
        x_c = np.cross(fwd, np.asarray(up, dtype=np.float64))
        x_c /= np.linalg.norm(x_c)
        y_c = np.cross(z_c, x_c)
        rot = np.stack([x_c, y_c, z_c], axis=1)
        return Camera(eye, rot, focal, width, height, near, far)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    near: float
    far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError("require 0 < near < far")


@dataclass
class QuadratureNodes:
    """Ascending sample depths along a ray and their segment lengths."""

    t: np.ndarray  # (..., N)
    delta: np.ndarray  # (..., N); last segment runs to the far plane

    def __post_init__(self):
        if np.any(np.diff(self.t, axis=-1) <= 0):
            raise ValueError("node depths must be strictly increasing")
        if np.any(self.delta <= 0):
            raise ValueError("segment lengths must be positive")


def pixel_dirs_camera(width: int, height: int, focal: float, pixels: np.ndarray) -> np.ndarray:
    """Unnormalized camera-frame directions through pixel centers.

    pixels: (..., 2) integer (u, v) with u rightward, v downward.
    """
    u = pixels[..., 0] + 0.5
    v = pixels[..., 1] + 0.5
    return np.stack(
        [(u - width / 2.0) / focal, -(v - height / 2.0) / focal, -np.ones_like(u)],
        axis=-1,
    )


def pixel_ray(camera: Camera, pixel: tuple[int, int]) -> Ray:
    """World-space ray through the center of pixel (u, v)."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    d_cam = pixel_dirs_camera(camera.width, camera.height, camera.focal, np.array([u, v]))
    d_world = camera.rotation @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(camera.origin, d_world, camera.near, camera.far)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(origins, directions) for every pixel, row-major, shape (H*W, 3)."""
    uu, vv = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    pix = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    d_cam = pixel_dirs_camera(camera.width, camera.height, camera.focal, pix)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.tile(camera.origin, (d_world.shape[0], 1))
    return origins, d_world


def stratified_samples(
    near: float,
    far: float,
    n: int,
    rng: np.random.Generator | None = None,
    *,
    count: int = 1,
) -> QuadratureNodes:
    """One draw per equal-width bin of [near, far]; midpoints when rng is None.

    Returns nodes of shape (count, n); pass count>1 for a batch of rays
    sharing the same near/far.
    """
    if n < 2:
        raise ValueError("need at least two nodes per ray")
    edges = near + (far - near) * np.arange(n + 1) / n
    if rng is None:
        offsets = np.full((count, n), 0.5)
    else:
        offsets = rng.uniform(0.0, 1.0, size=(count, n))
    t = edges[:-1] + offsets * (far - near) / n
    delta = np.empty_like(t)
    delta[..., :-1] = np.diff(t, axis=-1)
    delta[..., -1] = far - t[..., -1]
    return QuadratureNodes(t, delta)


def composite(alpha, rgb, delta):
    """Color and weights from sampled densities/radiances along rays.

    alpha: (..., N) nonnegative; rgb: (..., N, 3) in [0,1]; delta: (..., N).
    Returns (color (..., 3), weights (..., N)). Works on Tensors or arrays.
    """
    if np.any(value_of(alpha) < 0):
        raise ValueError("negative density in composite")
    od = dc.mul(alpha, delta)  # optical depth per segment
    cum = dc.cumsum(od, axis=-1)
    # exclusive prefix: T_1 = 1
    trans = dc.exp(dc.neg(dc.sub(cum, od)))
    w = dc.mul(trans, dc.sub(1.0, dc.exp(dc.neg(od))))
    shape = value_of(w).shape
    w_exp = dc.reshape(w, shape + (1,))
    color = dc.tsum(dc.mul(w_exp, rgb), axis=-2)
    return color, w


def final_transmittance(alpha, delta):
    """T_{N+1}: fraction of light that passes through every segment."""
    return dc.exp(dc.neg(dc.tsum(dc.mul(alpha, delta), axis=-1)))


def expected_depth(weights, t):
    """Termination depth sum_i w_i t_i; 0 for (near-)vacuum rays.

    Returns (depth, vacuum_mask): vacuum rays have total weight below
    VACUUM_WEIGHT_EPS and a defined depth of 0 instead of a 0/0.
    """
    depth = dc.tsum(dc.mul(weights, t), axis=-1)
    vacuum = value_of(dc.tsum(weights, axis=-1)) <= VACUUM_WEIGHT_EPS
    return depth, vacuum


@dataclass
class PixelPrediction:
    """Per-pixel samples over K field draws plus their summary moments."""

    color_samples: np.ndarray  # (K, 3)
    depth_samples: np.ndarray  # (K,)
    color_mean: np.ndarray = dataclass_field(init=False)
    color_var: np.ndarray = dataclass_field(init=False)
    depth_mean: float = dataclass_field(init=False)
    depth_var: float = dataclass_field(init=False)

    def __post_init__(self):
        self.color_mean = self.color_samples.mean(axis=0)
        self.color_var = self.color_samples.var(axis=0)
        self.depth_mean = float(self.depth_samples.mean())
        self.depth_var = float(self.depth_samples.var())

    def kde_loglik(self, gt_color: np.ndarray, bandwidth: float) -> float:
        """Log-likelihood of a ground-truth color under the sample mixture."""
        from .objective import kde_loglik

        return float(kde_loglik(np.asarray(gt_color), self.color_samples, bandwidth))


def render_rays(
    model: FieldModel,
    origins: np.ndarray,
    dirs: np.ndarray,
    nodes: QuadratureNodes,
    latents,
    *,
    graph: bool = False,
):
    """Colors and depths for R rays x K field samples.

    origins/dirs: (R, 3); nodes.t/delta: (R, N) or (N,) shared. `latents`
    is whatever the model mode expects (eps draws or factorized noise).
    Returns (colors (R, K, 3), depths (R, K), vacuum (R, K) bool).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t = np.atleast_2d(np.asarray(nodes.t, dtype=np.float64))
    delta = np.atleast_2d(np.asarray(nodes.delta, dtype=np.float64))
    n_rays = origins.shape[0]
    if t.shape[0] == 1 and n_rays > 1:
        t = np.broadcast_to(t, (n_rays, t.shape[1]))
        delta = np.broadcast_to(delta, (n_rays, delta.shape[1]))
    n_nodes = t.shape[1]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]  # (R, N, 3)
    flat_pts = pts.reshape(-1, 3)
    flat_dirs = np.repeat(dirs, n_nodes, axis=0)
    r, alpha, _, _ = model.decode_batch(flat_pts, flat_dirs, latents, graph=graph)
    k = value_of(r).shape[1]
    # (R*N, K, .) -> (R, K, N, .)
    r = dc.transpose(dc.reshape(r, (n_rays, n_nodes, k, 3)), (0, 2, 1, 3))
    alpha = dc.transpose(dc.reshape(alpha, (n_rays, n_nodes, k)), (0, 2, 1))
    delta_k = delta[:, None, :]
    color, w = composite(alpha, r, delta_k)
    depth, vacuum = expected_depth(w, t[:, None, :])
    return color, depth, vacuum


def render_pixel(
    model: FieldModel,
    ray: Ray,
    latents,
    n_nodes: int,
    rng: np.random.Generator | None = None,
) -> PixelPrediction:
    """Render one pixel: K color/depth samples and their moments.

    Midpoint quadrature when rng is None (deterministic evaluation mode).
    """
    nodes = stratified_samples(ray.near, ray.far, n_nodes, rng)
    color, depth, _ = render_rays(
        model, ray.origin.reshape(1, 3), ray.direction.reshape(1, 3), nodes, latents
    )
    return PixelPrediction(value_of(color)[0], value_of(depth)[0])


def render_image(
    model: FieldModel,
    camera: Camera,
    latents,
    n_nodes: int,
    *,
    chunk: int = 4096,
    factorized_noise_rng: np.random.Generator | None = None,
    k: int | None = None,
):
    """Full-image render with per-pixel moments.

    Returns dict with color_mean (H, W, 3), color_var (H, W, 3),
    depth_mean (H, W), depth_var (H, W), plus the raw per-pixel color and
    depth samples (H, W, K, ...). Latent draws are shared across the whole
    image in cfnerf mode (one latent = one coherent field sample); the
    factorized baseline draws per-point noise chunk by chunk from
    `factorized_noise_rng`, with the fixed `chunk` size part of the
    determinism contract.
    """
    origins, dirs = camera_rays(camera)
    n_pix = origins.shape[0]
    if model.cfg.mode == "cfnerf":
        k_eff = np.asarray(latents).shape[0]
    else:
        if k is None:
            raise ValueError("factorized mode needs an explicit sample count k")
        k_eff = k
    colors = np.empty((n_pix, k_eff, 3))
    depths = np.empty((n_pix, k_eff))
    vacuums = np.empty((n_pix, k_eff), dtype=bool)
    nodes = stratified_samples(camera.near, camera.far, n_nodes, None)
    for lo in range(0, n_pix, chunk):
        hi = min(lo + chunk, n_pix)
        if model.cfg.mode == "cfnerf":
            chunk_latents = latents
        else:
            chunk_latents = model.draw_factorized_noise(
                (hi - lo) * n_nodes, k_eff, factorized_noise_rng
            )
        c, d, v = render_rays(model, origins[lo:hi], dirs[lo:hi], nodes, chunk_latents)
        colors[lo:hi] = value_of(c)
        depths[lo:hi] = value_of(d)
        vacuums[lo:hi] = v
    h, w = camera.height, camera.width
    colors = colors.reshape(h, w, k_eff, 3)
    depths = depths.reshape(h, w, k_eff)
    return {
        "color_samples": colors,
        "depth_samples": depths,
        "color_mean": colors.mean(axis=2),
        "color_var": colors.var(axis=2),
        "depth_mean": depths.mean(axis=2),
        "depth_var": depths.var(axis=2),
        "vacuum": vacuums.reshape(h, w, k_eff).all(axis=2),
    }

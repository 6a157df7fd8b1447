"""Training objective: KDE pixel likelihood, Monte Carlo entropy, depth term.

The loss is the tractable part of a KL divergence between the learned field
distribution and the posterior over fields given the training images:

    total = nll + lambda_H * neg_entropy + lambda_D * depth_reg

where nll is the negative mean log-likelihood of pixel colors under a
Gaussian kernel density over K rendered color samples, neg_entropy is a
Monte Carlo estimate of E[log q] over random scene points (its weight
stops the field distribution collapsing onto a single deterministic
field), and depth_reg is a squared error on expected termination depth
against reference depth where available.

All randomness for one step is drawn up front into a `StepNoise`, so the
loss is a deterministic function of (parameters, batch, noise) and can be
rebuilt exactly for finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import value_of
from .field import D_LATENT, FieldModel
from .render import QuadratureNodes, render_rays

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TrainBatch:
    """Rays with ground-truth colors and optional reference depths."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    colors: np.ndarray  # (R, 3)
    depths: np.ndarray  # (R,), 0 where no reference
    depth_mask: np.ndarray  # (R,) bool

    def __post_init__(self):
        n = self.origins.shape[0]
        for name in ("dirs", "colors", "depths", "depth_mask"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"batch field '{name}' length mismatch")


@dataclass
class StepNoise:
    """Every random draw used by one loss evaluation."""

    node_offsets: np.ndarray  # (R, N) in [0, 1)
    latent_eps: np.ndarray | None = None  # (K, Dz), cfnerf render draws
    factorized: dict | None = None  # baseline render noise
    ent_x: np.ndarray | None = None  # (M, 3)
    ent_d: np.ndarray | None = None  # (M, 3)
    ent_latent_eps: np.ndarray | None = None  # (M, Dz)
    ent_factorized: dict | None = None


@dataclass
class LossBreakdown:
    nll: float
    neg_entropy: float
    depth_reg: float
    total: float
    lambda_entropy: float
    lambda_depth: float

    def to_dict(self) -> dict:
        return {
            "nll": self.nll,
            "neg_entropy": self.neg_entropy,
            "depth_reg": self.depth_reg,
            "total": self.total,
        }


def uniform_sphere(rng: np.random.Generator, count: int) -> np.ndarray:
    v = rng.standard_normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def draw_step_noise(
    model: FieldModel,
    batch_size: int,
    n_nodes: int,
    k: int,
    m_entropy: int,
    bounds_lo: np.ndarray,
    bounds_hi: np.ndarray,
    rng_train: np.random.Generator,
    rng_entropy: np.random.Generator,
) -> StepNoise:
    """Pre-draw all stochastic inputs of one training step."""
    noise = StepNoise(node_offsets=rng_train.uniform(0.0, 1.0, size=(batch_size, n_nodes)))
    if model.cfg.mode == "cfnerf":
        noise.latent_eps = model.draw_latent_noise(k, rng_train)
    else:
        noise.factorized = model.draw_factorized_noise(batch_size * n_nodes, k, rng_train)
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate entropy bounds box")
    noise.ent_x = rng_entropy.uniform(lo, hi, size=(m_entropy, 3))
    noise.ent_d = uniform_sphere(rng_entropy, m_entropy)
    if model.cfg.mode == "cfnerf":
        noise.ent_latent_eps = model.draw_latent_noise(m_entropy, rng_entropy)
    else:
        noise.ent_factorized = model.draw_factorized_noise(m_entropy, 1, rng_entropy)
    return noise


def kde_loglik(color, samples, bandwidth: float):
    """log of a K-component Gaussian mixture density at `color`.

    color: (..., 3) ground truth; samples: (..., K, 3) rendered colors.
    The kernel is isotropic with standard deviation `bandwidth` per
    channel; evaluation is log-sum-exp stabilized. Works on Tensors or
    arrays; returns shape (...,).
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    c = value_of(color)
    k = value_of(samples).shape[-2]
    cc = c[..., None, :]  # (... , 1, 3)
    resid = dc.mul(dc.sub(samples, cc), 1.0 / bandwidth)
    log_kernel = dc.sub(
        dc.mul(dc.tsum(dc.square(resid), axis=-1), -0.5),
        3.0 * (0.5 * LOG_2PI + np.log(bandwidth)),
    )
    return dc.sub(dc.logsumexp(log_kernel, axis=-1), np.log(k))


def entropy_term(model: FieldModel, noise: StepNoise, *, graph: bool):
    """Mean log q over the pre-drawn entropy samples (the E[log q] term)."""
    x = noise.ent_x
    d = noise.ent_d
    if model.cfg.mode == "cfnerf":
        eps = noise.ent_latent_eps.reshape(-1, 1, D_LATENT)  # one latent per point
        latents = eps
    else:
        latents = noise.ent_factorized
    _, _, lq_r, lq_a = model.decode_batch(x, d, latents, graph=graph, want_logq=True)
    return dc.tmean(dc.add(lq_r, lq_a))


def entropy_mc(
    model: FieldModel,
    m: int,
    bounds_lo: np.ndarray,
    bounds_hi: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """Standalone Monte Carlo E[log q] estimate with fresh draws."""
    if m < 1:
        raise ValueError("need at least one entropy sample")
    noise = StepNoise(node_offsets=np.zeros((0, 0)))
    lo = np.asarray(bounds_lo, dtype=np.float64)
    hi = np.asarray(bounds_hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("degenerate entropy bounds box")
    noise.ent_x = rng.uniform(lo, hi, size=(m, 3))
    noise.ent_d = uniform_sphere(rng, m)
    if model.cfg.mode == "cfnerf":
        noise.ent_latent_eps = model.draw_latent_noise(m, rng)
    else:
        noise.ent_factorized = model.draw_factorized_noise(m, 1, rng)
    return float(value_of(entropy_term(model, noise, graph=False)))


def batch_loss(
    model: FieldModel,
    batch: TrainBatch,
    noise: StepNoise,
    *,
    near: float,
    far: float,
    bandwidth: float = 0.05,
    lambda_entropy: float = 0.01,
    lambda_depth: float = 1e-2,
    graph: bool = True,
):
    """Full training loss for one batch; returns (scalar, LossBreakdown).

    In graph mode the scalar is a Tensor ready for backward(); otherwise a
    plain float evaluation of the identical computation.
    """
    n_rays, n_nodes = noise.node_offsets.shape
    if batch.origins.shape[0] != n_rays:
        raise ValueError("noise and batch disagree on ray count")
    width = (far - near) / n_nodes
    t = near + (np.arange(n_nodes) + noise.node_offsets) * width
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    nodes = QuadratureNodes(t, delta)
    latents = noise.latent_eps if model.cfg.mode == "cfnerf" else noise.factorized
    colors, depths, _ = render_rays(model, batch.origins, batch.dirs, nodes, latents, graph=graph)

    loglik = kde_loglik(batch.colors, colors, bandwidth)
    nll = dc.neg(dc.tmean(loglik))

    neg_entropy = entropy_term(model, noise, graph=graph)

    mask = batch.depth_mask.astype(np.float64)
    denom = max(float(mask.sum()), 1.0)
    depth_pred = dc.tmean(depths, axis=-1)  # expected depth per ray, mean over K
    sq = dc.square(dc.sub(depth_pred, batch.depths))
    depth_reg = dc.mul(dc.tsum(dc.mul(sq, mask)), 1.0 / denom)

    total = dc.add(nll, dc.add(dc.mul(neg_entropy, lambda_entropy), dc.mul(depth_reg, lambda_depth)))
    breakdown = LossBreakdown(
        nll=float(value_of(nll)),
        neg_entropy=float(value_of(neg_entropy)),
        depth_reg=float(value_of(depth_reg)),
        total=float(value_of(total)),
        lambda_entropy=lambda_entropy,
        lambda_depth=lambda_depth,
    )
    return total, breakdown

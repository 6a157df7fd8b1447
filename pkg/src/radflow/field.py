"""Probabilistic radiance field: latent prior, conditioner MLP, conditional flows.

A scene is modelled as a distribution over radiance fields. One global
latent vector z ~ N(mu, sigma^2) is decoded, per query point, into radiance
and density by two stacks of conditional residual flows whose parameters
are affine functions of a per-point embedding h computed by an MLP from the
encoded position (and view direction, for radiance only). Exact
log-densities come from the change-of-variables formula; each flow stage's
Jacobian determinant reduces to an M x M determinant via the Sylvester
identity det(I_D + A S B) = det(I_M + S B A).

Invertibility is enforced by construction rather than checked per step:
the hypernetwork emits A = A_raw * diag(tanh(s)) and rescales B so that
||B A||_F <= gamma < 1, which keeps every determinant factor in
[(1-gamma)^M, (1+gamma)^M] and makes each residual stage a global
diffeomorphism.

All math goes through the diffcore dispatch functions, so the same code
runs in graph mode (Tensors, training) and raw numpy mode (inference).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterSet, value_of

LOG_2PI = float(np.log(2.0 * np.pi))

D_RGB = 3
D_ALPHA = 1
D_LATENT = D_RGB + D_ALPHA


@dataclass(frozen=True)
class FieldConfig:
    """Architecture hyperparameters of the field model."""

    n_flows: int = 4
    cond_dim: int = 64
    hidden: int = 512
    n_layers: int = 8
    skip_layer: int = 5  # 1-indexed trunk layer that re-reads the encoded position
    freqs_x: int = 10
    freqs_d: int = 4
    gamma: float = 0.9
    mode: str = "cfnerf"  # "cfnerf" | "snerf-baseline"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_dim"] = D_LATENT
        return d

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        d = {k: v for k, v in d.items() if k != "latent_dim"}
        return FieldConfig(**d)


def positional_encode(p: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal features (p, sin(2^l pi p), cos(2^l pi p)) for l < n_freq.

    Output dim is |p| * (2 * n_freq + 1). Positions and directions are
    never differentiated, so this always runs in plain numpy.
    """
    p = np.asarray(p, dtype=np.float64)
    parts = [p]
    for l in range(n_freq):
        arg = (2.0**l) * np.pi * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encoded_dim(base_dim: int, n_freq: int) -> int:
    return base_dim * (2 * n_freq + 1)


# -- parameter construction ---------------------------------------------------


def _dense_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def _flow_param_names(branch: str, k: int) -> list[str]:
    base = f"flow.{branch}.{k}"
    return [f"{base}.{p}" for p in ("wA", "bA", "wB", "bB", "wb", "bb", "ws", "bs")]


def init_field_params(cfg: FieldConfig, rng: np.random.Generator) -> ParameterSet:
    """Fresh trainable parameters for the given architecture."""
    params = ParameterSet()
    fx = encoded_dim(3, cfg.freqs_x)
    fd = encoded_dim(3, cfg.freqs_d)
    h = cfg.hidden

    in_dim = fx
    for i in range(cfg.n_layers):
        if i > 0 and (i + 1) == cfg.skip_layer:
            in_dim += fx
        params.add(f"cond.w{i}", _dense_init(rng, in_dim, h))
        params.add(f"cond.b{i}", np.zeros(h))
        in_dim = h
    params.add("head_r.w", _dense_init(rng, h + fd, cfg.cond_dim))
    params.add("head_r.b", np.zeros(cfg.cond_dim))
    params.add("head_a.w", _dense_init(rng, h, cfg.cond_dim))
    params.add("head_a.b", np.zeros(cfg.cond_dim))

    if cfg.mode == "cfnerf":
        params.add("prior.mu", np.zeros(D_LATENT))
        # softplus(s) = 1 at init
        params.add("prior.s", np.full(D_LATENT, float(np.log(np.e - 1.0))))
        for branch, d in (("r", D_RGB), ("a", D_ALPHA)):
            m = d  # bottleneck M defaults to the branch dimension
            for k in range(cfg.n_flows):
                names = _flow_param_names(branch, k)
                scale = 0.05 / np.sqrt(cfg.cond_dim)
                params.add(names[0], rng.normal(0.0, scale, size=(cfg.cond_dim, d * m)))
                params.add(names[1], rng.normal(0.0, 0.5, size=(d * m,)))
                params.add(names[2], rng.normal(0.0, scale, size=(cfg.cond_dim, m * d)))
                params.add(names[3], rng.normal(0.0, 0.5, size=(m * d,)))
                params.add(names[4], rng.normal(0.0, scale, size=(cfg.cond_dim, m)))
                params.add(names[5], rng.normal(0.0, 0.3, size=(m,)))
                params.add(names[6], rng.normal(0.0, scale, size=(cfg.cond_dim, m)))
                params.add(names[7], rng.normal(0.0, 0.5, size=(m,)))
    elif cfg.mode == "snerf-baseline":
        for branch, d in (("r", D_RGB), ("a", D_ALPHA)):
            cd = cfg.cond_dim
            params.add(f"gauss.{branch}.w_mu", _dense_init(rng, cd, d))
            params.add(f"gauss.{branch}.b_mu", np.zeros(d))
            params.add(f"gauss.{branch}.w_s", 0.1 * _dense_init(rng, cd, d))
            params.add(f"gauss.{branch}.b_s", np.full(d, -1.0))
    else:
        raise ValueError(f"unknown field mode '{cfg.mode}'")
    return params


# -- conditioner ---------------------------------------------------------------


def conditioner(pv, cfg: FieldConfig, enc_x: np.ndarray, enc_d: np.ndarray):
    """Per-point embeddings (h_r, h_a) from encoded position and direction.

    h_a is a function of the position only; the view direction joins at the
    radiance head, after the trunk.
    """
    feat = enc_x
    for i in range(cfg.n_layers):
        if i > 0 and (i + 1) == cfg.skip_layer:
            feat = dc.concat([feat, enc_x], axis=-1)
        feat = dc.tanh(dc.affine(feat, pv[f"cond.w{i}"], pv[f"cond.b{i}"]))
    h_a = dc.tanh(dc.affine(feat, pv["head_a.w"], pv["head_a.b"]))
    feat_d = dc.concat([feat, enc_d], axis=-1)
    h_r = dc.tanh(dc.affine(feat_d, pv["head_r.w"], pv["head_r.b"]))
    return h_r, h_a


# -- latent prior --------------------------------------------------------------


def prior_moments(pv):
    mu = pv["prior.mu"]
    sigma = dc.softplus(pv["prior.s"])
    return mu, sigma


def prior_sample(params: ParameterSet, count: int, rng: np.random.Generator) -> np.ndarray:
    """K reparameterized draws z = mu + sigma * eps (inference values)."""
    if count < 1:
        raise ValueError("sample count must be >= 1")
    eps = rng.standard_normal(size=(count, D_LATENT))
    pv = params.arrays()
    mu, sigma = prior_moments(pv)
    return mu + sigma * eps


def prior_logpdf(pv, z, lo: int = 0, hi: int = D_LATENT):
    """Diagonal-Gaussian log density over latent dims [lo, hi)."""
    mu, sigma = prior_moments(pv)
    mu = mu[lo:hi]
    sigma = sigma[lo:hi]
    zc = z[..., lo:hi] if isinstance(z, dc.Tensor) else np.asarray(z)[..., lo:hi]
    resid = dc.div(dc.sub(zc, mu), sigma)
    terms = dc.add(dc.log(sigma), dc.mul(dc.square(resid), 0.5))
    return dc.neg(dc.add(dc.tsum(terms, axis=-1), 0.5 * LOG_2PI * (hi - lo)))


def latent_interpolate(z1: np.ndarray, z2: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam * z1 + (1 - lam) * z2."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"interpolation weight {lam} outside [0, 1]")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError("latent shapes differ")
    return lam * z1 + (1.0 - lam) * z2


# -- conditional flow stages ---------------------------------------------------


def _finalize_stage(cfg: FieldConfig, d: int, m: int, a_flat, b_flat, b_vec, s_raw):
    """Apply the gate and norm bound to one stage's raw hypernet outputs."""
    a_raw = dc.reshape(a_flat, (-1, d, m))
    b_raw = dc.reshape(b_flat, (-1, m, d))
    gate = dc.tanh(s_raw)
    a = dc.mul(a_raw, dc.reshape(gate, (-1, 1, m)))
    norm_a = dc.sqrt(dc.tsum(dc.square(a), axis=(-2, -1), keepdims=True))
    norm_b = dc.sqrt(dc.tsum(dc.square(b_raw), axis=(-2, -1), keepdims=True))
    scale = dc.div(cfg.gamma, dc.add(dc.mul(norm_a, norm_b), 1e-8))
    b_mat = dc.mul(b_raw, scale)
    return a, b_mat, b_vec


def flow_branch_params(pv, cfg: FieldConfig, branch: str, h) -> list:
    """Per-stage (A, B, b) for a whole branch.

    Each stage's parameters are affine in the embedding, with the gate and
    norm bound applied so that ||B A||_F <= gamma < 1 per stage.
    """
    d = D_RGB if branch == "r" else D_ALPHA
    m = d
    stages = []
    for k in range(cfg.n_flows):
        names = _flow_param_names(branch, k)
        a_flat = dc.affine(h, pv[names[0]], pv[names[1]])
        b_flat = dc.affine(h, pv[names[2]], pv[names[3]])
        b_vec = dc.affine(h, pv[names[4]], pv[names[5]])
        s_raw = dc.affine(h, pv[names[6]], pv[names[7]])
        stages.append(_finalize_stage(cfg, d, m, a_flat, b_flat, b_vec, s_raw))
    return stages


def flow_stage_params(pv, cfg: FieldConfig, branch: str, k: int, h):
    """Flow parameters (A (P,D,M), B (P,M,D), b (P,M)) for one stage."""
    return flow_branch_params(pv, cfg, branch, h)[k]


def sylvester_step(z, a, b_mat, b_vec, want_logdet: bool = True):
    """One residual stage z' = z + A tanh(B z + b) and its log-determinant.

    z: (..., K, D) against per-point (P, D, M) parameters; leading axes
    broadcast. log|det dz'/dz| = log det(I_M + diag(tanh') B A) per the
    Sylvester identity; the construction guarantees the determinant is
    strictly positive. Without the log-det (the rendering hot path) the
    whole stage runs as one fused op.
    """
    if not want_logdet:
        return dc.residual_tanh_step(z, a, b_mat, b_vec), None
    pre = dc.add(dc.matmul(z, dc.swap_last2(b_mat)), _expand_mid(b_vec))
    t = dc.tanh(pre)
    z_new = dc.add(dc.matmul(t, dc.swap_last2(a)), z)
    psi = dc.sub(1.0, dc.square(t))  # tanh' at the preactivation
    ba = dc.matmul(b_mat, a)  # (P, M, M)
    m = value_of(ba).shape[-1]
    scaled = dc.mul(_expand_last(psi), _expand_mid2(ba))
    jac = dc.add(scaled, np.eye(m))
    return z_new, dc.logdet(jac)


def _expand_mid(b_vec):
    # (P, M) -> (P, 1, M) so it broadcasts over the K axis
    shape = value_of(b_vec).shape
    return dc.reshape(b_vec, (shape[0], 1, shape[1]))


def _expand_last(psi):
    # (..., K, M) -> (..., K, M, 1)
    shape = value_of(psi).shape
    return dc.reshape(psi, shape + (1,))


def _expand_mid2(ba):
    # (P, M, M) -> (P, 1, M, M) so it broadcasts over the K axis
    shape = value_of(ba).shape
    return dc.reshape(ba, (shape[0], 1, shape[1], shape[2]))


def apply_flow_stack(pv, cfg: FieldConfig, branch: str, h, z0, want_logq: bool):
    """Push z0 through all stages; returns (z_K, sum of stage log-dets)."""
    z = z0
    total = None
    for a, b_mat, b_vec in flow_branch_params(pv, cfg, branch, h):
        z, ld = sylvester_step(z, a, b_mat, b_vec, want_logdet=want_logq)
        if want_logq:
            total = ld if total is None else dc.add(total, ld)
    return z, total


def _log_sigmoid_deriv(u):
    # ln sigma'(u) = -softplus(u) - softplus(-u), stable for all u
    return dc.neg(dc.add(dc.softplus(u), dc.softplus(dc.neg(u))))


def _log_softplus_deriv(u):
    # d softplus(u)/du = sigmoid(u); ln sigmoid(u) = -softplus(-u)
    return dc.neg(dc.softplus(dc.neg(u)))


# -- the model ------------------------------------------------------------------


class FieldModel:
    """Parameters plus architecture; decodes latents to radiance/density.

    Immutable during inference: rendering only reads `params.arrays()`.
    Training mutates parameters in place through the optimizer.
    """

    def __init__(self, cfg: FieldConfig, params: ParameterSet):
        self.cfg = cfg
        self.params = params

    @staticmethod
    def create(cfg: FieldConfig, rng: np.random.Generator) -> "FieldModel":
        return FieldModel(cfg, init_field_params(cfg, rng))

    # -- persistence ------------------------------------------------------

    def save(self, checkpoint_path: str | Path) -> None:
        checkpoint_path = Path(checkpoint_path)
        dc.save_checkpoint(checkpoint_path, self.params.arrays())
        sidecar = checkpoint_path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(checkpoint_path: str | Path) -> "FieldModel":
        checkpoint_path = Path(checkpoint_path)
        sidecar = checkpoint_path.with_suffix(".json")
        if not sidecar.exists():
            raise FileNotFoundError(f"missing model sidecar {sidecar}")
        cfg = FieldConfig.from_dict(json.loads(sidecar.read_text()))
        arrays = dc.load_checkpoint(checkpoint_path)
        params = init_field_params(cfg, np.random.default_rng(0))
        params.load_arrays(arrays)
        return FieldModel(cfg, params)

    # -- latent handling ----------------------------------------------------

    def draw_latents(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.mode != "cfnerf":
            raise ValueError("latent draws only exist in cfnerf mode")
        return prior_sample(self.params, count, rng)

    def draw_latent_noise(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Standard-normal eps for reparameterized in-graph latents."""
        return rng.standard_normal(size=(count, D_LATENT))

    def draw_factorized_noise(
        self, n_points: int, count: int, rng: np.random.Generator
    ) -> dict[str, np.ndarray]:
        """Per-point noise for the factorized baseline (independent samples)."""
        return {
            "r": rng.standard_normal(size=(n_points, count, D_RGB)),
            "a": rng.standard_normal(size=(n_points, count, D_ALPHA)),
        }

    # -- decoding -----------------------------------------------------------

    def decode_batch(
        self,
        x: np.ndarray,
        d: np.ndarray,
        latents,
        *,
        graph: bool = False,
        want_logq: bool = False,
    ):
        """Radiance/density samples for P points x K latent samples.

        x: (P, 3) positions; d: (P, 3) unit view directions. `latents` is
        either eps/z of shape (K, Dz) or (P, K, Dz) in cfnerf mode (shared
        vs per-point latents; in graph mode these are standard-normal eps
        reparameterized through the prior), or the dict from
        `draw_factorized_noise` in baseline mode.

        Returns (r, alpha, log_q_r, log_q_alpha) with r (P, K, 3), alpha
        (P, K); the log terms are None unless `want_logq`.
        """
        pv = self.params if graph else self.params.arrays()
        enc_x = positional_encode(x, self.cfg.freqs_x)
        enc_d = positional_encode(d, self.cfg.freqs_d)
        h_r, h_a = conditioner(pv, self.cfg, enc_x, enc_d)
        if self.cfg.mode == "cfnerf":
            return self._decode_flows(pv, h_r, h_a, latents, want_logq)
        return self._decode_factorized(pv, h_r, h_a, latents, want_logq)

    def _decode_flows(self, pv, h_r, h_a, eps, want_logq):
        eps = np.asarray(eps, dtype=np.float64)
        mu, sigma = prior_moments(pv)
        z = dc.add(mu, dc.mul(sigma, eps))  # reparameterized draw
        if eps.ndim == 2:
            k = eps.shape[0]
            z3 = dc.reshape(z, (1, k, D_LATENT))
            lp_shape = (1, k)
        else:
            p, k = eps.shape[0], eps.shape[1]
            z3 = z
            lp_shape = (p, k)
        z_r0 = z3[..., :D_RGB]
        z_a0 = z3[..., D_RGB:]
        zk_r, ld_r = apply_flow_stack(pv, self.cfg, "r", h_r, z_r0, want_logq)
        zk_a, ld_a = apply_flow_stack(pv, self.cfg, "a", h_a, z_a0, want_logq)
        r = dc.sigmoid(zk_r)
        alpha = dc.softplus(zk_a)[..., 0]
        log_q_r = log_q_a = None
        if want_logq:
            lp_r = dc.reshape(prior_logpdf(pv, z, 0, D_RGB), lp_shape)
            lp_a = dc.reshape(prior_logpdf(pv, z, D_RGB, D_LATENT), lp_shape)
            act_r = dc.tsum(_log_sigmoid_deriv(zk_r), axis=-1)
            act_a = _log_softplus_deriv(zk_a)[..., 0]
            log_q_r = dc.sub(lp_r, dc.add(ld_r, act_r))
            log_q_a = dc.sub(lp_a, dc.add(ld_a, act_a))
        return r, alpha, log_q_r, log_q_a

    def _decode_factorized(self, pv, h_r, h_a, noise, want_logq):
        out = {}
        logs = {}
        for branch, h, d_out in (("r", h_r, D_RGB), ("a", h_a, D_ALPHA)):
            mu = dc.add(dc.matmul(h, pv[f"gauss.{branch}.w_mu"]), pv[f"gauss.{branch}.b_mu"])
            sig = dc.softplus(dc.add(dc.matmul(h, pv[f"gauss.{branch}.w_s"]), pv[f"gauss.{branch}.b_s"]))
            # preactivation samples u = mu + sigma * eps, independent per point
            eps = np.asarray(noise[branch], dtype=np.float64)
            p = value_of(mu).shape[0]
            mu3 = dc.reshape(mu, (p, 1, d_out))
            sig3 = dc.reshape(sig, (p, 1, d_out))
            u = dc.add(mu3, dc.mul(sig3, eps))
            out[branch] = u
            if want_logq:
                resid = dc.div(dc.sub(u, mu3), sig3)
                lp = dc.neg(
                    dc.add(
                        dc.tsum(dc.add(dc.log(sig3), dc.mul(dc.square(resid), 0.5)), axis=-1),
                        0.5 * LOG_2PI * d_out,
                    )
                )
                logs[branch] = lp
        u_r, u_a = out["r"], out["a"]
        r = dc.sigmoid(u_r)
        alpha = dc.softplus(u_a)[..., 0]
        log_q_r = log_q_a = None
        if want_logq:
            log_q_r = dc.sub(logs["r"], dc.tsum(_log_sigmoid_deriv(u_r), axis=-1))
            log_q_a = dc.sub(logs["a"], _log_softplus_deriv(u_a)[..., 0])
        return r, alpha, log_q_r, log_q_a

    def eps_from_z(self, z: np.ndarray) -> np.ndarray:
        """Map latent values to the eps that reproduces them under the prior."""
        pv = self.params.arrays()
        mu, sigma = prior_moments(pv)
        return (np.asarray(z, dtype=np.float64) - mu) / sigma

    def decode(self, z: np.ndarray, x: np.ndarray, d: np.ndarray):
        """Single-point decode: (r (3,), alpha, log_q_r, log_q_alpha).

        `z` is a latent value; it is mapped back to eps so the batched
        reparameterized path can be reused verbatim.
        """
        x = np.asarray(x, dtype=np.float64).reshape(1, 3)
        d = np.asarray(d, dtype=np.float64).reshape(1, 3)
        if self.cfg.mode != "cfnerf":
            raise ValueError("single-point decode targets cfnerf mode")
        eps = self.eps_from_z(np.asarray(z, dtype=np.float64).reshape(1, D_LATENT))
        r, alpha, lq_r, lq_a = self.decode_batch(x, d, eps, want_logq=True)
        return r[0, 0], float(alpha[0, 0]), float(lq_r[0, 0]), float(lq_a[0, 0])

    # -- numerical inversion (diagnostics and density evaluation) -----------

    def invert_density_flow(self, h_a: np.ndarray, z_out: np.ndarray, tol: float = 1e-12):
        return invert_flow_stack(self.params.arrays(), self.cfg, "a", h_a, z_out, tol=tol)

    def density_log_q_grid(self, x: np.ndarray, alphas: np.ndarray) -> np.ndarray:
        """log q(alpha | x, .) on a grid of alpha values at one position.

        Evaluates the exact flow density by inverting softplus and the flow
        stack, then re-running forward for the log-determinants. Only valid
        in cfnerf mode.
        """
        pv = self.params.arrays()
        enc_x = positional_encode(np.asarray(x, dtype=np.float64).reshape(1, 3), self.cfg.freqs_x)
        # h_a does not depend on direction; any unit vector works
        enc_d = positional_encode(np.array([[0.0, 0.0, -1.0]]), self.cfg.freqs_d)
        _, h_a = conditioner(pv, self.cfg, enc_x, enc_d)
        alphas = np.asarray(alphas, dtype=np.float64)
        with np.errstate(divide="ignore", over="ignore"):
            small = np.log(np.expm1(np.minimum(alphas, 30.0)))
            large = alphas + np.log1p(-np.exp(-alphas))
        u = np.where(alphas > 30.0, large, small)  # softplus inverse
        z_k = u.reshape(1, -1, 1)
        z0 = invert_flow_stack(pv, self.cfg, "a", h_a, z_k)
        # forward again from z0 to accumulate the stage log-determinants
        _, ld = apply_flow_stack(pv, self.cfg, "a", h_a, z0, want_logq=True)
        mu_a = value_of(prior_moments(pv)[0])[D_RGB]
        sig_a = value_of(prior_moments(pv)[1])[D_RGB]
        lp = -0.5 * LOG_2PI - np.log(sig_a) - 0.5 * ((z0[..., 0] - mu_a) / sig_a) ** 2
        log_sig = -np.logaddexp(0.0, -u)  # ln softplus'(u)
        return (lp - ld)[0] - log_sig


def invert_flow_stack(pv, cfg: FieldConfig, branch: str, h, z_out, tol: float = 1e-12):
    """Newton inversion of the full flow stack (numpy mode only).

    Solves z + A tanh(B z + b) = z_target stage by stage, last stage first.
    The Jacobian I + A diag(tanh') B is nonsingular by construction, so the
    iteration converges for every reachable output.
    """
    z = np.asarray(value_of(z_out), dtype=np.float64).copy()
    stage_params = [
        (value_of(a), value_of(b_mat), value_of(b_vec))
        for a, b_mat, b_vec in flow_branch_params(pv, cfg, branch, h)
    ]
    for a, b_mat, b_vec in reversed(stage_params):
        target = z.copy()
        cur = target.copy()
        bt = np.swapaxes(b_mat, -1, -2)
        at = np.swapaxes(a, -1, -2)
        for _ in range(100):
            t = np.tanh(cur @ bt + b_vec[:, None, :])
            resid = cur + t @ at - target
            if np.max(np.abs(resid)) < tol:
                break
            psi = 1.0 - t * t  # (P, K, M)
            jac = np.eye(cur.shape[-1]) + np.einsum(
                "pdm,pkm,pme->pkde", a, psi, b_mat
            )
            cur = cur - np.linalg.solve(jac, resid[..., None])[..., 0]
        z = cur
    return z

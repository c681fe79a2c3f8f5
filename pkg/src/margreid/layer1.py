"""Marginalized invariant feature layer.

Two linear autoencoders, one per camera view, trained alternately on kernel
responses of matched stripe pairs. Each side minimizes its reconstruction
error plus the squared distance between the two latent codes (the invariance
term), with the counterpart's codes frozen during its block.

Instead of training on explicitly noise-corrupted copies, the expected loss
under additive per-dimension Gaussian corruption is approximated in closed
form: a second-order expansion turns the corruption into weight penalties

    invariance part      sigma_d^2 * sum_h w_enc[h,d]^2          (exact)
    reconstruction part  sigma_d^2 * sum_h (sum_d' w_dec[d',h]^2) * w_enc[h,d]^2

summed over d, which is the Gauss-Newton (dropped-curvature) form of the
Hessian diagonal; for these linear maps the dropped term is identically zero
on the invariance side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rngs
from .container import load_tensors, save_tensors
from .numerics import LbfgsConfig, lbfgs_minimize


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class EncoderParams:
    w_enc: np.ndarray  # (D_h, D)
    b_enc: np.ndarray  # (D_h,)
    w_dec: np.ndarray  # (D, D_h)
    b_dec: np.ndarray  # (D,)

    def __post_init__(self) -> None:
        dh, d = self.w_enc.shape
        if self.b_enc.shape != (dh,) or self.w_dec.shape != (d, dh) or self.b_dec.shape != (d,):
            raise ValueError("inconsistent encoder/decoder shapes")
        for name in ("w_enc", "b_enc", "w_dec", "b_dec"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def d_in(self) -> int:
        return self.w_enc.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.w_enc.shape[0]


@dataclass
class CorruptionSpec:
    """Per-dimension variances of the additive Gaussian corruption."""

    sigma: np.ndarray  # (D,) standard deviations, >= 0

    def __post_init__(self) -> None:
        self.sigma = np.asarray(self.sigma, dtype=float)
        if np.any(self.sigma < 0):
            raise ValueError("corruption sigmas must be nonnegative")

    @classmethod
    def constant(cls, sigma_d: float, dim: int) -> "CorruptionSpec":
        return cls(sigma=np.full(dim, float(sigma_d)))


@dataclass
class Layer1Config:
    d_h: int = 800
    lam: float = 1e-7
    sigma_d: float = 0.1
    kappa: int = 50
    max_iter: int = 300
    enable_invariance: bool = True
    enable_marginalization: bool = True

    def __post_init__(self) -> None:
        if self.d_h <= 0:
            raise ValueError("d_h must be positive")
        if self.lam < 0 or self.sigma_d < 0:
            raise ValueError("lam and sigma_d must be nonnegative")
        if not (0 < self.kappa <= self.max_iter) and self.max_iter > 0:
            raise ValueError("need 0 < kappa <= max_iter")


@dataclass
class PairBatch:
    """Kernel responses of matched stripe pairs, row i of each side aligned."""

    phi: np.ndarray  # (n, D) probe side
    psi: np.ndarray  # (n, D) gallery side

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=float)
        self.psi = np.asarray(self.psi, dtype=float)
        if self.phi.shape != self.psi.shape or self.phi.ndim != 2 or self.phi.shape[0] == 0:
            raise ValueError("matched pair batch must be two equal nonempty (n, D) arrays")


def encode(p: EncoderParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != encoder dim {p.d_in}")
    return x @ p.w_enc.T + p.b_enc


def decode(p: EncoderParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != p.d_hidden:
        raise ValueError(f"latent dim {z.shape[-1]} != decoder dim {p.d_hidden}")
    return z @ p.w_dec.T + p.b_dec


def pair_loss(pp: EncoderParams, pg: EncoderParams, phi: np.ndarray, psi: np.ndarray, include_invariance: bool = True) -> float:
    """Reconstruction error on both sides plus the latent invariance distance."""
    z_p = encode(pp, phi)
    z_g = encode(pg, psi)
    r_p = phi - decode(pp, z_p)
    r_g = psi - decode(pg, z_g)
    loss = float(r_p @ r_p) + float(r_g @ r_g)
    if include_invariance:
        e = z_p - z_g
        loss += float(e @ e)
    return loss


def _invariance_penalty(w_enc: np.ndarray, sigma2: np.ndarray) -> float:
    return float(sigma2 @ (w_enc**2).sum(axis=0))


def _reconstruction_penalty(w_enc: np.ndarray, w_dec: np.ndarray, sigma2: np.ndarray) -> float:
    col = (w_dec**2).sum(axis=0)  # (D_h,)
    return float(sigma2 @ (col @ (w_enc**2)))


def marginal_penalty_probe(pp: EncoderParams, spec: CorruptionSpec) -> float:
    """Closed-form corruption penalty for the probe network (both parts)."""
    sigma2 = spec.sigma**2
    return _invariance_penalty(pp.w_enc, sigma2) + _reconstruction_penalty(pp.w_enc, pp.w_dec, sigma2)


def marginal_penalty_gallery(pg: EncoderParams, spec: CorruptionSpec) -> float:
    """Same penalty evaluated on the gallery network's weights."""
    return marginal_penalty_probe(pg, spec)


def _objective_one_side(p: EncoderParams, x: np.ndarray, z_other: np.ndarray, cfg: Layer1Config, what: str) -> tuple[float, EncoderParams]:
    """Value and exact gradient of one side's objective, counterpart frozen.

    mean_i [ ||x_i - dec(enc(x_i))||^2 (+ ||enc(x_i) - z_other_i||^2) ]
      (+ marginalization penalties) + lam * (||w_enc||_F^2 + ||w_dec||_F^2)
    """
    n = x.shape[0]
    z = x @ p.w_enc.T + p.b_enc
    r = x - (z @ p.w_dec.T + p.b_dec)
    value = float((r * r).sum()) / n
    g_z = (-2.0 / n) * (r @ p.w_dec)
    if cfg.enable_invariance:
        e = z - z_other
        value += float((e * e).sum()) / n
        g_z += (2.0 / n) * e
    gw1 = g_z.T @ x
    gb1 = g_z.sum(axis=0)
    gw2 = (-2.0 / n) * (r.T @ z)
    gb2 = (-2.0 / n) * r.sum(axis=0)
    if cfg.enable_marginalization and cfg.sigma_d > 0:
        sigma2 = np.full(p.d_in, cfg.sigma_d**2)
        if cfg.enable_invariance:
            value += _invariance_penalty(p.w_enc, sigma2)
            gw1 += 2.0 * p.w_enc * sigma2[None, :]
        value += _reconstruction_penalty(p.w_enc, p.w_dec, sigma2)
        col = (p.w_dec**2).sum(axis=0)  # (D_h,)
        gw1 += 2.0 * (col[:, None] * p.w_enc) * sigma2[None, :]
        s1 = (p.w_enc**2) @ sigma2  # (D_h,)
        gw2 += 2.0 * p.w_dec * s1[None, :]
    if cfg.lam > 0:
        value += cfg.lam * (float((p.w_enc**2).sum()) + float((p.w_dec**2).sum()))
        gw1 += 2.0 * cfg.lam * p.w_enc
        gw2 += 2.0 * cfg.lam * p.w_dec
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} objective became non-finite")
    return value, EncoderParams(w_enc=gw1, b_enc=gb1, w_dec=gw2, b_dec=gb2)


def objective_probe(pp: EncoderParams, pg: EncoderParams, batch: PairBatch, cfg: Layer1Config) -> tuple[float, EncoderParams]:
    """Probe-side objective and gradient, gallery network frozen."""
    z_other = encode(pg, batch.psi)
    return _objective_one_side(pp, batch.phi, z_other, cfg, "probe")


def objective_gallery(pg: EncoderParams, pp: EncoderParams, batch: PairBatch, cfg: Layer1Config) -> tuple[float, EncoderParams]:
    """Gallery-side objective and gradient, probe network frozen."""
    z_other = encode(pp, batch.phi)
    return _objective_one_side(pg, batch.psi, z_other, cfg, "gallery")


def pack_params(p: EncoderParams) -> np.ndarray:
    return np.concatenate([p.w_enc.ravel(), p.b_enc, p.w_dec.ravel(), p.b_dec])


def unpack_params(vec: np.ndarray, d: int, d_h: int) -> EncoderParams:
    n1 = d_h * d
    w_enc = vec[:n1].reshape(d_h, d)
    b_enc = vec[n1 : n1 + d_h]
    w_dec = vec[n1 + d_h : n1 + d_h + d * d_h].reshape(d, d_h)
    b_dec = vec[n1 + d_h + d * d_h :]
    return EncoderParams(w_enc=w_enc.copy(), b_enc=b_enc.copy(), w_dec=w_dec.copy(), b_dec=b_dec.copy())


def init_params(d: int, d_h: int, rng: np.random.Generator) -> EncoderParams:
    bound = np.sqrt(6.0 / (d + d_h))
    return EncoderParams(
        w_enc=rng.uniform(-bound, bound, size=(d_h, d)),
        b_enc=np.zeros(d_h),
        w_dec=rng.uniform(-bound, bound, size=(d, d_h)),
        b_dec=np.zeros(d),
    )


def train_alternating(
    batch: PairBatch,
    cfg: Layer1Config,
    seed: int = 0,
    history: list | None = None,
) -> tuple[EncoderParams, EncoderParams]:
    """Alternating block training of the probe and gallery networks.

    Each alternation round runs kappa accepted L-BFGS iterations on the probe
    objective with the gallery frozen, then the same on the gallery side,
    until each network has consumed its max_iter budget. `history` (optional
    list) collects (network, round, value) rows from the accepted-step traces.
    """
    d = batch.phi.shape[1]
    pp = init_params(d, cfg.d_h, rngs.stream(seed, "layer1.init.probe"))
    pg = init_params(d, cfg.d_h, rngs.stream(seed, "layer1.init.gallery"))
    remaining = cfg.max_iter
    round_no = 0
    while remaining > 0:
        block = min(cfg.kappa, remaining)
        lcfg = LbfgsConfig(max_iter=block)
        z_psi = encode(pg, batch.psi)  # constant inside the probe block

        def f_probe(vec: np.ndarray) -> tuple[float, np.ndarray]:
            p = unpack_params(vec, d, cfg.d_h)
            val, grad = _objective_one_side(p, batch.phi, z_psi, cfg, "probe")
            return val, pack_params(grad)

        res = lbfgs_minimize(f_probe, pack_params(pp), lcfg)
        pp = unpack_params(res.x, d, cfg.d_h)
        if history is not None:
            history.extend(("probe", round_no, v) for v in res.trace)

        z_phi = encode(pp, batch.phi)

        def f_gallery(vec: np.ndarray) -> tuple[float, np.ndarray]:
            p = unpack_params(vec, d, cfg.d_h)
            val, grad = _objective_one_side(p, batch.psi, z_phi, cfg, "gallery")
            return val, pack_params(grad)

        res = lbfgs_minimize(f_gallery, pack_params(pg), lcfg)
        pg = unpack_params(res.x, d, cfg.d_h)
        if history is not None:
            history.extend(("gallery", round_no, v) for v in res.trace)

        remaining -= block
        round_no += 1
    return pp, pg


def save_encoder(path, p: EncoderParams) -> None:
    save_tensors(path, [p.w_enc, p.b_enc, p.w_dec, p.b_dec])


def load_encoder(path) -> EncoderParams:
    w_enc, b_enc, w_dec, b_dec = load_tensors(path)
    return EncoderParams(w_enc=w_enc, b_enc=b_enc, w_dec=w_dec, b_dec=b_dec)

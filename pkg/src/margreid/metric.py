"""Marginalized second-order metric over global image representations.

The decision function on a probe/gallery representation pair is

    f(k, k') = 0.5 k^T A k + 0.5 k'^T A k' + k^T B k' + c^T (k + k') + b

with A positive semidefinite and B negative semidefinite, kept so by
construction through the factorization A = M M^T, B = -N N^T. Training
minimizes the logistic loss log(1 + exp(y f)) with y = +1 for matched pairs
and y = -1 for mismatched ones, so smaller f means more similar and f ranks
galleries in ascending order.

Gaussian corruption of the probe representation is marginalized through the
exact per-dimension second derivative of the loss:

    d2 l / dk_d^2 = g''(y f) (df/dk_d)^2 + y g'(y f) A_dd,
    df/dk = A k + B k' + c,

giving the penalty 0.5 sigma^2 sum_d d2l/dk_d^2 added per pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rngs
from .container import load_tensors, save_tensors
from .numerics import LbfgsConfig, lbfgs_minimize


class MetricTrainingError(ValueError):
    pass


@dataclass
class MetricParams:
    m: np.ndarray  # (D_ml, r_A)
    n: np.ndarray  # (D_ml, r_B)
    bias: float = 0.0
    c: np.ndarray | None = None  # optional linear term, zero when None

    def __post_init__(self) -> None:
        if self.m.ndim != 2 or self.n.ndim != 2 or self.m.shape[0] != self.n.shape[0]:
            raise ValueError("factor matrices must share the representation dimension")
        if self.c is not None and self.c.shape != (self.m.shape[0],):
            raise ValueError("linear term has wrong dimension")

    @property
    def dim(self) -> int:
        return self.m.shape[0]

    def a_matrix(self) -> np.ndarray:
        return self.m @ self.m.T

    def b_matrix(self) -> np.ndarray:
        return -(self.n @ self.n.T)

    def c_vector(self) -> np.ndarray:
        return np.zeros(self.dim) if self.c is None else self.c


@dataclass
class MetricConfig:
    d_ml: int = 400
    sigma_k: float = 0.01
    lambda_a: float = 1e-8
    lambda_b: float = 1e-7
    rank_a: int | None = None  # defaults to d_ml (full rank)
    rank_b: int | None = None
    rho: int = 10
    max_iter: int = 300
    enable_marginalization: bool = True
    corrupt_both: bool = False

    def __post_init__(self) -> None:
        if self.d_ml <= 0 or self.rho <= 0 or self.max_iter < 0:
            raise ValueError("d_ml and rho must be positive, max_iter nonnegative")
        if self.sigma_k < 0 or self.lambda_a < 0 or self.lambda_b < 0:
            raise ValueError("sigma_k and the Frobenius penalties must be nonnegative")
        if self.rank_a is None:
            self.rank_a = self.d_ml
        if self.rank_b is None:
            self.rank_b = self.d_ml


@dataclass
class LabeledPairs:
    """Row-aligned representation pairs with +/-1 same/different labels."""

    k: np.ndarray   # (n, D_ml) probe side
    kp: np.ndarray  # (n, D_ml) gallery side
    y: np.ndarray   # (n,) in {+1, -1}

    def __post_init__(self) -> None:
        self.k = np.asarray(self.k, dtype=float)
        self.kp = np.asarray(self.kp, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.k.shape != self.kp.shape or self.k.ndim != 2 or self.k.shape[0] == 0:
            raise ValueError("need nonempty matching (n, D) pair arrays")
        if self.y.shape != (self.k.shape[0],) or not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ValueError("labels must be +1 (same) or -1 (different), one per pair")


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def decision_f(p: MetricParams, k: np.ndarray, kp: np.ndarray) -> float:
    k = np.asarray(k, dtype=float)
    kp = np.asarray(kp, dtype=float)
    if k.shape != (p.dim,) or kp.shape != (p.dim,):
        raise ValueError("representation dimension mismatch")
    mk = k @ p.m
    mkp = kp @ p.m
    nk = k @ p.n
    nkp = kp @ p.n
    f = 0.5 * float(mk @ mk) + 0.5 * float(mkp @ mkp) - float(nk @ nkp) + p.bias
    if p.c is not None:
        f += float(p.c @ (k + kp))
    return f


def dissimilarity(p: MetricParams, k: np.ndarray, kp: np.ndarray) -> float:
    """Ranking score: identical to decision_f, smaller means more similar."""
    return decision_f(p, k, kp)


def score_matrix(p: MetricParams, probes: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Dissimilarities for every probe/gallery combination, shape (n_p, n_g)."""
    probes = np.asarray(probes, dtype=float)
    gallery = np.asarray(gallery, dtype=float)
    qa = 0.5 * ((probes @ p.m) ** 2).sum(axis=1)
    ga = 0.5 * ((gallery @ p.m) ** 2).sum(axis=1)
    cross = -(probes @ p.n) @ (gallery @ p.n).T
    out = qa[:, None] + ga[None, :] + cross + p.bias
    if p.c is not None:
        out = out + (probes @ p.c)[:, None] + (gallery @ p.c)[None, :]
    return out


def pair_loss(p: MetricParams, k: np.ndarray, kp: np.ndarray, y: int) -> float:
    """log(1 + exp(y * f)) via the overflow-safe softplus identity."""
    if y not in (1, -1):
        raise ValueError("label must be +1 or -1")
    return float(_softplus(np.asarray(y * decision_f(p, k, kp))))


def marginal_penalty_metric(p: MetricParams, k: np.ndarray, kp: np.ndarray, y: int, sigma_k: float) -> float:
    """0.5 sigma^2 * trace of the probe-side Hessian of the pair loss."""
    if sigma_k == 0.0:
        return 0.0
    a = p.a_matrix()
    v = a @ k + p.b_matrix() @ kp + p.c_vector()
    t = y * decision_f(p, k, kp)
    s = float(_sigmoid(np.asarray(t)))
    g2 = s * (1.0 - s)
    return 0.5 * sigma_k**2 * (g2 * float(v @ v) + y * s * float(np.trace(a)))


def _pack(m: np.ndarray, n: np.ndarray, bias: float) -> np.ndarray:
    return np.concatenate([m.ravel(), n.ravel(), [bias]])


def _unpack(vec: np.ndarray, d: int, ra: int, rb: int) -> tuple[np.ndarray, np.ndarray, float]:
    m = vec[: d * ra].reshape(d, ra)
    n = vec[d * ra : d * ra + d * rb].reshape(d, rb)
    return m, n, float(vec[-1])


def metric_objective(p: MetricParams, pairs: LabeledPairs, cfg: MetricConfig) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Mean marginalized pair loss plus Frobenius penalties; exact gradients.

    Returns (value, grad_m, grad_n, grad_bias). Gradients flow through the
    factorizations: for any matrix function h(A), dh/dM = (G + G^T) M with
    G = dh/dA taken entrywise, and equivalently for B = -N N^T.
    """
    k, kp, y = pairs.k, pairs.kp, pairs.y
    n_pairs, d = k.shape
    a = p.m @ p.m.T
    b = -(p.n @ p.n.T)
    c = p.c_vector()
    ka = k @ a
    kpa = kp @ a
    f = 0.5 * (k * ka).sum(axis=1) + 0.5 * (kp * kpa).sum(axis=1) + ((k @ b) * kp).sum(axis=1) + p.bias
    if p.c is not None:
        f = f + (k + kp) @ c
    t = y * f
    s = _sigmoid(t)
    value = float(_softplus(t).mean())
    g2 = s * (1.0 - s)

    use_marg = cfg.enable_marginalization and cfg.sigma_k > 0
    sides = [(k, kp, ka)]
    if use_marg and cfg.corrupt_both:
        sides.append((kp, k, kpa))

    w1 = y * s  # multiplier of df/dtheta per pair
    tr_a = float(np.trace(a))
    g_a = np.zeros((d, d))
    g_b = np.zeros((d, d))
    if use_marg:
        g3 = g2 * (1.0 - 2.0 * s)
        half_s2 = 0.5 * cfg.sigma_k**2
        for own, other, own_a in sides:
            v = own_a + other @ b + c  # rows: df/dk for the corrupted side
            vsq = (v * v).sum(axis=1)
            value += float((half_s2 * (g2 * vsq + y * s * tr_a)).mean())
            w1 = w1 + half_s2 * (y * g3 * vsq + g2 * tr_a)
            g_a += (cfg.sigma_k**2 / n_pairs) * (v * g2[:, None]).T @ own
            g_a += (half_s2 * float((y * s).mean())) * np.eye(d)
            g_b += (cfg.sigma_k**2 / n_pairs) * (v * g2[:, None]).T @ other
    w1 = w1 / n_pairs
    g_a += 0.5 * (k.T @ (w1[:, None] * k) + kp.T @ (w1[:, None] * kp))
    g_b += k.T @ (w1[:, None] * kp)
    grad_bias = float(w1.sum())

    value += cfg.lambda_a * float((a * a).sum()) + cfg.lambda_b * float((b * b).sum())
    g_a += 2.0 * cfg.lambda_a * a
    g_b += 2.0 * cfg.lambda_b * b

    grad_m = (g_a + g_a.T) @ p.m
    grad_n = -(g_b + g_b.T) @ p.n
    if not math.isfinite(value):
        raise MetricTrainingError("metric objective became non-finite")
    return value, grad_m, grad_n, grad_bias


def init_metric_params(d: int, rank_a: int, rank_b: int, rng: np.random.Generator) -> MetricParams:
    scale = 1.0 / np.sqrt(d)
    return MetricParams(m=scale * rng.normal(size=(d, rank_a)), n=scale * rng.normal(size=(d, rank_b)), bias=0.0)


def train_metric(
    pairs: LabeledPairs,
    cfg: MetricConfig,
    seed: int = 0,
    iterate_callback=None,
    history: list | None = None,
) -> MetricParams:
    """L-BFGS over the flattened (M, N, bias); PSD/NSD holds at every iterate
    because only the factors are ever updated."""
    if not (np.any(pairs.y > 0) and np.any(pairs.y < 0)):
        raise MetricTrainingError("need at least one positive and one negative pair")
    d = pairs.k.shape[1]
    if d != cfg.d_ml:
        raise MetricTrainingError(f"pair dimension {d} != configured d_ml {cfg.d_ml}")
    p0 = init_metric_params(d, cfg.rank_a, cfg.rank_b, rngs.stream(seed, "metric.init"))

    def f(vec: np.ndarray) -> tuple[float, np.ndarray]:
        m, n, bias = _unpack(vec, d, cfg.rank_a, cfg.rank_b)
        val, gm, gn, gb = metric_objective(MetricParams(m=m, n=n, bias=bias), LabeledPairs(pairs.k, pairs.kp, pairs.y), cfg)
        return val, _pack(gm, gn, gb)

    callback = None
    if iterate_callback is not None:
        def callback(vec: np.ndarray) -> None:
            m, n, bias = _unpack(vec, d, cfg.rank_a, cfg.rank_b)
            iterate_callback(MetricParams(m=m.copy(), n=n.copy(), bias=bias))

    res = lbfgs_minimize(f, _pack(p0.m, p0.n, p0.bias), LbfgsConfig(max_iter=cfg.max_iter), callback=callback)
    if history is not None:
        history.extend(res.trace)
    m, n, bias = _unpack(res.x, d, cfg.rank_a, cfg.rank_b)
    return MetricParams(m=m, n=n, bias=bias)


def sample_pairs(reps_probe: np.ndarray, reps_gallery: np.ndarray, rho: int, rng: np.random.Generator) -> LabeledPairs:
    """One positive pair per identity plus rho sampled negatives each.

    Row i of both representation arrays must belong to the same identity.
    Negatives pair probe i with rho distinct gallery rows j != i, sampled
    uniformly without replacement.
    """
    n = reps_probe.shape[0]
    if n != reps_gallery.shape[0] or n < 2:
        raise MetricTrainingError("need aligned representations for at least 2 identities")
    ks = [reps_probe]
    kps = [reps_gallery]
    ys = [np.ones(n)]
    take = min(rho, n - 1)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        j = rng.choice(others, size=take, replace=False)
        ks.append(np.tile(reps_probe[i], (take, 1)))
        kps.append(reps_gallery[j])
        ys.append(-np.ones(take))
    return LabeledPairs(k=np.vstack(ks), kp=np.vstack(kps), y=np.concatenate(ys))


def save_metric(path, p: MetricParams) -> None:
    save_tensors(path, [p.m, p.n, np.array([p.bias]), p.c_vector()])


def load_metric(path) -> MetricParams:
    m, n, bias, c = load_tensors(path)
    c_opt = None if not np.any(c) else c
    return MetricParams(m=m, n=n, bias=float(bias[0]), c=c_opt)

"""Self-verification suites: gradient checks, curvature checks, Monte-Carlo
marginalization, and the CMC brute-force oracle.

Each check returns its worst observed relative error together with the
tolerance it must meet; the CLI `verify` command renders one line per check
and exits nonzero when any of them fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layer1, metric
from .evaluation import ScoreMatrix, cmc
from .layer1 import CorruptionSpec, EncoderParams, Layer1Config, PairBatch
from .metric import LabeledPairs, MetricConfig, MetricParams
from .numerics import finite_diff_grad, finite_diff_hess_diag, grad_rel_err


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _random_encoder(rng, d, d_h, scale=0.5) -> EncoderParams:
    return EncoderParams(
        w_enc=scale * rng.normal(size=(d_h, d)),
        b_enc=scale * rng.normal(size=d_h),
        w_dec=scale * rng.normal(size=(d, d_h)),
        b_dec=scale * rng.normal(size=d),
    )


def _random_metric(rng, d, ra, rb) -> MetricParams:
    return MetricParams(m=rng.normal(size=(d, ra)), n=rng.normal(size=(d, rb)), bias=float(rng.normal()))


def check_layer1_gradients(n_instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"probe": 0.0, "gallery": 0.0}
    n, d, d_h = 5, 6, 4
    for trial in range(n_instances):
        batch = PairBatch(phi=rng.random((n, d)), psi=rng.random((n, d)))
        own = _random_encoder(rng, d, d_h)
        other = _random_encoder(rng, d, d_h)
        cfg = Layer1Config(
            d_h=d_h,
            lam=10.0 ** rng.uniform(-7, -2),
            sigma_d=rng.uniform(0.0, 0.3),
            kappa=1,
            max_iter=1,
            enable_invariance=bool(trial % 3),
            enable_marginalization=bool(trial % 2),
        )
        for side, objective in (("probe", layer1.objective_probe), ("gallery", layer1.objective_gallery)):
            _, grad = objective(own, other, batch, cfg)

            def scalar(vec):
                return objective(layer1.unpack_params(vec, d, d_h), other, batch, cfg)[0]

            fd = finite_diff_grad(scalar, layer1.pack_params(own))
            worst[side] = max(worst[side], grad_rel_err(layer1.pack_params(grad), fd))
    return [
        CheckResult("gradient/layer1-probe", worst["probe"], 1e-5),
        CheckResult("gradient/layer1-gallery", worst["gallery"], 1e-5),
    ]


def check_metric_gradient(n_instances: int = 20, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    d, ra, rb, n = 5, 2, 2, 6
    for trial in range(n_instances):
        pairs = LabeledPairs(k=rng.normal(size=(n, d)), kp=rng.normal(size=(n, d)), y=rng.choice([-1.0, 1.0], size=n))
        cfg = MetricConfig(
            d_ml=d,
            sigma_k=rng.uniform(0.0, 0.4),
            lambda_a=10.0 ** rng.uniform(-8, -3),
            lambda_b=10.0 ** rng.uniform(-8, -3),
            rank_a=ra,
            rank_b=rb,
            enable_marginalization=bool(trial % 2),
            corrupt_both=bool(trial % 4 == 0),
        )
        p = _random_metric(rng, d, ra, rb)
        _, gm, gn, gb = metric.metric_objective(p, pairs, cfg)

        def scalar(vec):
            m, nn, b = metric._unpack(vec, d, ra, rb)
            return metric.metric_objective(MetricParams(m=m, n=nn, bias=b), pairs, cfg)[0]

        fd = finite_diff_grad(scalar, metric._pack(p.m, p.n, p.bias))
        worst = max(worst, grad_rel_err(metric._pack(gm, gn, gb), fd))
    return CheckResult("gradient/metric", worst, 1e-5)


def check_invariance_hessian(n_instances: int = 10, seed: int = 2) -> list[CheckResult]:
    """FD second derivative of the invariance loss vs 2*sum_h w_enc^2."""
    rng = np.random.default_rng(seed)
    worst = {"probe": 0.0, "gallery": 0.0}
    d, d_h = 5, 3
    for _ in range(n_instances):
        pp = _random_encoder(rng, d, d_h)
        pg = _random_encoder(rng, d, d_h)
        phi, psi = rng.normal(size=d), rng.normal(size=d)
        z_g = layer1.encode(pg, psi)
        z_p = layer1.encode(pp, phi)

        def l_inv_probe(v):
            e = layer1.encode(pp, v) - z_g
            return float(e @ e)

        def l_inv_gallery(v):
            e = z_p - layer1.encode(pg, v)
            return float(e @ e)

        for side, fn, params in (("probe", l_inv_probe, pp), ("gallery", l_inv_gallery, pg)):
            fd = finite_diff_hess_diag(fn, phi if side == "probe" else psi, h=1e-3)
            expected = 2.0 * (params.w_enc**2).sum(axis=0)
            worst[side] = max(worst[side], grad_rel_err(expected, fd))
    return [
        CheckResult("hessian/invariance-probe", worst["probe"], 1e-4),
        CheckResult("hessian/invariance-gallery", worst["gallery"], 1e-4),
    ]


def check_reconstruction_penalty(n_instances: int = 10, seed: int = 3) -> CheckResult:
    """Penalty vs the semi-analytic curvature-through-the-latent oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    d, d_h = 5, 3
    for _ in range(n_instances):
        p = _random_encoder(rng, d, d_h)
        phi = rng.normal(size=d)
        sigma = rng.uniform(0.05, 0.5)
        z0 = layer1.encode(p, phi)

        def l_of_z(z):
            r = phi - layer1.decode(p, z)
            return float(r @ r)

        hess_z = finite_diff_hess_diag(l_of_z, z0, h=1e-3)
        h = 1e-6
        jac = np.zeros((d_h, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            jac[:, k] = (layer1.encode(p, phi + e) - layer1.encode(p, phi - e)) / (2 * h)
        oracle = 0.5 * sigma**2 * float((hess_z[:, None] * jac**2).sum())
        got = layer1._reconstruction_penalty(p.w_enc, p.w_dec, np.full(d, sigma**2))
        worst = max(worst, abs(got - oracle) / max(abs(got), abs(oracle), 1e-12))
    return CheckResult("hessian/layer1-reconstruction", worst, 1e-6)


def check_metric_hessian(n_instances: int = 15, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    d = 4
    for _ in range(n_instances):
        p = _random_metric(rng, d, d, d)
        k, kp = rng.normal(size=d), rng.normal(size=d)
        y = int(rng.choice([-1, 1]))
        sigma = 0.3
        pen = metric.marginal_penalty_metric(p, k, kp, y, sigma)
        fd = finite_diff_hess_diag(lambda v: metric.pair_loss(p, v, kp, y), k, h=1e-3)
        oracle = 0.5 * sigma**2 * float(fd.sum())
        worst = max(worst, abs(pen - oracle) / max(abs(pen), abs(oracle), 1e-12))
    return CheckResult("hessian/metric", worst, 1e-4)


def check_sigma_zero_collapse(n_instances: int = 50, seed: int = 5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_l1, worst_ml = 0.0, 0.0
    for _ in range(n_instances):
        n, d, d_h = 4, 5, 3
        batch = PairBatch(phi=rng.random((n, d)), psi=rng.random((n, d)))
        pp = _random_encoder(rng, d, d_h)
        pg = _random_encoder(rng, d, d_h)
        on = Layer1Config(d_h=d_h, sigma_d=0.0, kappa=1, max_iter=1)
        off = Layer1Config(d_h=d_h, sigma_d=rng.uniform(0.01, 0.3), kappa=1, max_iter=1, enable_marginalization=False)
        v_on, _ = layer1.objective_probe(pp, pg, batch, on)
        v_off, _ = layer1.objective_probe(pp, pg, batch, off)
        worst_l1 = max(worst_l1, abs(v_on - v_off) / max(abs(v_on), 1e-12))

        pairs = LabeledPairs(k=rng.normal(size=(n, d)), kp=rng.normal(size=(n, d)), y=rng.choice([-1.0, 1.0], size=n))
        p = _random_metric(rng, d, d, d)
        m_on, *_ = metric.metric_objective(p, pairs, MetricConfig(d_ml=d, sigma_k=0.0))
        m_off, *_ = metric.metric_objective(p, pairs, MetricConfig(d_ml=d, sigma_k=0.1, enable_marginalization=False))
        worst_ml = max(worst_ml, abs(m_on - m_off) / max(abs(m_on), 1e-12))
    return [
        CheckResult("collapse/layer1-sigma-zero", worst_l1, 1e-12),
        CheckResult("collapse/metric-sigma-zero", worst_ml, 1e-12),
    ]


def check_monte_carlo_expectation(seed: int = 6, n_draws: int = 1_000_000) -> CheckResult:
    """E[invariance loss under corruption] vs the closed form, within 3 SE.

    Reported value is |mc - exact| / (3 * SE) so the shared pass rule
    (value <= tolerance = 1) applies.
    """
    rng = np.random.default_rng(seed)
    d, d_h = 8, 5
    pp = _random_encoder(rng, d, d_h)
    pg = _random_encoder(rng, d, d_h)
    phi, psi = rng.random(d), rng.random(d)
    sigma = 0.1
    z_g = layer1.encode(pg, psi)
    e0 = layer1.encode(pp, phi) - z_g
    exact = float(e0 @ e0) + sigma**2 * float((pp.w_enc**2).sum())
    eps = rng.normal(scale=sigma, size=(n_draws, d))
    z = (phi + eps) @ pp.w_enc.T + pp.b_enc
    vals = ((z - z_g) ** 2).sum(axis=1)
    mc = float(vals.mean())
    se = float(vals.std(ddof=1)) / np.sqrt(n_draws)
    return CheckResult("marginalization/monte-carlo", abs(mc - exact) / (3.0 * se), 1.0)


def check_cmc_oracle(n_matrices: int = 100, seed: int = 7) -> CheckResult:
    """cmc() against exhaustive (score, index) sorting, exact equality."""
    rng = np.random.default_rng(seed)
    ids = [f"id{i}" for i in range(10)]
    worst = 0.0
    for trial in range(n_matrices):
        scores = rng.random((10, 10))
        if trial % 3 == 0:
            scores = np.round(scores * 4) / 4  # force ties
        s = ScoreMatrix(scores=scores, probe_ids=ids, gallery_ids=ids)
        ranks = []
        for i in range(10):
            order = sorted(range(10), key=lambda j: (scores[i, j], j))
            ranks.append(order.index(i) + 1)
        expected = np.array([(np.array(ranks) <= r).mean() for r in range(1, 11)])
        worst = max(worst, float(np.max(np.abs(cmc(s).rates - expected))))
    return CheckResult("cmc/brute-force-oracle", worst, 0.0)


def run_all_checks(seed: int = 0) -> list[CheckResult]:
    results: list[CheckResult] = []
    results.extend(check_layer1_gradients(seed=seed))
    results.append(check_metric_gradient(seed=seed + 1))
    results.extend(check_invariance_hessian(seed=seed + 2))
    results.append(check_reconstruction_penalty(seed=seed + 3))
    results.append(check_metric_hessian(seed=seed + 4))
    results.extend(check_sigma_zero_collapse(seed=seed + 5))
    results.append(check_monte_carlo_expectation(seed=seed + 6))
    results.append(check_cmc_oracle(seed=seed + 7))
    return results

"""Shared numerical machinery: L-BFGS minimizer, finite-difference oracles, PCA.

The minimizer is a textbook limited-memory BFGS with a strong-Wolfe line
search (bracket + zoom with safeguarded quadratic/cubic interpolation).
Objectives are callables returning ``(value, gradient)``; the line search
guarantees the recorded objective trace is nonincreasing over accepted steps,
which downstream training code asserts on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class NonFiniteObjectiveError(ValueError):
    """Raised when an objective or gradient evaluates to NaN/Inf."""


@dataclass
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 300
    grad_tol: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9

    def __post_init__(self) -> None:
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be > 0")
        if not (0 < self.c1 < self.c2 < 1):
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class LbfgsResult:
    x: np.ndarray
    trace: list[float]
    n_iter: int
    status: str  # "converged" | "max_iter" | "line_search_failure"
    grad_inf_norm: float


def _interp_step(a_lo, f_lo, d_lo, a_hi, f_hi) -> float:
    """Minimizer of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi).

    Exact for quadratic objectives, which is what makes the minimizer finish
    small quadratic problems in ~dim iterations.
    """
    da = a_hi - a_lo
    denom = 2.0 * (f_hi - f_lo - d_lo * da)
    if denom == 0.0 or not np.isfinite(denom):
        return a_lo + 0.5 * da
    step = a_lo - d_lo * da * da / denom
    # keep strictly inside the bracket so the interval always shrinks
    lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
    margin = 0.01 * (hi - lo)
    if not np.isfinite(step) or step < lo + margin or step > hi - margin:
        step = a_lo + 0.5 * da
    return step


def _zoom(f, x, d, f0, dg0, a_lo, f_lo, dg_lo, a_hi, f_hi, c1, c2, max_iter=30):
    for _ in range(max_iter):
        a = _interp_step(a_lo, f_lo, dg_lo, a_hi, f_hi)
        fa, ga = f(x + a * d)
        dga = float(ga @ d)
        if fa > f0 + c1 * a * dg0 or fa >= f_lo:
            a_hi, f_hi = a, fa
        else:
            if abs(dga) <= -c2 * dg0:
                return a, fa, ga
            if dga * (a_hi - a_lo) >= 0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo, dg_lo = a, fa, dga
        if abs(a_hi - a_lo) <= 1e-14 * max(1.0, abs(a_lo)):
            break
    # fall back to the best sufficient-decrease point found, if any
    if f_lo < f0 + c1 * a_lo * dg0 and a_lo > 0:
        fa, ga = f(x + a_lo * d)
        return a_lo, fa, ga
    return None


def _secant_polish(f, x, d, f0, dg0, c1, c2, a_prev, dg_prev, a, fa, ga, dga):
    """One secant step on phi' before accepting a directly-admissible alpha.

    The secant root of phi' is the exact 1-D minimizer when the objective is
    quadratic; without this, accepting the unit step under a loose curvature
    constant (c2=0.9) would destroy finite termination on quadratics.
    """
    denom = dga - dg_prev
    if denom == 0.0 or not np.isfinite(denom) or abs(dga) <= 1e-12 * abs(dg0):
        return a, fa, ga
    a_star = a - dga * (a - a_prev) / denom
    if not np.isfinite(a_star) or a_star <= 0 or a_star > 1e10 * a or a_star == a:
        return a, fa, ga
    fs, gs = f(x + a_star * d)
    dgs = float(gs @ d)
    if fs <= fa and fs <= f0 + c1 * a_star * dg0 and abs(dgs) <= -c2 * dg0:
        return a_star, fs, gs
    return a, fa, ga


def _strong_wolfe(f, x, d, f0, g0, c1, c2, max_evals=25):
    """Bracketing strong-Wolfe search; returns (alpha, f, g) or None."""
    dg0 = float(g0 @ d)
    if dg0 >= 0:
        return None
    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    a = 1.0
    for i in range(max_evals):
        fa, ga = f(x + a * d)
        dga = float(ga @ d)
        if fa > f0 + c1 * a * dg0 or (i > 0 and fa >= f_prev):
            return _zoom(f, x, d, f0, dg0, a_prev, f_prev, dg_prev, a, fa, c1, c2)
        if abs(dga) <= -c2 * dg0:
            return _secant_polish(f, x, d, f0, dg0, c1, c2, a_prev, dg_prev, a, fa, ga, dga)
        if dga >= 0:
            return _zoom(f, x, d, f0, dg0, a, fa, dga, a_prev, f_prev, c1, c2)
        a_prev, f_prev, dg_prev = a, fa, dga
        a *= 2.0
    return None


def lbfgs_minimize(
    f: Objective,
    x0: np.ndarray,
    cfg: LbfgsConfig | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> LbfgsResult:
    """Minimize f from x0; returns the iterate and the accepted-value trace.

    Terminates on the iteration budget, on ``||grad||_inf <= grad_tol``, or on
    a failed line search (reported through ``status``, not an exception).
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=float, copy=True)
    fx, g = f(x)
    fx = float(fx)
    if not np.isfinite(fx) or not np.all(np.isfinite(g)):
        raise NonFiniteObjectiveError("objective is not finite at the starting point")
    trace = [fx]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    status = "max_iter"
    it = 0
    while it < cfg.max_iter:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            status = "converged"
            break
        # two-loop recursion
        q = -g
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * float(s @ q)
            alphas.append(a)
            q = q - a * y
        if y_hist:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
            q = gamma * q
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * float(y @ q)
            q = q + (a - b) * s
        d = q
        if float(d @ g) >= 0:  # numerical breakdown: restart from steepest descent
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
        ls = _strong_wolfe(f, x, d, fx, g, cfg.c1, cfg.c2)
        if ls is None:
            status = "line_search_failure"
            break
        alpha, f_new, g_new = ls
        s = alpha * d
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        x = x + s
        fx, g = float(f_new), g_new
        if not np.isfinite(fx) or not np.all(np.isfinite(g)):
            raise NonFiniteObjectiveError(f"objective became non-finite at iteration {it + 1}")
        trace.append(fx)
        it += 1
        if callback is not None:
            callback(x)
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    if status == "max_iter" and gnorm <= cfg.grad_tol:
        status = "converged"
    return LbfgsResult(x=x, trace=trace, n_iter=it, status=status, grad_inf_norm=gnorm)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float | np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function (testing oracle)."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-5 * (1.0 + np.abs(x))
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h.flat[i]
        fp = f(x + e)
        fm = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjectiveError(f"non-finite evaluation while differencing dimension {i}")
        g.flat[i] = (fp - fm) / (2.0 * h.flat[i])
    return g


def finite_diff_hess_diag(f: Callable[[np.ndarray], float], x: np.ndarray, h: float | np.ndarray | None = None) -> np.ndarray:
    """Central second differences (f(x+h) - 2f(x) + f(x-h)) / h^2 per dimension."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-4 * (1.0 + np.abs(x))
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    f0 = f(x)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h.flat[i]
        fp = f(x + e)
        fm = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(f0)):
            raise NonFiniteObjectiveError(f"non-finite evaluation while differencing dimension {i}")
        out.flat[i] = (fp - 2.0 * f0 + fm) / (h.flat[i] ** 2)
    return out


def grad_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Scale-normalized max deviation between two gradients."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class PcaModel:
    mean: np.ndarray         # (D_in,)
    basis: np.ndarray        # (D_in, D_out), orthonormal columns
    eigenvalues: np.ndarray  # (D_out,), nonincreasing

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.basis = np.asarray(self.basis, dtype=float)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        if self.basis.shape[0] != self.mean.shape[0] or self.basis.shape[1] != self.eigenvalues.shape[0]:
            raise ValueError("inconsistent PCA shapes")


def pca_fit(data: np.ndarray, d_out: int) -> PcaModel:
    """Principal directions of mean-centered data via SVD.

    Sign convention: the largest-magnitude entry of each basis column is
    positive, so fits are reproducible across runs/backends.
    """
    data = np.asarray(data, dtype=float)
    n, d_in = data.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    if not (1 <= d_out <= min(n - 1, d_in)):
        raise ValueError(f"d_out={d_out} must be in [1, min(n-1={n - 1}, D_in={d_in})]")
    mean = data.mean(axis=0)
    centered = data - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (svals[:d_out] ** 2) / (n - 1)
    basis = vt[:d_out].T.copy()
    for j in range(d_out):
        k = int(np.argmax(np.abs(basis[:, j])))
        if basis[k, j] < 0:
            basis[:, j] = -basis[:, j]
    return PcaModel(mean=mean, basis=basis, eigenvalues=eigenvalues)


def pca_project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project a vector (or stack of row vectors) onto the fitted basis."""
    x = np.asarray(x, dtype=float)
    return (x - model.mean) @ model.basis

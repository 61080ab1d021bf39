"""Marginal likelihood of theta = (mu, omega2) given the statistics (U_i, V_i).

With phi_i ~ N(mu, omega2) integrated out, each subject contributes

    log f_i = -1/2 log(1 + omega2 V) + (omega2 U^2 + 2 mu U - mu^2 V) / (2 (1 + omega2 V)),

which is the usual closed form rewritten without the U/V ratio, so it stays
finite at V = 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from .model import ModelSpec, ParamSpace, Theta, validate_theta
from .paths import Dataset, SuffStats, simulate_path, suff_stats_discretized


class ConvergenceWarning(UserWarning):
    pass


def log_lik_terms(mu, omega2, U, V):
    """Vectorised per-subject log-likelihood."""
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    D = 1.0 + omega2 * V
    return -0.5 * np.log1p(omega2 * V) + (omega2 * U * U + 2.0 * mu * U - mu * mu * V) / (2.0 * D)


def log_lik_single(theta: Theta, s: SuffStats) -> float:
    D = 1.0 + theta.omega2 * s.V
    mu = theta.mu
    return -0.5 * math.log1p(theta.omega2 * s.V) + (theta.omega2 * s.U**2 + 2.0 * mu * s.U - mu * mu * s.V) / (2.0 * D)


def _pooled(mu, s, groups):
    """Log-likelihood, gradient pieces shared by the pooled evaluators."""
    v, k, ubar, css = groups
    D = 1.0 + s * v
    r = k * (ubar - mu * v)  # sum of U - mu V within the group
    r2 = css + k * (ubar - mu * v) ** 2  # sum of (U - mu V)^2
    return v, k, ubar, css, D, r, r2


def _loglik_pooled(mu: float, s: float, groups) -> float:
    v, k, ubar, css = groups
    D = 1.0 + s * v
    sum_u = k * ubar
    sum_u2 = css + k * ubar * ubar
    return float(np.sum(-0.5 * k * np.log1p(s * v) + (s * sum_u2 + 2.0 * mu * sum_u - k * mu * mu * v) / (2.0 * D)))


def log_lik_total(theta: Theta, data: Dataset) -> float:
    if data.n == 0:
        return 0.0
    return _loglik_pooled(theta.mu, theta.omega2, data.groups)


def _score_pooled(mu, s, groups) -> np.ndarray:
    v, k, _, _, D, r, r2 = _pooled(mu, s, groups)
    return np.array([np.sum(r / D), np.sum(-0.5 * k * v / D + 0.5 * r2 / (D * D))])


def _hessian_pooled(mu, s, groups) -> np.ndarray:
    v, k, _, _, D, r, r2 = _pooled(mu, s, groups)
    h_mm = -np.sum(k * v / D)
    h_ms = -np.sum(v * r / (D * D))
    h_ss = np.sum(0.5 * k * v * v / (D * D) - v * r2 / D**3)
    return np.array([[h_mm, h_ms], [h_ms, h_ss]])


def score(theta: Theta, data: Dataset) -> np.ndarray:
    """Gradient of the total log-likelihood in (mu, omega2)."""
    if data.n == 0:
        return np.zeros(2)
    return _score_pooled(theta.mu, theta.omega2, data.groups)


def hessian(theta: Theta, data: Dataset) -> np.ndarray:
    """Analytic second derivatives of the total log-likelihood in (mu, omega2)."""
    if data.n == 0:
        return np.zeros((2, 2))
    return _hessian_pooled(theta.mu, theta.omega2, data.groups)


# ---------------------------------------------------------------------------
# maximum likelihood


@dataclass(frozen=True)
class MleFit:
    theta: Theta
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float


def _projected_grad(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g < 0)] = 0.0
    pg[(x >= hi) & (g > 0)] = 0.0
    return pg


def _newton_polish(x, groups, lo, hi, gtol, max_iter):
    """Projected Newton ascent with backtracking; returns (x, iterations, |pg|)."""
    f = _loglik_pooled(x[0], x[1], groups)
    for it in range(max_iter):
        g = _score_pooled(x[0], x[1], groups)
        pg = _projected_grad(x, g, lo, hi)
        gnorm = float(np.linalg.norm(pg))
        if gnorm < gtol:
            return x, it, gnorm
        free = pg != 0
        H = _hessian_pooled(x[0], x[1], groups)[np.ix_(free, free)]
        step = np.zeros(2)
        try:
            if np.all(np.linalg.eigvalsh(-H) > 0):
                step[free] = np.linalg.solve(-H, g[free])
            else:
                step[free] = g[free] / max(1.0, np.max(np.abs(np.diag(H))))
        except np.linalg.LinAlgError:
            step[free] = g[free]
        # near the optimum f is flat to rounding; then accept steps that shrink |pg|
        f_slack = 64 * np.finfo(float).eps * (1.0 + abs(f))
        t = 1.0
        for _ in range(60):
            x_new = np.clip(x + t * step, lo, hi)
            f_new = _loglik_pooled(x_new[0], x_new[1], groups)
            if f_new > f:
                break
            if f_new >= f - f_slack:
                g_new = _projected_grad(x_new, _score_pooled(x_new[0], x_new[1], groups), lo, hi)
                if np.linalg.norm(g_new) < gnorm:
                    break
            t *= 0.5
        else:
            return x, it + 1, gnorm
        if np.array_equal(x_new, x):
            return x, it + 1, gnorm
        x, f = x_new, f_new
    g = _score_pooled(x[0], x[1], groups)
    return x, max_iter, float(np.linalg.norm(_projected_grad(x, g, lo, hi)))


def start_points(space: ParamSpace, count: int = 5) -> list[np.ndarray]:
    """Box centre plus ``count - 1`` Latin-hypercube points (log scale in omega2)."""
    pts = [space.center.as_array()]
    if count > 1:
        u = qmc.LatinHypercube(d=2, seed=0).random(count - 1)
        mu = space.mu_lo + u[:, 0] * (space.mu_hi - space.mu_lo)
        lw = math.log(space.omega2_lo) + u[:, 1] * (math.log(space.omega2_hi) - math.log(space.omega2_lo))
        pts.extend(np.column_stack([mu, np.exp(lw)]))
    return pts


def mle(
    data: Dataset,
    space: ParamSpace,
    init: Theta | None = None,
    *,
    fixed_omega2: float | None = None,
    starts: int = 5,
    max_iter: int = 500,
    gtol: float = 1e-8,
) -> MleFit:
    """Box-constrained maximum likelihood estimate of theta.

    Runs L-BFGS-B from the box centre, ``starts - 1`` Latin-hypercube points
    and ``init`` (if given), then polishes the best local optimum with projected
    Newton steps until the projected gradient norm drops below ``gtol``.  A fit
    that stops on ``max_iter`` is returned with ``converged=False`` and a
    :class:`ConvergenceWarning`.

    With ``fixed_omega2`` only mu is estimated, in closed form:
    mu_hat = sum(U/(1+omega2 V)) / sum(V/(1+omega2 V)), clipped to the box.
    """
    if data.n == 0:
        raise ValueError("mle needs a nonempty dataset")
    if fixed_omega2 is not None:
        w = 1.0 / (1.0 + fixed_omega2 * data.V)
        info = float(np.sum(data.V * w))
        if info > 0:
            mu = float(np.sum(data.U * w)) / info
        else:
            mu = init.mu if init is not None else space.center.mu
        mu = min(max(mu, space.mu_lo), space.mu_hi)
        theta = Theta(mu, fixed_omega2)
        return MleFit(theta, log_lik_total(theta, data), True, 0, 0.0)

    groups = data.groups
    lo, hi = space.lower, space.upper
    candidates = start_points(space, starts)
    if init is not None:
        candidates.append(np.clip(init.as_array(), lo, hi))

    def neg(x):
        return -_loglik_pooled(x[0], x[1], groups), -_score_pooled(x[0], x[1], groups)

    best_x, best_f = None, -math.inf
    for x0 in candidates:
        with np.errstate(all="ignore"):
            res = optimize.minimize(
                neg, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                options={"maxiter": max_iter, "ftol": 1e-15, "gtol": gtol},
            )
        x = np.clip(res.x, lo, hi)
        f = _loglik_pooled(x[0], x[1], groups)
        if f > best_f:
            best_x, best_f = x, f
    if init is not None:
        # never return something worse than the caller's starting point
        x_init = np.clip(init.as_array(), lo, hi)
        f_init = _loglik_pooled(x_init[0], x_init[1], groups)
        if f_init > best_f:
            best_x, best_f = x_init, f_init

    x, iters, gnorm = _newton_polish(best_x, groups, lo, hi, gtol, max_iter)
    converged = gnorm < gtol
    if not converged:
        warnings.warn(
            f"mle stopped with projected gradient norm {gnorm:.3g} after {iters} Newton steps",
            ConvergenceWarning,
            stacklevel=2,
        )
    theta = Theta(float(x[0]), float(x[1]))
    return MleFit(theta, _loglik_pooled(x[0], x[1], groups), converged, iters, gnorm)


# ---------------------------------------------------------------------------
# observed information and tests


PD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FisherInfo:
    matrix: np.ndarray
    fallback_used: bool = False

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


def observed_fisher(data: Dataset, theta_hat: Theta, *, fixed_omega2: bool = False) -> FisherInfo:
    """Negative Hessian at ``theta_hat``, or the identity when that is not positive definite.

    ``fixed_omega2=True`` returns the 1x1 information for mu alone.
    """
    info = -hessian(theta_hat, data)
    if fixed_omega2:
        info = info[:1, :1]
    ok = np.all(np.isfinite(info)) and np.linalg.eigvalsh(info).min() > PD_TOL
    if not ok:
        return FisherInfo(np.eye(len(info)), True)
    return FisherInfo(info, False)


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    converged: bool
    theta_hat: Theta


def lrt_stat(data: Dataset, theta0: Theta, space: ParamSpace, **mle_kwargs) -> LrtResult:
    """Z_n^2 = -2 log(L(theta0) / sup L) = 2 (l(theta_hat) - l(theta0)), clamped at 0."""
    fit = mle(data, space, init=theta0, **mle_kwargs)
    z2 = 2.0 * (fit.loglik - log_lik_total(theta0, data))
    return LrtResult(max(z2, 0.0), fit.converged, fit.theta)


def kl_mc(
    theta0: Theta,
    theta: Theta,
    model: ModelSpec,
    x0: float,
    T: float,
    nsim: int,
    rng: np.random.Generator,
    m: int = 1000,
) -> tuple[float, float]:
    """Monte Carlo estimate of E_theta0[log f(X|theta0) - log f(X|theta)] and its standard error.

    The unit model samples (U, V) exactly; other models simulate ``m``-step paths.
    """
    if nsim < 2:
        raise ValueError("nsim must be >= 2")
    phi = theta0.mu + math.sqrt(theta0.omega2) * rng.standard_normal(nsim)
    if model.is_unit:
        U = phi * T + math.sqrt(T) * rng.standard_normal(nsim)
        V = np.full(nsim, float(T))
    else:
        stats = [suff_stats_discretized(simulate_path(model, p, x0, T, m, rng), model) for p in phi]
        U = np.array([s.U for s in stats])
        V = np.array([s.V for s in stats])
    diff = log_lik_terms(theta0.mu, theta0.omega2, U, V) - log_lik_terms(theta.mu, theta.omega2, U, V)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(nsim))


def kl_unit_exact(theta0: Theta, theta: Theta, T: float) -> float:
    """KL divergence for the unit model, where U ~ N(mu T, T (1 + omega2 T)) and V = T."""
    m0, v0 = theta0.mu * T, T * (1 + theta0.omega2 * T)
    m1, v1 = theta.mu * T, T * (1 + theta.omega2 * T)
    return 0.5 * (math.log(v1 / v0) + (v0 + (m0 - m1) ** 2) / v1 - 1.0)


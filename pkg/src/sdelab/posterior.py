"""Posterior inference for theta: conjugate formulas, Laplace, random-walk Metropolis, intervals."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, stats

from .likelihood import FisherInfo, _loglik_pooled, mle, observed_fisher
from .model import NormalMu, ParamSpace, Prior, Theta
from .paths import Dataset, EffectsCovariance, covariance_matrix
from .rng import substream


class PosteriorKind(enum.Enum):
    CONJUGATE_MU = "conjugate_mu"
    DEPENDENT_MU = "dependent_mu"
    LAPLACE = "laplace"


class DegenerateDesignError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianPosterior:
    """Normal posterior; 1-d (mu only) or 2-d over (mu, omega2)."""

    mean: np.ndarray
    cov: np.ndarray
    kind: PosteriorKind
    fallback_used: bool = False

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (len(mean), len(mean)):
            raise ValueError("mean and covariance shapes disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def mean_mu(self) -> float:
        return float(self.mean[0])

    @property
    def var_mu(self) -> float:
        return float(self.cov[0, 0])

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def logpdf_mu(self, grid) -> np.ndarray:
        return stats.norm.logpdf(grid, self.mean_mu, math.sqrt(self.var_mu))

    def to_record(self) -> dict:
        return {
            "kind": self.kind.value,
            "mean": self.mean.tolist(),
            "covariance": self.cov.tolist(),
            "fallback_used": self.fallback_used,
        }


# ---------------------------------------------------------------------------
# exact routes


def conjugate_posterior_mu(data: Dataset, A: float, B2: float, omega2: float) -> GaussianPosterior:
    """N(A, B2) prior on mu with omega2 known; ``B2 = inf`` gives the flat-prior limit.

    precision = sum V_i/(1 + omega2 V_i) + 1/B2
    mean      = (sum U_i/(1 + omega2 V_i) + A/B2) / precision
    """
    w = 1.0 / (1.0 + omega2 * data.V)
    prior_prec = 0.0 if math.isinf(B2) else 1.0 / B2
    prec = float(np.sum(data.V * w)) + prior_prec
    if not prec > 0:
        raise DegenerateDesignError("flat prior and no information about mu")
    mean = (float(np.sum(data.U * w)) + A * prior_prec) / prec
    return GaussianPosterior([mean], [[1.0 / prec]], PosteriorKind.CONJUGATE_MU)


def dependent_posterior_mu(
    data: Dataset,
    cov: EffectsCovariance,
    omega2: float,
    A: float,
    B2: float,
    *,
    printed_form: bool = False,
) -> GaussianPosterior:
    """Posterior of mu when phi ~ N_n(mu 1, omega2 Sigma_n).

    Marginally U | mu ~ N_n(mu v, M) with v = (V_1..V_n) and
    M = diag(V) + omega2 diag(V) Sigma_n diag(V), so the normal prior updates
    with precision v' M^-1 v + 1/B2.

    ``printed_form=True`` instead evaluates the closed form written in terms of
    Sigma_n^-1 and (omega2 V + Sigma_n^-1)^-1.  It agrees with the default at
    omega2 = 1 and scales the prior terms differently otherwise; it exists only
    for regression comparisons.
    """
    n = data.n
    S = covariance_matrix(cov, n)
    if printed_form:
        return _dependent_printed(data, S, omega2, A, B2)
    v = data.V
    M = np.diag(v) + omega2 * (v[:, None] * S * v[None, :])
    try:
        factor = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError:
        raise DegenerateDesignError("marginal covariance of U is singular (some V_i = 0?)") from None
    Minv_v = linalg.cho_solve(factor, v)
    prec = float(v @ Minv_v) + 1.0 / B2
    mean = (float(Minv_v @ data.U) + A / B2) / prec
    return GaussianPosterior([mean], [[1.0 / prec]], PosteriorKind.DEPENDENT_MU)


def _dependent_printed(data, S, omega2, A, B2):
    n = data.n
    ones = np.ones(n)
    S_inv = np.linalg.inv(S)
    K = np.linalg.inv(omega2 * np.diag(data.V) + S_inv)
    a = S_inv @ ones
    Q = float(a @ (S - K) @ a)
    num = omega2 * float(a @ K @ data.U) + A / B2
    denom = Q + 1.0 / B2
    return GaussianPosterior([num / denom], [[omega2 / denom]], PosteriorKind.DEPENDENT_MU)


def combine_normal_prior(post: GaussianPosterior, A: float, B2: float) -> GaussianPosterior:
    """Multiply a 1-d normal approximation of the likelihood by an N(A, B2) prior."""
    if post.dim != 1:
        raise ValueError("combine_normal_prior needs a posterior on mu alone")
    prec = 1.0 / post.var_mu + 1.0 / B2
    mean = (post.mean_mu / post.var_mu + A / B2) / prec
    return GaussianPosterior([mean], [[1.0 / prec]], post.kind, post.fallback_used)


def laplace_approx(
    data: Dataset, prior: Prior, space: ParamSpace, *, fixed_omega2: float | None = None
) -> GaussianPosterior:
    """Normal centred at the MLE with covariance the inverse observed information.

    A ``NormalMu`` prior fixes omega2, giving a 1-d approximation for mu.  The
    prior's shape does not enter; see :func:`combine_normal_prior`.
    """
    if data.n == 0:
        raise ValueError("laplace_approx needs a nonempty dataset")
    if fixed_omega2 is None and isinstance(prior, NormalMu):
        fixed_omega2 = prior.omega2
    fit = mle(data, space, fixed_omega2=fixed_omega2)
    info = observed_fisher(data, fit.theta, fixed_omega2=fixed_omega2 is not None)
    mean = [fit.theta.mu] if fixed_omega2 is not None else fit.theta.as_array()
    return GaussianPosterior(mean, info.covariance, PosteriorKind.LAPLACE, info.fallback_used)


# ---------------------------------------------------------------------------
# random-walk Metropolis


@dataclass(frozen=True, eq=False)
class McmcSample:
    """Post-burn-in draws of (mu, omega2); ``dim`` is the number of sampled coordinates."""

    draws: np.ndarray = field(repr=False)
    acceptance_rate: float
    burn_in: int
    seed: int
    accepted: int
    steps: int
    dim: int

    @property
    def mu(self) -> np.ndarray:
        return self.draws[:, 0]

    @property
    def omega2(self) -> np.ndarray:
        return self.draws[:, 1]


def default_step_scale(data: Dataset, prior: Prior, space: ParamSpace) -> np.ndarray:
    """2.4 posterior-scale standard deviations per coordinate.

    For a ``NormalMu`` prior the exact conjugate sd of mu is used; otherwise the
    Laplace sd of mu and the delta-method sd of log omega2.
    """
    if isinstance(prior, NormalMu):
        sd = math.sqrt(conjugate_posterior_mu(data, prior.A, prior.B2, prior.omega2).var_mu)
        return np.array([2.4 * sd])
    if data.n == 0:
        return np.array([2.4, 2.4])
    lap = laplace_approx(data, prior, space)
    sd = lap.sd
    return 2.4 * np.array([sd[0], sd[1] / lap.mean[1]])


def _loglik_fn(data: Dataset):
    if data.n == 0:
        return lambda mu, w: 0.0
    groups = data.groups
    if len(groups[0]) > 8:
        return lambda mu, w: _loglik_pooled(mu, w, groups)
    # few distinct V values: plain floats beat numpy call overhead in the chain loop
    rows = [
        (float(v), float(k), float(k * ub), float(css + k * ub * ub))
        for v, k, ub, css in zip(*groups)
    ]

    def loglik(mu, w):
        total = 0.0
        for v, k, su, su2 in rows:
            D = 1.0 + w * v
            total += -0.5 * k * math.log1p(w * v) + (w * su2 + 2.0 * mu * su - k * mu * mu * v) / (2.0 * D)
        return total

    return loglik


def rw_metropolis(
    data: Dataset,
    prior: Prior,
    space: ParamSpace,
    steps: int,
    step_scale=None,
    seed: int = 0,
    *,
    init: Theta | None = None,
    burn_in: int | None = None,
) -> McmcSample:
    """Random-walk Metropolis on the posterior of theta.

    Proposals add independent Gaussian increments to mu and to log(omega2)
    (the log-scale move carries its Jacobian in the acceptance ratio).  A
    ``NormalMu`` prior holds omega2 at its known value and the chain moves mu
    only.  Proposals leaving the box are rejected.  ``burn_in`` defaults to
    20% of ``steps``; the acceptance rate is over all steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    one_d = isinstance(prior, NormalMu)
    dim = 1 if one_d else 2
    if step_scale is None:
        step_scale = default_step_scale(data, prior, space)
    step_scale = np.broadcast_to(np.asarray(step_scale, dtype=float), (dim,))
    if not np.all(step_scale > 0):
        raise ValueError("step sizes must be positive")
    if burn_in is None:
        burn_in = steps // 5
    if not 0 <= burn_in < steps:
        raise ValueError("burn_in must be in [0, steps)")

    loglik = _loglik_fn(data)

    def log_target(mu, w):
        if not (space.mu_lo <= mu <= space.mu_hi and space.omega2_lo <= w <= space.omega2_hi):
            return -math.inf
        lp = prior.log_density(mu, w, space) + loglik(mu, w)
        return lp if one_d else lp + math.log(w)

    if init is None:
        if one_d:
            init = Theta(conjugate_posterior_mu(data, prior.A, prior.B2, prior.omega2).mean_mu, prior.omega2)
        elif data.n:
            init = mle(data, space).theta
        else:
            init = space.center
    mu, w = init.mu, (prior.omega2 if one_d else init.omega2)
    cur = log_target(mu, w)
    if not math.isfinite(cur):
        raise ValueError("initial point has zero posterior density")

    rng = substream(seed, "rw_metropolis")
    jumps = rng.standard_normal((steps, dim)) * step_scale
    log_u = np.log(rng.random(steps))
    out = np.empty((steps, 2))
    accepted = 0
    for i in range(steps):
        if one_d:
            mu_p, w_p = mu + jumps[i, 0], w
        else:
            mu_p, w_p = mu + jumps[i, 0], w * math.exp(jumps[i, 1])
        prop = log_target(mu_p, w_p)
        if log_u[i] < prop - cur:
            mu, w, cur = mu_p, w_p, prop
            accepted += 1
        out[i, 0] = mu
        out[i, 1] = w
    return McmcSample(out[burn_in:], accepted / steps, burn_in, seed, accepted, steps, dim)


def batch_means_se(x, batches: int = 50) -> float:
    """Monte Carlo standard error of the mean of a correlated chain by batch means."""
    x = np.asarray(x, dtype=float)
    size = len(x) // batches
    if size < 2:
        raise ValueError("chain too short for batch means")
    means = x[: size * batches].reshape(batches, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


# ---------------------------------------------------------------------------
# summaries


class IntervalKind(enum.Enum):
    HPD = "hpd"
    CLASSICAL_CI = "classical_ci"


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    level: float
    kind: IntervalKind
    fallback_used: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("interval needs lo < hi")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi


def _check_level(level):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")


def sample_hpd(draws, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ceil(level * N) of the sorted draws."""
    _check_level(level)
    x = np.sort(np.asarray(draws, dtype=float))
    N = len(x)
    if N < 10:
        raise ValueError("need at least 10 draws for a sample HPD interval")
    k = math.ceil(level * N)
    widths = x[k - 1 :] - x[: N - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def hpd_interval(post, level: float = 0.95, component: int = 0) -> Interval:
    """HPD interval for one coordinate of a normal posterior or an MCMC sample.

    For a normal posterior this is mean +- z sd, the equal-tailed interval.
    """
    _check_level(level)
    if isinstance(post, GaussianPosterior):
        z = stats.norm.ppf(0.5 * (1 + level))
        half = z * math.sqrt(post.cov[component, component])
        m = post.mean[component]
        return Interval(m - half, m + half, level, IntervalKind.HPD, post.fallback_used)
    draws = post.draws[:, component] if isinstance(post, McmcSample) else post
    lo, hi = sample_hpd(draws, level)
    return Interval(lo, hi, level, IntervalKind.HPD)


def classical_ci(theta_hat: Theta, info: FisherInfo, level: float = 0.95, component: int = 0) -> Interval:
    """Wald interval theta_hat[c] +- z sqrt((info^-1)[c, c])."""
    _check_level(level)
    z = stats.norm.ppf(0.5 * (1 + level))
    var = info.covariance[component, component]
    centre = theta_hat.as_array()[component]
    half = z * math.sqrt(var)
    return Interval(centre - half, centre + half, level, IntervalKind.CLASSICAL_CI, info.fallback_used)


def posterior_prob_ball(post, theta0: Theta, delta: float) -> float:
    """Posterior mass of {|theta - theta0| < delta} (Euclidean; mu only for 1-d posteriors)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    if isinstance(post, McmcSample):
        if post.dim == 1:
            return float(np.mean(np.abs(post.mu - theta0.mu) < delta))
        d = post.draws - theta0.as_array()
        return float(np.mean(np.hypot(d[:, 0], d[:, 1]) < delta))
    if post.dim == 1:
        sd = math.sqrt(post.var_mu)
        off = post.mean_mu - theta0.mu
        return float(stats.norm.cdf((delta - off) / sd) - stats.norm.cdf((-delta - off) / sd))
    return _bivariate_ball(post.mean - theta0.as_array(), post.cov, delta)


def _bivariate_ball(m, S, delta):
    # integrate the first coordinate numerically, the second through its conditional normal cdf
    s1 = math.sqrt(S[0, 0])
    slope = S[0, 1] / S[0, 0]
    cond_sd = math.sqrt(max(S[1, 1] - S[0, 1] * slope, 0.0))

    def inner(z):
        x = m[0] + s1 * z
        reach = math.sqrt(max(delta * delta - x * x, 0.0))
        if reach == 0.0:
            return 0.0
        c = m[1] + slope * (x - m[0])
        if cond_sd == 0.0:
            p = float(-reach < c < reach)
        else:
            p = stats.norm.cdf((reach - c) / cond_sd) - stats.norm.cdf((-reach - c) / cond_sd)
        return stats.norm.pdf(z) * p

    lo = max(-10.0, (-delta - m[0]) / s1)
    hi = min(10.0, (delta - m[0]) / s1)
    if lo >= hi:
        return 0.0
    val, _ = integrate.quad(inner, lo, hi, limit=200, epsabs=1e-12, epsrel=1e-10)
    return float(min(max(val, 0.0), 1.0))


def tv_normal_vs_samples(mean: float, sd: float, draws, bins: int = 50) -> float:
    """Half L1 distance between binned draws and the normal's bin masses on a common grid."""
    draws = np.asarray(draws, dtype=float)
    lo = min(draws.min(), mean - 4 * sd)
    hi = max(draws.max(), mean + 4 * sd)
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(draws, edges)[0] / len(draws)
    q = np.diff(stats.norm.cdf(edges, mean, sd))
    return 0.5 * float(np.abs(p - q).sum())


def tv_normal_normal(m1: float, s1: float, m2: float, s2: float, bins: int = 50) -> float:
    """Binned total-variation proxy between two normals over +-5 sd of both."""
    lo = min(m1 - 5 * s1, m2 - 5 * s2)
    hi = max(m1 + 5 * s1, m2 + 5 * s2)
    edges = np.linspace(lo, hi, bins + 1)
    p = np.diff(stats.norm.cdf(edges, m1, s1))
    q = np.diff(stats.norm.cdf(edges, m2, s2))
    return 0.5 * float(np.abs(p - q).sum())


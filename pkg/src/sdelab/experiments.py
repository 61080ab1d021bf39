"""Replicated experiments on posterior asymptotics, emitting long-format result rows.

Each runner simulates one data sequence per replicate at the largest sample
size and analyses its prefixes, so results for different n within a replicate
come from one growing dataset.  Failures are isolated per (n, replicate): the
affected metrics are emitted as NaN with ``error_flag`` set.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .likelihood import lrt_stat, mle, observed_fisher
from .model import (
    DesignKind,
    NormalMu,
    ParamSpace,
    Prior,
    Theta,
    TruncatedNormalProduct,
    UniformBox,
    design_sequence,
    get_model,
)
from .paths import (
    IID,
    CovKind,
    EffectsCovariance,
    coarsen_increments,
    simulate_dataset,
    simulate_effects,
    simulate_path,
    suff_stats_discretized,
)
from .posterior import (
    classical_ci,
    conjugate_posterior_mu,
    dependent_posterior_mu,
    hpd_interval,
    laplace_approx,
    posterior_prob_ball,
    rw_metropolis,
    tv_normal_normal,
)
from .rng import derive_seed, substream

log = logging.getLogger(__name__)


class Experiment(enum.Enum):
    CONSISTENCY = "consistency"
    NORMALITY = "normality"
    DEPENDENCE = "dependence"
    INTERVALS = "intervals"
    DISCRETIZATION = "discretization"
    LRT = "lrt"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: Experiment | None = None
    model: str = "unit"
    theta0: Theta = Theta(1.0, 1.0)
    design: DesignKind = DesignKind.CONSTANT
    T: float = 5.0
    c0: float = 5.0
    x0: float = 0.0
    sizes: tuple[int, ...] = (10, 100)
    replicates: int = 1
    seed: int = 0
    prior: Prior = NormalMu(0.0, 2.25, 1.0)
    space: ParamSpace = ParamSpace()
    effects: EffectsCovariance = IID
    path_steps: int = 1000
    mcmc_steps: int = 125_000
    burn_in_fraction: float = 0.2
    optimizer_starts: int = 5
    optimizer_max_iter: int = 500
    level: float = 0.95
    delta: float = 0.1
    sampler: str = "mcmc"
    m_grid: tuple[int, ...] = (100, 1000, 10_000)
    m_ref: int = 1_000_000
    structures: tuple[EffectsCovariance, ...] = (
        EffectsCovariance(CovKind.TRIDIAGONAL, 1 / 3),
        EffectsCovariance(CovKind.COMPOUND, 1 / 3),
    )
    curve_points: int = 301

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.sizes or any(n < 1 for n in self.sizes):
            raise ValueError("sizes must be positive integers")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")
        if any(m < 1 or self.m_ref % m for m in self.m_grid):
            raise ValueError("every m in m_grid must divide m_ref")
        if self.sampler not in ("mcmc", "exact_normal"):
            raise ValueError("sampler must be 'mcmc' or 'exact_normal'")

    def to_dict(self) -> dict:
        def enc(obj):
            if isinstance(obj, enum.Enum):
                return obj.value
            if dataclasses.is_dataclass(obj):
                out = {f.name: enc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
                if isinstance(obj, (NormalMu, UniformBox, TruncatedNormalProduct)):
                    out = {"kind": type(obj).__name__, **out}
                return out
            if isinstance(obj, (tuple, list)):
                return [enc(x) for x in obj]
            return obj

        return enc(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Row:
    experiment: str
    n_or_m: int
    replicate: int
    metric: str
    value: float
    error_flag: int = 0


@dataclass
class ExperimentResult:
    rows: list[Row]
    config_hash: str
    seed: int
    experiment: str
    summary: dict = field(default_factory=dict)
    curves: list[tuple] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "version": __version__}

    def values(self, metric: str, n: int | None = None) -> np.ndarray:
        return np.array(
            [r.value for r in self.rows if r.metric == metric and (n is None or r.n_or_m == n)]
        )


# ---------------------------------------------------------------------------
# shared plumbing


def design_for(cfg: ExperimentConfig, n: int):
    return design_sequence(cfg.design, n, x0=cfg.x0, T=cfg.T, c0=cfg.c0)


def _simulate(cfg: ExperimentConfig, replicate: int, n: int, effects: EffectsCovariance | None = None):
    return simulate_dataset(
        get_model(cfg.model), cfg.theta0, design_for(cfg, n), cfg.seed, replicate,
        m=cfg.path_steps, cov=cfg.effects if effects is None else effects,
    )


def _mle_kwargs(cfg):
    return {"starts": cfg.optimizer_starts, "max_iter": cfg.optimizer_max_iter}


def _mcmc(cfg, data, replicate, n, prior=None):
    burn = int(cfg.burn_in_fraction * cfg.mcmc_steps)
    return rw_metropolis(
        data, cfg.prior if prior is None else prior, cfg.space, cfg.mcmc_steps,
        seed=derive_seed(cfg.seed, "mcmc", replicate, n), burn_in=burn,
    )


def _guarded(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - any failure becomes an error row
        return exc


class _Replicate:
    """Picklable per-replicate job: returns ({key: metrics-or-exception}, curves)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg

    def __call__(self, replicate: int):
        runner = _RUNNERS[self.cfg.experiment]
        return runner.replicate(self.cfg, replicate)


def _execute(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    runner = _RUNNERS[cfg.experiment]
    runner.check(cfg)
    job = _Replicate(cfg)
    reps = range(cfg.replicates)
    if threads > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(job, reps))
    else:
        outputs = [job(r) for r in reps]

    rows, curves, errors = [], [], []
    metrics = runner.metrics(cfg)
    name = cfg.experiment.value
    for replicate, (per_key, rep_curves) in zip(reps, outputs):
        curves.extend(rep_curves)
        for key in runner.keys(cfg):
            res = per_key[key]
            if isinstance(res, Exception):
                log.warning("%s replicate %d at %d failed: %s", name, replicate, key, res)
                errors.append({"n_or_m": key, "replicate": replicate, "error": f"{type(res).__name__}: {res}"})
                rows.extend(Row(name, key, replicate, m, math.nan, 1) for m in metrics)
            else:
                rows.extend(Row(name, key, replicate, m, float(res[m]), 0) for m in metrics)
    rows.sort(key=lambda r: (r.n_or_m, r.replicate))
    result = ExperimentResult(rows, cfg.config_hash(), cfg.seed, name, curves=curves, errors=errors)
    result.summary = _summarize(result, metrics, runner.keys(cfg))
    runner.extend_summary(cfg, result)
    return result


def _summarize(result: ExperimentResult, metrics, keys) -> dict:
    per = {}
    for key in keys:
        entry = {}
        for m in metrics:
            v = result.values(m, key)
            ok = v[np.isfinite(v)]
            entry[m] = {
                "mean": float(ok.mean()) if ok.size else None,
                "median": float(np.median(ok)) if ok.size else None,
                "sd": float(ok.std(ddof=1)) if ok.size > 1 else None,
                "count": int(ok.size),
                "errors": int(v.size - ok.size),
            }
        per[str(key)] = entry
    return {"experiment": result.experiment, **result.provenance, "per_key": per}


class _Runner:
    def check(self, cfg):
        pass

    def keys(self, cfg):
        return list(cfg.sizes)

    def metrics(self, cfg) -> list[str]:
        raise NotImplementedError

    def replicate(self, cfg, replicate):
        raise NotImplementedError

    def extend_summary(self, cfg, result):
        pass

    def _per_size(self, cfg, replicate, analyse, effects=None):
        data = _guarded(_simulate, cfg, replicate, max(cfg.sizes), effects)
        out = {}
        for n in cfg.sizes:
            out[n] = data if isinstance(data, Exception) else _guarded(analyse, data.head(n), n)
        return out


def _require_normal_mu(cfg):
    if not isinstance(cfg.prior, NormalMu):
        raise ValueError(f"{cfg.experiment.value} experiment needs a normal_mu prior")


# ---------------------------------------------------------------------------
# consistency


class _Consistency(_Runner):
    def metrics(self, cfg):
        return ["mu_hat", "abs_error", "sigma2", "ball_prob"]

    def replicate(self, cfg, replicate):
        mu0 = cfg.theta0.mu

        def analyse(data, n):
            if isinstance(cfg.prior, NormalMu):
                post = conjugate_posterior_mu(data, cfg.prior.A, cfg.prior.B2, cfg.prior.omega2)
                mu_hat, sigma2 = post.mean_mu, post.var_mu
            else:
                post = _mcmc(cfg, data, replicate, n)
                mu_hat, sigma2 = float(post.mu.mean()), float(post.mu.var())
            return {
                "mu_hat": mu_hat,
                "abs_error": abs(mu_hat - mu0),
                "sigma2": sigma2,
                "ball_prob": posterior_prob_ball(post, cfg.theta0, cfg.delta),
            }

        return self._per_size(cfg, replicate, analyse), []


# ---------------------------------------------------------------------------
# normality


def sym_sqrt(A: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric positive semi-definite matrix."""
    w, Q = np.linalg.eigh(A)
    return (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T


def normalized_draws(draws: np.ndarray, theta_hat: np.ndarray, info: np.ndarray) -> np.ndarray:
    """Psi = info^{1/2} (theta - theta_hat) for each row of ``draws``."""
    return (draws - theta_hat) @ sym_sqrt(info)


def grid_density_discrepancy(psi: np.ndarray, bins: int = 50, half_width: float = 3.0) -> float:
    """Max over a bins x bins grid on [-h, h]^2 of |histogram density - N(0, I) cell density|."""
    edges = np.linspace(-half_width, half_width, bins + 1)
    counts = np.histogram2d(psi[:, 0], psi[:, 1], [edges, edges])[0]
    area = (edges[1] - edges[0]) ** 2
    mass = np.diff(stats.norm.cdf(edges))
    return float(np.max(np.abs(counts / (len(psi) * area) - np.outer(mass, mass) / area)))


class _Normality(_Runner):
    def check(self, cfg):
        if isinstance(cfg.prior, NormalMu):
            raise ValueError("normality experiment needs a two-parameter prior (uniform or truncnorm)")

    def metrics(self, cfg):
        return ["ks_psi1", "ks_psi2", "ks_max", "grid_sup", "acceptance_rate", "fallback_used"]

    def replicate(self, cfg, replicate):
        def analyse(data, n):
            fit = mle(data, cfg.space, **_mle_kwargs(cfg))
            info = observed_fisher(data, fit.theta)
            theta_hat = fit.theta.as_array()
            if cfg.sampler == "mcmc":
                sample = _mcmc(cfg, data, replicate, n)
                draws, acc = sample.draws, sample.acceptance_rate
            else:
                size = cfg.mcmc_steps - int(cfg.burn_in_fraction * cfg.mcmc_steps)
                rng = substream(cfg.seed, "exact_normal", replicate, n)
                draws = rng.multivariate_normal(theta_hat, info.covariance, size=size)
                acc = 1.0
            psi = normalized_draws(draws, theta_hat, info.matrix)
            ks = [stats.kstest(psi[:, j], "norm").statistic for j in (0, 1)]
            return {
                "ks_psi1": ks[0],
                "ks_psi2": ks[1],
                "ks_max": max(ks),
                "grid_sup": grid_density_discrepancy(psi),
                "acceptance_rate": acc,
                "fallback_used": float(info.fallback_used),
            }

        return self._per_size(cfg, replicate, analyse), []

    def extend_summary(self, cfg, result):
        ks = np.array([[r.value for r in result.rows if r.metric == "ks_max" and r.replicate == rep]
                       for rep in range(cfg.replicates)])
        ok = np.all(np.isfinite(ks), axis=1)
        mono = np.all(np.diff(ks[ok], axis=1) <= 0, axis=1)
        result.summary["ks_nonincreasing_fraction"] = float(mono.mean()) if mono.size else None


# ---------------------------------------------------------------------------
# dependence


def _cov_label(cov: EffectsCovariance) -> str:
    return cov.kind.value


class _Dependence(_Runner):
    def check(self, cfg):
        _require_normal_mu(cfg)

    def metrics(self, cfg):
        return [f"{_cov_label(c)}.{m}" for c in cfg.structures for m in ("mu_hat", "sigma2", "covered")]

    def replicate(self, cfg, replicate):
        prior = cfg.prior
        mu0 = cfg.theta0.mu
        out = {n: {} for n in cfg.sizes}
        curves = []
        grid = np.linspace(mu0 - 3.0, mu0 + 3.0, cfg.curve_points)
        for cov in cfg.structures:
            label = _cov_label(cov)

            def analyse(data, n, cov=cov, label=label):
                post = dependent_posterior_mu(data, cov, prior.omega2, prior.A, prior.B2)
                if replicate == 0:
                    dens = np.exp(post.logpdf_mu(grid))
                    curves.extend((label, n, float(g), float(d)) for g, d in zip(grid, dens))
                sd = math.sqrt(post.var_mu)
                return {
                    f"{label}.mu_hat": post.mean_mu,
                    f"{label}.sigma2": post.var_mu,
                    f"{label}.covered": float(abs(post.mean_mu - mu0) < 5 * sd),
                }

            for n, res in self._per_size(cfg, replicate, analyse, effects=cov).items():
                if isinstance(out[n], Exception):
                    continue
                if isinstance(res, Exception):
                    out[n] = res
                else:
                    out[n].update(res)
        return out, curves


# ---------------------------------------------------------------------------
# classical CI vs HPD


class _Intervals(_Runner):
    def check(self, cfg):
        _require_normal_mu(cfg)

    def metrics(self, cfg):
        return ["ci_lo", "ci_hi", "ci_length", "ci_covers", "hpd_lo", "hpd_hi", "hpd_length", "hpd_covers"]

    def replicate(self, cfg, replicate):
        prior = cfg.prior
        mu0 = cfg.theta0.mu

        def analyse(data, n):
            fit = mle(data, cfg.space, fixed_omega2=prior.omega2)
            ci = classical_ci(fit.theta, observed_fisher(data, fit.theta, fixed_omega2=True), cfg.level)
            hpd = hpd_interval(conjugate_posterior_mu(data, prior.A, prior.B2, prior.omega2), cfg.level)
            return {
                "ci_lo": ci.lo, "ci_hi": ci.hi, "ci_length": ci.length, "ci_covers": float(ci.covers(mu0)),
                "hpd_lo": hpd.lo, "hpd_hi": hpd.hi, "hpd_length": hpd.length,
                "hpd_covers": float(hpd.covers(mu0)),
            }

        return self._per_size(cfg, replicate, analyse), []

    def extend_summary(self, cfg, result):
        gaps = {}
        for n in cfg.sizes:
            gaps[str(n)] = float(np.nanmean(result.values("ci_length", n)) - np.nanmean(result.values("hpd_length", n)))
        result.summary["length_gap"] = gaps


# ---------------------------------------------------------------------------
# discretization


class _Discretization(_Runner):
    def check(self, cfg):
        if len(cfg.sizes) != 1:
            raise ValueError("discretization experiment takes a single sample size")

    def keys(self, cfg):
        return list(cfg.m_grid)

    def metrics(self, cfg):
        return ["rms_u", "rms_v", "max_abs_u", "tv_posterior"]

    def replicate(self, cfg, replicate):
        try:
            ref, coarse = self._statistics(cfg, replicate)
        except Exception as exc:  # noqa: BLE001
            return {m: exc for m in cfg.m_grid}, []
        out = {}
        for m in cfg.m_grid:
            out[m] = _guarded(self._compare, cfg, ref, coarse[m])
        return out, []

    def _statistics(self, cfg, replicate):
        model = get_model(cfg.model)
        n = cfg.sizes[0]
        design = design_for(cfg, n)
        phi = simulate_effects(n, cfg.theta0, cfg.effects, substream(cfg.seed, "effects", replicate))
        ref = np.empty((n, 2))
        coarse = {m: np.empty((n, 2)) for m in cfg.m_grid}
        for i in range(n):
            T, x0 = design.T[i], design.x0[i]
            rng = substream(cfg.seed, "path", replicate, i)
            dW = np.sqrt(T / cfg.m_ref) * rng.standard_normal(cfg.m_ref)
            if model.is_unit:
                ref[i] = (phi[i] * T + math.fsum(dW), T)
            else:
                s = suff_stats_discretized(simulate_path(model, phi[i], x0, T, cfg.m_ref, increments=dW), model)
                ref[i] = (s.U, s.V)
            for m in cfg.m_grid:
                path = simulate_path(model, phi[i], x0, T, m, increments=coarsen_increments(dW, m))
                s = suff_stats_discretized(path, model)
                coarse[m][i] = (s.U, s.V)
        return ref, coarse

    def _compare(self, cfg, ref, stats_m):
        du = stats_m[:, 0] - ref[:, 0]
        dv = stats_m[:, 1] - ref[:, 1]
        p_ref = self._posterior(cfg, ref)
        p_m = self._posterior(cfg, stats_m)
        return {
            "rms_u": float(np.sqrt(np.mean(du * du))),
            "rms_v": float(np.sqrt(np.mean(dv * dv))),
            "max_abs_u": float(np.max(np.abs(du))),
            "tv_posterior": tv_normal_normal(*p_ref, *p_m),
        }

    def _posterior(self, cfg, uv):
        from .paths import Dataset

        data = Dataset(uv[:, 0], uv[:, 1], np.full(len(uv), cfg.T), np.full(len(uv), cfg.x0))
        if isinstance(cfg.prior, NormalMu):
            post = conjugate_posterior_mu(data, cfg.prior.A, cfg.prior.B2, cfg.prior.omega2)
        else:
            post = laplace_approx(data, cfg.prior, cfg.space)
        return post.mean_mu, math.sqrt(post.var_mu)


# ---------------------------------------------------------------------------
# likelihood ratio


class _Lrt(_Runner):
    def metrics(self, cfg):
        return ["z2", "converged"]

    def replicate(self, cfg, replicate):
        def analyse(data, n):
            res = lrt_stat(data, cfg.theta0, cfg.space, **_mle_kwargs(cfg))
            return {"z2": res.statistic, "converged": float(res.converged)}

        return self._per_size(cfg, replicate, analyse), []

    def extend_summary(self, cfg, result):
        out = {}
        for n in cfg.sizes:
            z = result.values("z2", n)
            z = z[np.isfinite(z)]
            if not z.size:
                continue
            out[str(n)] = {
                "mean": float(z.mean()),
                "ks_chi2_df1": float(stats.kstest(z, stats.chi2(1).cdf).statistic),
                "ks_chi2_df2": float(stats.kstest(z, stats.chi2(2).cdf).statistic),
                "fraction_nonnegative": float(np.mean(z >= 0)),
            }
        result.summary["chi2_reference"] = out


_RUNNERS = {
    Experiment.CONSISTENCY: _Consistency(),
    Experiment.NORMALITY: _Normality(),
    Experiment.DEPENDENCE: _Dependence(),
    Experiment.INTERVALS: _Intervals(),
    Experiment.DISCRETIZATION: _Discretization(),
    Experiment.LRT: _Lrt(),
}


def _runner_for(expected: Experiment):
    def run(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
        if config.experiment is not expected:
            raise ValueError(f"config is for {config.experiment}, not {expected.value}")
        return _execute(config, threads)

    run.__name__ = f"run_{expected.value}"
    run.__doc__ = f"Run the {expected.value} experiment described by ``config``."
    return run


run_consistency = _runner_for(Experiment.CONSISTENCY)
run_normality = _runner_for(Experiment.NORMALITY)
run_dependence = _runner_for(Experiment.DEPENDENCE)
run_intervals = _runner_for(Experiment.INTERVALS)
run_discretization = _runner_for(Experiment.DISCRETIZATION)
run_lrt = _runner_for(Experiment.LRT)


def check_config(config: ExperimentConfig) -> None:
    """Raise ValueError if ``config`` cannot drive its experiment (e.g. wrong prior family)."""
    if config.experiment is not None:
        _RUNNERS[config.experiment].check(config)


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    if config.experiment is None:
        raise ValueError("config does not name an experiment")
    return _execute(config, threads)

"""Command-line entry point: ``sdelab {simulate,fit,posterior,experiment}``.

Exit status 0 on success, 1 on a configuration or usage error, 2 when the
computation itself fails.  Outputs are written atomically and only after the
whole computation has succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .config import ConfigError, RunConfig, parse_config
from .experiments import design_for, run_experiment
from .likelihood import kl_mc, lrt_stat, mle, observed_fisher
from .model import NormalMu, get_model
from .paths import simulate_dataset, simulate_effects, simulate_path
from .posterior import (
    conjugate_posterior_mu,
    dependent_posterior_mu,
    hpd_interval,
    laplace_approx,
    rw_metropolis,
)
from .rng import substream

log = logging.getLogger("sdelab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("simulate", "fit", "posterior", "experiment")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdelab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sdelab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path, help="INI config file")
        s.add_argument("--seed", type=int, help="master seed, overrides [run] seed")
        s.add_argument("--out", required=True, type=Path, help="output file")
        s.add_argument("--format", choices=("csv", "json"), default="csv")
        s.add_argument("--threads", type=int, default=None, help="worker processes (default: CPU count)")
    return p


def _setup_logging():
    level = os.environ.get("SDE_LAB_LOG", "warning").strip().lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.warning("ignoring unknown SDE_LAB_LOG=%r", level)


def _provenance(cfg: RunConfig, command: str, *, echo_config: bool) -> dict:
    prov = {"command": command, "config_hash": cfg.config_hash, "seed": cfg.seed, "version": __version__}
    if echo_config:
        prov["config"] = json.dumps(cfg.resolved, sort_keys=True, separators=(",", ":"))
    return prov


def _json_doc(cfg, command, body: dict) -> str:
    prov = _provenance(cfg, command, echo_config=False)
    prov["config"] = cfg.resolved
    return io.render_json({"provenance": prov, **body})


def _dataset(cfg: RunConfig):
    e = cfg.experiment
    return simulate_dataset(get_model(e.model), e.theta0, design_for(e, cfg.n), e.seed, 0,
                            m=e.path_steps, cov=e.effects)


# ---------------------------------------------------------------------------
# subcommands: each returns {path: text}


def cmd_simulate(cfg: RunConfig, args) -> dict:
    e = cfg.experiment
    if cfg.get("simulate", "output") == "stats":
        data = _dataset(cfg)
        if args.format == "json":
            rows = [dict(zip(io.STATS_COLUMNS, r)) for r in _stats_records(data)]
            return {args.out: _json_doc(cfg, "simulate", {"stats": rows})}
        return {args.out: io.stats_csv(data, _provenance(cfg, "simulate", echo_config=True))}

    i = cfg.get("simulate", "subject")
    if i >= cfg.n:
        raise ConfigError(f"[simulate] subject: {i} is out of range for n={cfg.n}")
    design = design_for(e, cfg.n)
    phi = simulate_effects(cfg.n, e.theta0, e.effects, substream(e.seed, "effects", 0))
    traj = simulate_path(get_model(e.model), phi[i], design.x0[i], design.T[i], e.path_steps,
                         substream(e.seed, "path", 0, i))
    if args.format == "json":
        body = {"subject": i, "phi": traj.phi, "t": traj.times, "x": traj.values}
        return {args.out: _json_doc(cfg, "simulate", {"trajectory": body})}
    return {args.out: io.trajectory_csv(traj, _provenance(cfg, "simulate", echo_config=True))}


def _stats_records(data):
    for i, (x0, T, U, V) in enumerate(zip(data.x0, data.T, data.U, data.V)):
        yield i, float(x0), float(T), float(U), float(V), data.mode.value, data.m


def cmd_fit(cfg: RunConfig, args) -> dict:
    e = cfg.experiment
    data = _dataset(cfg)
    fit = mle(data, e.space, starts=e.optimizer_starts, max_iter=e.optimizer_max_iter)
    info = observed_fisher(data, fit.theta)
    cov = info.covariance
    lrt = lrt_stat(data, e.theta0, e.space, starts=e.optimizer_starts, max_iter=e.optimizer_max_iter)
    record = {
        "n": data.n,
        "mu_hat": fit.theta.mu,
        "omega2_hat": fit.theta.omega2,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "fisher_mu_mu": info.matrix[0, 0],
        "fisher_mu_omega2": info.matrix[0, 1],
        "fisher_omega2_omega2": info.matrix[1, 1],
        "fisher_fallback": info.fallback_used,
        "laplace_sd_mu": math.sqrt(cov[0, 0]),
        "laplace_sd_omega2": math.sqrt(cov[1, 1]),
        "laplace_corr": cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]),
        "lrt_z2": lrt.statistic,
        "lrt_converged": lrt.converged,
    }
    nsim = cfg.get("fit", "kl_nsim")
    if nsim:
        kl, se = kl_mc(e.theta0, fit.theta, get_model(e.model), e.x0, e.T, nsim,
                       substream(e.seed, "kl"), m=e.path_steps)
        record.update(kl_mc=kl, kl_se=se)
    if args.format == "json":
        return {args.out: _json_doc(cfg, "fit", {"fit": record})}
    return {args.out: io.render_csv(("quantity", "value"), record.items(),
                                    _provenance(cfg, "fit", echo_config=True))}


def cmd_posterior(cfg: RunConfig, args) -> dict:
    e = cfg.experiment
    kind = cfg.get("posterior", "kind")
    level = cfg.get("posterior", "level")
    prior = e.prior
    if kind in ("conjugate", "dependent") and not isinstance(prior, NormalMu):
        raise ConfigError(f"[posterior] kind: {kind} needs [prior] kind = normal_mu")
    data = _dataset(cfg)
    if kind == "mcmc":
        burn = int(e.burn_in_fraction * e.mcmc_steps)
        sample = rw_metropolis(data, prior, e.space, e.mcmc_steps, seed=e.seed, burn_in=burn)
        cols = slice(0, sample.dim)
        record = {
            "kind": "mcmc",
            "mean": sample.draws[:, cols].mean(axis=0),
            "covariance": np.atleast_2d(np.cov(sample.draws[:, cols], rowvar=False)),
            "acceptance_rate": sample.acceptance_rate,
            "draws": len(sample.draws),
            "burn_in": sample.burn_in,
            "intervals": _intervals(sample, sample.dim, level),
        }
        if args.format == "csv":
            return {args.out: io.mcmc_csv(sample, _provenance(cfg, "posterior", echo_config=True))}
    else:
        if kind == "conjugate":
            post = conjugate_posterior_mu(data, prior.A, prior.B2, prior.omega2)
        elif kind == "dependent":
            post = dependent_posterior_mu(data, e.effects, prior.omega2, prior.A, prior.B2)
        else:
            post = laplace_approx(data, prior, e.space)
        record = post.to_record()
        record["intervals"] = _intervals(post, post.dim, level)
        if args.format == "csv":
            rows = [("mean_mu", post.mean_mu), ("var_mu", post.var_mu)]
            if post.dim == 2:
                rows += [("mean_omega2", post.mean[1]), ("var_omega2", post.cov[1, 1]),
                         ("cov_mu_omega2", post.cov[0, 1])]
            for name, iv in record["intervals"].items():
                rows += [(f"hpd_{name}_lo", iv["lo"]), (f"hpd_{name}_hi", iv["hi"])]
            rows.append(("fallback_used", post.fallback_used))
            return {args.out: io.render_csv(("quantity", "value"), rows,
                                            _provenance(cfg, "posterior", echo_config=True))}
    return {args.out: _json_doc(cfg, "posterior", {"posterior": record})}


def _intervals(post, dim, level):
    names = ("mu", "omega2")[:dim]
    out = {}
    for c, name in enumerate(names):
        iv = hpd_interval(post, level, component=c)
        out[name] = {"lo": iv.lo, "hi": iv.hi, "level": level}
    return out


def cmd_experiment(cfg: RunConfig, args) -> dict:
    if cfg.experiment.experiment is None:
        raise ConfigError("[run] experiment: required for the experiment subcommand")
    threads = args.threads or os.cpu_count() or 1
    result = run_experiment(cfg.experiment, threads=threads)
    prov = _provenance(cfg, "experiment", echo_config=True)
    summary = dict(result.summary)
    summary.update(_provenance(cfg, "experiment", echo_config=False), config=cfg.resolved, errors=result.errors)
    if args.format == "json":
        body = {
            "rows": [dict(zip(io.RESULT_COLUMNS, (r.experiment, r.n_or_m, r.replicate, r.metric, r.value,
                                                  r.error_flag))) for r in result.rows],
            "summary": summary,
            "curves": [dict(zip(io.CURVE_COLUMNS, c)) for c in result.curves],
        }
        return {args.out: _json_doc(cfg, "experiment", body)}
    out = {args.out: io.results_csv(result, prov), _sibling(args.out, ".summary.json"): io.render_json(summary)}
    if result.curves:
        out[_sibling(args.out, ".curves.csv")] = io.curves_csv(result, prov)
    return out


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


_DISPATCH = {"simulate": cmd_simulate, "fit": cmd_fit, "posterior": cmd_posterior, "experiment": cmd_experiment}


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = parse_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        outputs = _DISPATCH[args.command](cfg, args)
    except ConfigError as exc:
        print(f"sdelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure of the computation itself
        log.debug("computation failed", exc_info=True)
        print(f"sdelab: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        io.write_atomic(outputs)
    except OSError as exc:
        print(f"sdelab: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.format == "json":
        line = {"command": args.command, "config_hash": cfg.config_hash, "seed": cfg.seed,
                "outputs": [str(p) for p in outputs], "status": "ok"}
        print(json.dumps(line, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

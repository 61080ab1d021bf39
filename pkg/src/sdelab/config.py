"""INI-style run configuration: strict keys, typed values, defaults echoed back.

Every key belongs to a section and has a default; :func:`parse_config`
returns the resolved table (what was used, including defaults) alongside the
built :class:`~sdelab.experiments.ExperimentConfig`.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .experiments import Experiment, ExperimentConfig, check_config
from .model import DesignKind, NormalMu, ParamSpace, Theta, TruncatedNormalProduct, UniformBox, model_labels
from .paths import CovKind, EffectsCovariance


class ConfigError(ValueError):
    """Unreadable, malformed or invalid configuration; the message names the field."""


def _choice(*options):
    def parse(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"must be finite, got {text!r}")
    return v


def _positive(text):
    v = _float(text)
    if not v > 0:
        raise ValueError(f"must be positive, got {text.strip()}")
    return v


def _int(text):
    return int(text.strip())


def _nonneg_int(text):
    v = _int(text)
    if v < 0:
        raise ValueError(f"must be >= 0, got {v}")
    return v


def _pos_int(text):
    v = _int(text)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _seed(text):
    v = _nonneg_int(text)
    if v >= 2**64:
        raise ValueError("must fit in 64 bits")
    return v


def _fraction(text):
    v = _float(text)
    if not 0 <= v < 1:
        raise ValueError(f"must lie in [0, 1), got {v}")
    return v


def _level(text):
    v = _float(text)
    if not 0 < v < 1:
        raise ValueError(f"must lie in (0, 1), got {v}")
    return v


def _int_list(text):
    items = [s for s in re.split(r"[,\s]+", text.strip().strip("[]")) if s]
    if not items:
        raise ValueError("empty list")
    values = [int(s) for s in items]
    if any(v < 1 for v in values):
        raise ValueError("entries must be positive integers")
    return values


def _structures(text):
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, _, rho = item.partition(":")
        out.append((CovKind(kind.strip().lower()).value, _float(rho) if rho else 1 / 3))
    if not out:
        raise ValueError("empty list")
    return out


EXPERIMENTS = tuple(e.value for e in Experiment)

# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "experiment": (_choice("none", *EXPERIMENTS), "none"),
        "seed": (_seed, 0),
        "n": (_int_list, [10, 100]),
        "replicates": (_pos_int, 1),
    },
    "model": {
        "label": (lambda t: _choice(*model_labels())(t), "unit"),
        "path_steps": (_pos_int, 1000),
    },
    "theta": {"mu": (_float, 1.0), "omega2": (_positive, 1.0)},
    "design": {
        "kind": (_choice(*(k.value for k in DesignKind)), "constant"),
        "T": (_positive, 5.0),
        "c0": (_positive, 5.0),
        "x0": (_float, 0.0),
    },
    "effects": {"kind": (_choice(*(k.value for k in CovKind)), "iid"), "rho": (_float, 0.0)},
    "prior": {
        "kind": (_choice("normal_mu", "uniform", "truncnorm"), "normal_mu"),
        "A": (_float, 0.0),
        "B2": (_positive, 2.25),
        "omega2": (_positive, 1.0),
        "a_w": (_float, 1.0),
        "b_w": (_positive, 100.0),
    },
    "space": {
        "mu_lo": (_float, -10.0),
        "mu_hi": (_float, 10.0),
        "omega2_lo": (_positive, 1e-3),
        "omega2_hi": (_positive, 100.0),
    },
    "mcmc": {
        "steps": (_pos_int, 125_000),
        "burn_in_fraction": (_fraction, 0.2),
        "sampler": (_choice("mcmc", "exact_normal"), "mcmc"),
    },
    "optimizer": {"starts": (_pos_int, 5), "max_iter": (_pos_int, 500)},
    "consistency": {"delta": (_positive, 0.1)},
    "discretization": {"m_grid": (_int_list, [100, 1000, 10_000]), "m_ref": (_pos_int, 1_000_000)},
    "dependence": {
        "structures": (_structures, [("tridiagonal", 1 / 3), ("compound", 1 / 3)]),
        "curve_points": (_pos_int, 301),
    },
    "posterior": {
        "kind": (_choice("conjugate", "dependent", "laplace", "mcmc"), "conjugate"),
        "level": (_level, 0.95),
    },
    "fit": {"kl_nsim": (_nonneg_int, 0)},
    "simulate": {"output": (_choice("stats", "trajectory"), "stats"), "subject": (_nonneg_int, 0)},
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs: the experiment config plus per-subcommand options."""

    experiment: ExperimentConfig
    resolved: dict
    source: str

    def get(self, section: str, key: str):
        return self.resolved[section][key]

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def n(self) -> int:
        """Sample size for single-dataset subcommands: the largest in ``[run] n``."""
        return self.experiment.sizes[-1]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> RunConfig:
        resolved = json.loads(json.dumps(self.resolved))
        resolved["run"]["seed"] = seed
        return RunConfig(replace(self.experiment, seed=seed), resolved, self.source)


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            lines.setdefault((section, key), no)
    return lines


def _where(lines, section, key):
    no = lines.get((section, key))
    return f"[{section}] {key}" + (f" (line {no})" if no else "")


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case: T, A, B2
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: key outside any [section]") from None
    except configparser.ParsingError as exc:
        where = "; ".join(f"line {no}: cannot parse {line}" for no, line in exc.errors)
        raise ConfigError(f"{source}: {where}") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"{source}: line {exc.lineno}: {exc.message.split(': ', 1)[-1]}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{source}: cannot parse: {exc}") from None
    lines = _key_lines(text)

    unknown_sections = [s for s in cp.sections() if s not in SCHEMA]
    if unknown_sections:
        raise ConfigError(f"{source}: unknown section(s): {', '.join(unknown_sections)}")
    unknown = [
        _where(lines, s, k) for s in cp.sections() for k in cp[s] if k not in SCHEMA[s]
    ]
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")

    resolved = {}
    for section, keys in SCHEMA.items():
        resolved[section] = {}
        for key, (parse, default) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    value = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: {_where(lines, section, key)}: {exc}") from None
            else:
                value = default
            resolved[section][key] = value
    resolved["dependence"]["structures"] = [list(s) for s in resolved["dependence"]["structures"]]
    return RunConfig(_build(resolved, lines, source), resolved, source)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, str(path))


def _build(r: dict, lines, source) -> ExperimentConfig:
    def fail(section, key, msg):
        raise ConfigError(f"{source}: {_where(lines, section, key)}: {msg}")

    sizes = r["run"]["n"]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        fail("run", "n", "sample sizes must be strictly increasing")
    sp = r["space"]
    if not sp["mu_lo"] < sp["mu_hi"]:
        fail("space", "mu_hi", "must exceed mu_lo")
    if not sp["omega2_lo"] < sp["omega2_hi"]:
        fail("space", "omega2_hi", "must exceed omega2_lo")
    space = ParamSpace(**sp)

    theta = Theta(r["theta"]["mu"], r["theta"]["omega2"])
    pr = r["prior"]
    if pr["kind"] == "normal_mu":
        prior = NormalMu(pr["A"], pr["B2"], pr["omega2"])
    elif pr["kind"] == "uniform":
        prior = UniformBox()
    else:
        prior = TruncatedNormalProduct(pr["A"], pr["B2"], pr["a_w"], pr["b_w"])

    eff = r["effects"]
    if eff["kind"] == "tridiagonal" and not abs(eff["rho"]) < 0.5:
        fail("effects", "rho", "tridiagonal needs |rho| < 1/2")
    if eff["kind"] == "compound" and not 0 <= eff["rho"] < 1:
        fail("effects", "rho", "compound symmetry needs 0 <= rho < 1")

    disc = r["discretization"]
    bad = [m for m in disc["m_grid"] if disc["m_ref"] % m]
    if bad:
        fail("discretization", "m_grid", f"entries {bad} do not divide m_ref={disc['m_ref']}")

    exp = r["run"]["experiment"]
    try:
        cfg = ExperimentConfig(
            experiment=None if exp == "none" else Experiment(exp),
            model=r["model"]["label"],
            theta0=theta,
            design=DesignKind(r["design"]["kind"]),
            T=r["design"]["T"],
            c0=r["design"]["c0"],
            x0=r["design"]["x0"],
            sizes=tuple(sizes),
            replicates=r["run"]["replicates"],
            seed=r["run"]["seed"],
            prior=prior,
            space=space,
            effects=EffectsCovariance(CovKind(eff["kind"]), eff["rho"]),
            path_steps=r["model"]["path_steps"],
            mcmc_steps=r["mcmc"]["steps"],
            burn_in_fraction=r["mcmc"]["burn_in_fraction"],
            optimizer_starts=r["optimizer"]["starts"],
            optimizer_max_iter=r["optimizer"]["max_iter"],
            level=r["posterior"]["level"],
            delta=r["consistency"]["delta"],
            sampler=r["mcmc"]["sampler"],
            m_grid=tuple(disc["m_grid"]),
            m_ref=disc["m_ref"],
            structures=tuple(EffectsCovariance(CovKind(k), rho) for k, rho in r["dependence"]["structures"]),
            curve_points=r["dependence"]["curve_points"],
        )
        check_config(cfg)
        return cfg
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None

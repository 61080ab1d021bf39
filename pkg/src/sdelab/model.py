"""Model, parameter space, priors and designs for SDE random-effects models.

The models handled here have the form

    dX_i(t) = phi_i * b(X_i(t)) dt + sigma(X_i(t)) dW_i(t),   phi_i ~ N(mu, omega2)

on [0, T_i] with X_i(0) = x0_i.  The population parameter is theta = (mu, omega2).
"""

from __future__ import annotations

import enum
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class Family(enum.Enum):
    UNIT = "unit"
    GENERAL_LINEAR_DRIFT = "general"


def _one(x):
    return np.ones_like(x, dtype=float) if np.ndim(x) else 1.0


def _identity(x):
    return np.asarray(x, dtype=float) if np.ndim(x) else float(x)


def _negate(x):
    return -np.asarray(x, dtype=float) if np.ndim(x) else -float(x)


@dataclass(frozen=True)
class ModelSpec:
    """Drift base ``b`` and diffusion ``sigma`` of a linear-in-effect SDE.

    ``affine`` optionally records ``(a, c)`` with ``b(x) = a*x + c`` and
    ``const_sigma`` a constant diffusion; when both are set the path simulator
    can run the Euler recursion as a linear filter instead of a Python loop.
    """

    family: Family
    b: Callable
    sigma: Callable
    label: str
    affine: tuple[float, float] | None = None
    const_sigma: float | None = None

    @property
    def is_unit(self) -> bool:
        return self.family is Family.UNIT


UNIT_MODEL = ModelSpec(Family.UNIT, _one, _one, "unit", affine=(0.0, 1.0), const_sigma=1.0)

_MODELS: dict[str, ModelSpec] = {
    "unit": UNIT_MODEL,
    "linear": ModelSpec(
        Family.GENERAL_LINEAR_DRIFT, _identity, _one, "linear", affine=(1.0, 0.0), const_sigma=1.0
    ),
    "ou": ModelSpec(
        Family.GENERAL_LINEAR_DRIFT, _negate, _one, "ou", affine=(-1.0, 0.0), const_sigma=1.0
    ),
}


def register_model(spec: ModelSpec) -> None:
    """Make ``spec`` addressable by its label from config files."""
    if spec.label in _MODELS:
        raise ValueError(f"model label {spec.label!r} already registered")
    _MODELS[spec.label] = spec


def get_model(label: str) -> ModelSpec:
    try:
        return _MODELS[label]
    except KeyError:
        raise KeyError(f"unknown model {label!r}; known: {sorted(_MODELS)}") from None


def model_labels() -> list[str]:
    return sorted(_MODELS)


@dataclass(frozen=True)
class Theta:
    mu: float
    omega2: float

    def __post_init__(self):
        if not (self.omega2 > 0 and math.isfinite(self.omega2)):
            raise ValueError(f"omega2 must be a positive finite number, got {self.omega2}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu, self.omega2])


@dataclass(frozen=True)
class ParamSpace:
    """Closed box [mu_lo, mu_hi] x [omega2_lo, omega2_hi]."""

    mu_lo: float = -10.0
    mu_hi: float = 10.0
    omega2_lo: float = 1e-3
    omega2_hi: float = 100.0

    def __post_init__(self):
        if not self.mu_lo < self.mu_hi:
            raise ValueError("mu_lo must be < mu_hi")
        if not 0 < self.omega2_lo < self.omega2_hi:
            raise ValueError("need 0 < omega2_lo < omega2_hi")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.mu_lo, self.omega2_lo])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.mu_hi, self.omega2_hi])

    @property
    def center(self) -> Theta:
        return Theta(0.5 * (self.mu_lo + self.mu_hi), 0.5 * (self.omega2_lo + self.omega2_hi))

    @property
    def log_volume(self) -> float:
        return math.log(self.mu_hi - self.mu_lo) + math.log(self.omega2_hi - self.omega2_lo)


def validate_theta(theta: Theta, space: ParamSpace) -> bool:
    return (
        space.mu_lo <= theta.mu <= space.mu_hi
        and space.omega2_lo <= theta.omega2 <= space.omega2_hi
    )


def _check_inside(mu: float, omega2: float, space: ParamSpace) -> bool:
    return space.mu_lo <= mu <= space.mu_hi and space.omega2_lo <= omega2 <= space.omega2_hi


@dataclass(frozen=True)
class NormalMu:
    """N(A, B2) prior on mu with omega2 held fixed at a known value."""

    A: float = 0.0
    B2: float = 2.25
    omega2: float = 1.0

    def __post_init__(self):
        if not self.B2 > 0:
            raise ValueError("B2 must be positive")
        if not self.omega2 > 0:
            raise ValueError("omega2 must be positive")

    def log_density(self, mu: float, omega2: float, space: ParamSpace) -> float:
        return -0.5 * math.log(2 * math.pi * self.B2) - 0.5 * (mu - self.A) ** 2 / self.B2


@dataclass(frozen=True)
class UniformBox:
    def log_density(self, mu: float, omega2: float, space: ParamSpace) -> float:
        if not _check_inside(mu, omega2, space):
            return -math.inf
        return -space.log_volume


@dataclass(frozen=True)
class TruncatedNormalProduct:
    """Independent truncated normals on mu and omega2, both restricted to the box.

    ``B2`` and ``b_w`` are variances of the untruncated normals.
    """

    A: float = 0.0
    B2: float = 100.0
    a_w: float = 1.0
    b_w: float = 100.0

    def __post_init__(self):
        if not (self.B2 > 0 and self.b_w > 0):
            raise ValueError("B2 and b_w must be positive")

    def log_density(self, mu: float, omega2: float, space: ParamSpace) -> float:
        if not _check_inside(mu, omega2, space):
            return -math.inf
        return _trunc_logpdf(mu, self.A, self.B2, space.mu_lo, space.mu_hi) + _trunc_logpdf(
            omega2, self.a_w, self.b_w, space.omega2_lo, space.omega2_hi
        )


def _trunc_logpdf(x, mean, var, lo, hi):
    sd = math.sqrt(var)
    a, b = (lo - mean) / sd, (hi - mean) / sd
    mass = special.ndtr(b) - special.ndtr(a)
    if mass <= 0:
        # both bounds deep in one tail
        mass = special.ndtr(-a) - special.ndtr(-b)
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd * math.sqrt(2 * math.pi) * mass)


Prior = NormalMu | UniformBox | TruncatedNormalProduct


def prior_log_density(prior: Prior, theta: Theta, space: ParamSpace) -> float:
    """Log prior density at ``theta``; ``-inf`` off the support.

    ``NormalMu`` ignores ``theta.omega2`` and the box.
    """
    return prior.log_density(theta.mu, theta.omega2, space)


class DesignKind(enum.Enum):
    CONSTANT = "constant"
    HARMONIC = "harmonic"
    SQUARE = "square"


@dataclass(frozen=True, eq=False)
class Design:
    x0: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        T = np.asarray(self.T, dtype=float)
        if x0.shape != T.shape or x0.ndim != 1:
            raise ValueError("x0 and T must be 1-d arrays of equal length")
        if len(T) < 1:
            raise ValueError("design needs at least one subject")
        if not np.all(T > 0):
            raise ValueError("all horizons T_i must be positive")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "T", T)

    @property
    def n(self) -> int:
        return len(self.T)

    def head(self, n: int) -> Design:
        return Design(self.x0[:n], self.T[:n])


def design_sequence(kind: DesignKind | str, n: int, x0: float = 0.0, T: float = 5.0, c0: float = 5.0) -> Design:
    """Horizons for the three reference designs.

    ``constant`` sets every T_i = T.  ``harmonic`` and ``square`` set T_1 = c0 and
    choose T_i (i > 1) so that T_i / (1 + T_i) equals 1/i and 1/i**2 respectively.
    """
    kind = DesignKind(kind)
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind is DesignKind.CONSTANT:
        if not T > 0:
            raise ValueError("T must be positive")
        horizons = np.full(n, float(T))
    else:
        if not c0 > 0:
            raise ValueError("c0 must be positive")
        i = np.arange(2, n + 1, dtype=float)
        tail = 1.0 / (i - 1.0) if kind is DesignKind.HARMONIC else 1.0 / (i * i - 1.0)
        horizons = np.concatenate([[float(c0)], tail])
    return Design(np.full(n, float(x0)), horizons)

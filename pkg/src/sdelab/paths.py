"""Random effects, Euler-Maruyama paths and the sufficient statistics (U, V)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.signal import lfilter

from .model import Design, ModelSpec, Theta
from .rng import substream


class SimulationError(RuntimeError):
    """Non-finite state or vanishing diffusion during simulation."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    x0: float
    phi: float
    increments: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])


class StatsMode(enum.Enum):
    EXACT = "exact"
    DISCRETIZED = "discretized"


@dataclass(frozen=True)
class SuffStats:
    U: float
    V: float
    T: float
    x0: float = 0.0
    mode: StatsMode = StatsMode.EXACT
    m: int | None = None

    def __post_init__(self):
        if not self.V >= 0:
            raise ValueError(f"V must be nonnegative, got {self.V}")


# ---------------------------------------------------------------------------
# random effects


class CovKind(enum.Enum):
    IID = "iid"
    TRIDIAGONAL = "tridiagonal"
    COMPOUND = "compound"


@dataclass(frozen=True)
class EffectsCovariance:
    """Correlation structure Sigma_n of the random-effects vector.

    ``tridiagonal`` puts ``rho`` on the first off-diagonals (positive definite
    for every n when |rho| < 1/2); ``compound`` puts ``rho`` everywhere off the
    diagonal (positive definite for every n when 0 <= rho < 1).
    """

    kind: CovKind = CovKind.IID
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CovKind(self.kind))

    def matrix(self, n: int) -> np.ndarray:
        return covariance_matrix(self, n)


IID = EffectsCovariance()


def covariance_matrix(cov: EffectsCovariance, n: int) -> np.ndarray:
    if cov.kind is CovKind.IID:
        return np.eye(n)
    if cov.kind is CovKind.TRIDIAGONAL:
        S = np.eye(n)
        idx = np.arange(n - 1)
        S[idx, idx + 1] = cov.rho
        S[idx + 1, idx] = cov.rho
        return S
    S = np.full((n, n), float(cov.rho))
    np.fill_diagonal(S, 1.0)
    return S


@lru_cache(maxsize=16)
def _cholesky(cov: EffectsCovariance, n: int) -> np.ndarray:
    try:
        L = np.linalg.cholesky(covariance_matrix(cov, n))
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            f"{cov.kind.value} covariance with rho={cov.rho} is not positive definite for n={n}"
        ) from None
    L.setflags(write=False)
    return L


def sample_effects_iid(n: int, theta: Theta, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return theta.mu + math.sqrt(theta.omega2) * rng.standard_normal(n)


def sample_effects_dependent(
    n: int, mu: float, omega2: float, cov: EffectsCovariance, rng: np.random.Generator
) -> np.ndarray:
    """One draw of phi ~ N_n(mu 1, omega2 Sigma_n) through the Cholesky factor.

    The standard-normal draws are consumed exactly as in
    :func:`sample_effects_iid`, so Sigma_n = I reproduces it bit for bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal(n)
    if cov.kind is not CovKind.IID:
        z = _cholesky(cov, n) @ z
    return mu + math.sqrt(omega2) * z


# ---------------------------------------------------------------------------
# paths


def brownian_increments(T: float, m: int, rng: np.random.Generator) -> np.ndarray:
    return math.sqrt(T / m) * rng.standard_normal(m)


def coarsen_increments(increments: np.ndarray, m: int) -> np.ndarray:
    """Sum consecutive blocks of fine Wiener increments down to ``m`` steps."""
    M = len(increments)
    if m < 1 or M % m:
        raise ValueError(f"coarse step count {m} must divide fine step count {M}")
    return increments.reshape(m, M // m).sum(axis=1)


def simulate_path(
    model: ModelSpec,
    phi: float,
    x0: float,
    T: float,
    m: int,
    rng: np.random.Generator | None = None,
    increments: np.ndarray | None = None,
) -> Trajectory:
    """Euler-Maruyama path on a uniform grid of ``m`` steps over [0, T].

    Pass ``increments`` (the Wiener increments, length ``m``) to drive the
    scheme with given noise, e.g. zeros or blocks summed from a finer path;
    otherwise they are drawn from ``rng``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not T > 0:
        raise ValueError("T must be positive")
    h = T / m
    if increments is None:
        if rng is None:
            raise ValueError("need rng or increments")
        increments = brownian_increments(T, m, rng)
    else:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (m,):
            raise ValueError(f"increments must have shape ({m},)")
    times = np.linspace(0.0, T, m + 1)

    values = np.empty(m + 1)
    values[0] = x0
    if model.affine is not None and model.const_sigma is not None:
        if not model.const_sigma > 0:
            raise SimulationError("diffusion must be positive", step=0)
        a, c = model.affine
        gain = 1.0 + phi * a * h
        drive = phi * c * h + model.const_sigma * increments
        with np.errstate(over="ignore", invalid="ignore"):
            values[1:] = lfilter([1.0], [1.0, -gain], drive, zi=[gain * x0])[0]
    else:
        x = float(x0)
        for k in range(m):
            s = model.sigma(x)
            if not s > 0:
                raise SimulationError("diffusion must be positive along the path", step=k)
            x = x + phi * model.b(x) * h + s * increments[k]
            values[k + 1] = x
            if not math.isfinite(x):
                break
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise SimulationError("state blew up", step=int(bad[0]))
    return Trajectory(times, values, float(x0), float(phi), increments)


# ---------------------------------------------------------------------------
# sufficient statistics


def suff_stats_exact_unit(phi: float, T: float, W_T: float, x0: float = 0.0) -> SuffStats:
    """U = phi*T + W(T), V = T for the unit model b = sigma = 1."""
    if not T > 0:
        raise ValueError("T must be positive")
    return SuffStats(phi * T + W_T, float(T), float(T), x0, StatsMode.EXACT)


def suff_stats_discretized(traj: Trajectory, model: ModelSpec) -> SuffStats:
    """Left-endpoint sums for U and V along the observed grid.

    U^m = sum b(X_k)/sigma^2(X_k) (X_{k+1} - X_k),
    V^m = sum b^2(X_k)/sigma^2(X_k) (t_{k+1} - t_k).
    Sums are exactly rounded, so the unit model gives V^m == T bit for bit.
    """
    x = traj.values[:-1]
    s2 = np.asarray(model.sigma(x), dtype=float) ** 2 * np.ones_like(x)
    zero = np.flatnonzero(s2 == 0)
    if zero.size:
        raise SimulationError("zero diffusion in discretized statistics", step=int(zero[0]))
    b = np.asarray(model.b(x), dtype=float) * np.ones_like(x)
    w = b / s2
    U = math.fsum(w * np.diff(traj.values))
    V = math.fsum(w * b * np.diff(traj.times))
    return SuffStats(U, V, traj.T, traj.x0, StatsMode.DISCRETIZED, traj.m)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-subject statistics (U_i, V_i) with the design they came from.

    The marginal likelihood only sees (U_i, V_i); subjects sharing a value of
    V_i can be pooled, which :attr:`groups` does once per dataset.
    """

    U: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    T: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    mode: StatsMode = StatsMode.EXACT
    m: int | None = None

    def __post_init__(self):
        arrs = [np.array(a, dtype=float).reshape(-1) for a in (self.U, self.V, self.T, self.x0)]
        if len({len(a) for a in arrs}) != 1:
            raise ValueError("U, V, T, x0 must have equal length")
        if np.any(arrs[1] < 0):
            raise ValueError("V must be nonnegative")
        for name, a in zip(("U", "V", "T", "x0"), arrs):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_stats(cls, stats: list[SuffStats]) -> Dataset:
        if not stats:
            return cls.empty()
        modes = {s.mode for s in stats}
        ms = {s.m for s in stats}
        return cls(
            [s.U for s in stats],
            [s.V for s in stats],
            [s.T for s in stats],
            [s.x0 for s in stats],
            modes.pop() if len(modes) == 1 else StatsMode.DISCRETIZED,
            ms.pop() if len(ms) == 1 else None,
        )

    @classmethod
    def empty(cls) -> Dataset:
        return cls([], [], [], [])

    @property
    def n(self) -> int:
        return len(self.U)

    def __len__(self) -> int:
        return self.n

    @property
    def stats(self) -> list[SuffStats]:
        return [
            SuffStats(float(u), float(v), float(t), float(x), self.mode, self.m)
            for u, v, t, x in zip(self.U, self.V, self.T, self.x0)
        ]

    @property
    def design(self) -> Design:
        return Design(self.x0, self.T)

    def head(self, n: int) -> Dataset:
        return Dataset(self.U[:n], self.V[:n], self.T[:n], self.x0[:n], self.mode, self.m)

    def take(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.U[index], self.V[index], self.T[index], self.x0[index], self.mode, self.m)

    @cached_property
    def groups(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(V value, count, mean of U, centred sum of squares of U) per distinct V."""
        if self.n == 0:
            z = np.zeros(0)
            return z, z, z, z
        v, inv, counts = np.unique(self.V, return_inverse=True, return_counts=True)
        sums = np.bincount(inv, weights=self.U, minlength=len(v))
        means = sums / counts
        dev = self.U - means[inv]
        css = np.bincount(inv, weights=dev * dev, minlength=len(v))
        return v, counts.astype(float), means, css


def simulate_effects(n: int, theta: Theta, cov: EffectsCovariance, rng) -> np.ndarray:
    if cov.kind is CovKind.IID:
        return sample_effects_iid(n, theta, rng)
    return sample_effects_dependent(n, theta.mu, theta.omega2, cov, rng)


def simulate_dataset(
    model: ModelSpec,
    theta: Theta,
    design: Design,
    seed: int,
    replicate: int = 0,
    *,
    exact: bool | None = None,
    m: int = 1000,
    cov: EffectsCovariance = IID,
) -> Dataset:
    """Draw effects and data for every subject of ``design``.

    The unit model defaults to exact statistics (W(T_i) ~ N(0, T_i) drawn
    directly); other models simulate an ``m``-step path per subject, each from
    its own stream keyed by (seed, replicate, subject).  A dataset for a
    design's first k subjects is the prefix of the dataset for the full design.
    """
    if exact is None:
        exact = model.is_unit
    if exact and not model.is_unit:
        raise ValueError("exact statistics are only available for the unit model")
    n = design.n
    phi = simulate_effects(n, theta, cov, substream(seed, "effects", replicate))
    if exact:
        W = np.sqrt(design.T) * substream(seed, "wiener", replicate).standard_normal(n)
        U = phi * design.T + W
        return Dataset(U, design.T, design.T, design.x0, StatsMode.EXACT)
    stats = []
    for i in range(n):
        traj = simulate_path(
            model, phi[i], design.x0[i], design.T[i], m, substream(seed, "path", replicate, i)
        )
        stats.append(suff_stats_discretized(traj, model))
    return Dataset.from_stats(stats)

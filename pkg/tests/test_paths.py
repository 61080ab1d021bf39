import math

import numpy as np
import pytest

from sdelab.model import UNIT_MODEL, Family, ModelSpec, Theta, design_sequence, get_model
from sdelab.paths import (
    IID,
    CovKind,
    Dataset,
    EffectsCovariance,
    NotPositiveDefiniteError,
    SimulationError,
    StatsMode,
    Trajectory,
    coarsen_increments,
    sample_effects_dependent,
    sample_effects_iid,
    simulate_dataset,
    simulate_path,
    suff_stats_discretized,
    suff_stats_exact_unit,
)
from sdelab.rng import derive_seed, substream

LINEAR = get_model("linear")
TRI = EffectsCovariance(CovKind.TRIDIAGONAL, 1 / 3)
CS = EffectsCovariance(CovKind.COMPOUND, 1 / 3)


def test_substreams_reproducible_and_distinct():
    a = substream(5, "x", 1).standard_normal(4)
    np.testing.assert_array_equal(a, substream(5, "x", 1).standard_normal(4))
    assert not np.array_equal(a, substream(5, "x", 2).standard_normal(4))
    assert not np.array_equal(a, substream(6, "x", 1).standard_normal(4))
    assert derive_seed(5, "a") == derive_seed(5, "a") != derive_seed(5, "b")
    assert 0 <= derive_seed(2**64 - 1, "a") < 2**63


# ---------------------------------------------------------------------------
# effects


def test_iid_effects_tiny_variance():
    phi = sample_effects_iid(3, Theta(2.0, 1e-12), substream(0))
    assert np.all(np.abs(phi - 2.0) < 1e-5)


def test_iid_effects_moments():
    phi = sample_effects_iid(10**5, Theta(1, 1), substream(1))
    assert abs(phi.mean() - 1) < 4 / math.sqrt(1e5)
    phi = sample_effects_iid(10**5, Theta(0, 4), substream(2))
    assert abs(phi.var() - 4) < 0.2


def test_effects_reject_empty():
    with pytest.raises(ValueError):
        sample_effects_iid(0, Theta(0, 1), substream(0))
    with pytest.raises(ValueError):
        sample_effects_dependent(0, 0, 1, TRI, substream(0))


def test_dependent_iid_matches_iid_bitwise():
    a = sample_effects_dependent(20, 1.0, 2.0, IID, substream(9))
    b = sample_effects_iid(20, Theta(1.0, 2.0), substream(9))
    np.testing.assert_array_equal(a, b)
    for cov in (EffectsCovariance(CovKind.COMPOUND, 0.0), EffectsCovariance(CovKind.TRIDIAGONAL, 0.0)):
        np.testing.assert_array_equal(sample_effects_dependent(20, 1.0, 2.0, cov, substream(9)), b)


def _corr(cov, n, i, j, reps=10**4):
    rng = substream(4, cov.kind.value, n)
    draws = np.array([sample_effects_dependent(n, 0.0, 1.0, cov, rng) for _ in range(reps)])
    return np.corrcoef(draws[:, i], draws[:, j])[0, 1]


def test_dependent_correlations():
    assert abs(_corr(IID, 5, 0, 1)) < 0.05
    assert abs(_corr(TRI, 2, 0, 1) - 1 / 3) < 0.05
    assert abs(_corr(CS, 50, 0, 49) - 1 / 3) < 0.05


@pytest.mark.parametrize("n", [2, 10, 500])
def test_structures_positive_definite(n):
    for cov in (TRI, CS, EffectsCovariance(CovKind.TRIDIAGONAL, -0.49), EffectsCovariance(CovKind.COMPOUND, 0.95)):
        assert np.linalg.eigvalsh(cov.matrix(n)).min() > 0


def test_not_positive_definite_signalled():
    bad = EffectsCovariance(CovKind.TRIDIAGONAL, 0.9)
    with pytest.raises(NotPositiveDefiniteError):
        sample_effects_dependent(10, 0, 1, bad, substream(0))


# ---------------------------------------------------------------------------
# paths


def test_zero_noise_unit_paths():
    tr = simulate_path(UNIT_MODEL, 0.0, 1.5, 5.0, 10, increments=np.zeros(10))
    np.testing.assert_array_equal(tr.values, 1.5)
    for m in (1, 7, 1000):
        tr = simulate_path(UNIT_MODEL, 1.0, 0.25, 5.0, m, increments=np.zeros(m))
        assert tr.values[-1] == pytest.approx(5.25, abs=1e-12)


def test_trajectory_shape():
    tr = simulate_path(LINEAR, 0.3, 2.0, 1.0, 8, substream(0))
    assert isinstance(tr, Trajectory)
    assert len(tr.times) == len(tr.values) == 9 and tr.m == 8
    assert tr.times[0] == 0 and tr.values[0] == 2.0 and tr.T == 1.0
    assert np.all(np.diff(tr.times) > 0)


def test_unit_terminal_moments():
    rng = substream(11)
    xT = np.array([simulate_path(UNIT_MODEL, 1.0, 0.0, 5.0, 50, rng).values[-1] for _ in range(10**4)])
    assert abs(xT.mean() - 5) < 4 * math.sqrt(5 / 1e4)
    assert abs(xT.var() - 5) < 0.3


def test_affine_fast_path_matches_loop():
    # same model without the affine tag forces the generic Euler loop
    generic = ModelSpec(Family.GENERAL_LINEAR_DRIFT, lambda x: -0.5 * x + 2.0, lambda x: 0.7 + 0 * x, "generic")
    affine = ModelSpec(Family.GENERAL_LINEAR_DRIFT, generic.b, generic.sigma, "affine", affine=(-0.5, 2.0), const_sigma=0.7)
    dW = math.sqrt(3.0 / 400) * substream(2).standard_normal(400)
    a = simulate_path(affine, 1.3, 0.4, 3.0, 400, increments=dW)
    b = simulate_path(generic, 1.3, 0.4, 3.0, 400, increments=dW)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-12, atol=1e-12)


def test_blow_up_reports_step():
    with pytest.raises(SimulationError) as err:
        simulate_path(LINEAR, 1e4, 1.0, 10.0, 200, increments=np.zeros(200))
    assert err.value.step is not None and 0 < err.value.step <= 200


def test_zero_diffusion_rejected():
    flat = ModelSpec(Family.GENERAL_LINEAR_DRIFT, lambda x: x, lambda x: 0.0 * x, "flat")
    with pytest.raises(SimulationError):
        simulate_path(flat, 1.0, 1.0, 1.0, 5, substream(0))


def test_simulate_path_rejects_bad_args():
    with pytest.raises(ValueError):
        simulate_path(UNIT_MODEL, 1, 0, 1.0, 0, substream(0))
    with pytest.raises(ValueError):
        simulate_path(UNIT_MODEL, 1, 0, 0.0, 5, substream(0))
    with pytest.raises(ValueError):
        simulate_path(UNIT_MODEL, 1, 0, 1.0, 5, increments=np.zeros(4))


def test_coarsen_increments():
    dW = np.arange(12.0)
    np.testing.assert_array_equal(coarsen_increments(dW, 3), [6, 22, 38])
    with pytest.raises(ValueError):
        coarsen_increments(dW, 5)


# ---------------------------------------------------------------------------
# statistics


@pytest.mark.parametrize("phi, T, W, expected", [(1, 5, 0, (5, 5)), (0, 5, -0.5, (-0.5, 5)), (2, 0.5, 0.25, (1.25, 0.5))])
def test_exact_unit_examples(phi, T, W, expected):
    s = suff_stats_exact_unit(phi, T, W)
    assert (s.U, s.V) == expected and s.mode is StatsMode.EXACT
    with pytest.raises(ValueError):
        suff_stats_exact_unit(phi, 0.0, W)


def test_discretized_hand_example():
    tr = Trajectory(np.array([0, 0.5, 1.0]), np.array([0.0, 1.0, 2.0]), 0.0, 0.0, np.zeros(2))
    s = suff_stats_discretized(tr, LINEAR)
    assert (s.U, s.V) == (1.0, 0.5) and s.m == 2 and s.mode is StatsMode.DISCRETIZED


@pytest.mark.parametrize("seed", range(20))
def test_unit_pipeline_identity(seed):
    rng = substream(seed, "pipe")
    T = float(rng.uniform(0.1, 9.0))
    m = int(rng.integers(1, 3000))
    phi, x0 = rng.normal(), rng.normal()
    tr = simulate_path(UNIT_MODEL, phi, x0, T, m, rng)
    s = suff_stats_discretized(tr, UNIT_MODEL)
    exact = suff_stats_exact_unit(phi, T, tr.values[-1] - x0 - phi * T, x0)
    assert s.V == exact.V == T
    assert abs(s.U - exact.U) < 1e-12


def test_unit_U_constant_under_refinement():
    dW = math.sqrt(5 / 10**4) * substream(3).standard_normal(10**4)
    Us = [suff_stats_discretized(simulate_path(UNIT_MODEL, 0.7, 0.0, 5.0, m, increments=coarsen_increments(dW, m)), UNIT_MODEL).U
          for m in (10, 100, 1000, 10**4)]
    assert max(Us) - min(Us) < 1e-12


def test_linear_discretization_converges_on_shared_path():
    M = 10**6
    dW = math.sqrt(1 / M) * substream(8).standard_normal(M)
    ref = suff_stats_discretized(simulate_path(LINEAR, 0.2, 1.0, 1.0, M, increments=dW), LINEAR)
    errs = []
    for m in (10**2, 10**3, 10**4):
        s = suff_stats_discretized(simulate_path(LINEAR, 0.2, 1.0, 1.0, m, increments=coarsen_increments(dW, m)), LINEAR)
        errs.append((abs(s.U - ref.U), abs(s.V - ref.V)))
    assert errs[0][0] > errs[1][0] > errs[2][0]
    assert errs[0][1] > errs[1][1] > errs[2][1]


def test_discretized_V_nonnegative():
    rng = substream(1)
    for _ in range(20):
        s = suff_stats_discretized(simulate_path(get_model("ou"), rng.normal(), rng.normal(), 2.0, 50, rng), get_model("ou"))
        assert s.V >= 0


# ---------------------------------------------------------------------------
# datasets


def test_dataset_validation_and_groups():
    with pytest.raises(ValueError):
        Dataset([1, 2], [1], [1, 1], [0, 0])
    with pytest.raises(ValueError):
        Dataset([1], [-1], [1], [0])
    d = Dataset([1.0, 3.0, 2.0], [5, 5, 1], [5, 5, 1], [0, 0, 0])
    v, k, ub, css = d.groups
    np.testing.assert_array_equal(v, [1, 5])
    np.testing.assert_array_equal(k, [1, 2])
    np.testing.assert_allclose(ub, [2, 2])
    np.testing.assert_allclose(css, [0, 2])
    with pytest.raises(ValueError):
        d.U[0] = 9.0


def test_dataset_roundtrip_stats():
    d = Dataset([1.0, 2.0], [5, 5], [5, 5], [0, 1])
    assert Dataset.from_stats(d.stats).U.tolist() == [1.0, 2.0]
    assert Dataset.from_stats([]).n == 0
    assert d.take([1]).x0.tolist() == [1.0]


def test_simulate_dataset_prefix_and_determinism():
    design = design_sequence("constant", 30)
    full = simulate_dataset(UNIT_MODEL, Theta(1, 1), design, seed=4, replicate=2)
    part = simulate_dataset(UNIT_MODEL, Theta(1, 1), design.head(10), seed=4, replicate=2)
    np.testing.assert_array_equal(full.U[:10], part.U)
    again = simulate_dataset(UNIT_MODEL, Theta(1, 1), design, seed=4, replicate=2)
    np.testing.assert_array_equal(full.U, again.U)
    other = simulate_dataset(UNIT_MODEL, Theta(1, 1), design, seed=4, replicate=3)
    assert not np.array_equal(full.U, other.U)
    assert full.mode is StatsMode.EXACT and np.all(full.V == 5.0)


def test_simulate_dataset_path_mode():
    design = design_sequence("constant", 4, T=1.0, x0=0.5)
    d = simulate_dataset(LINEAR, Theta(0.2, 0.1), design, seed=1, m=50)
    assert d.mode is StatsMode.DISCRETIZED and d.m == 50
    prefix = simulate_dataset(LINEAR, Theta(0.2, 0.1), design.head(2), seed=1, m=50)
    np.testing.assert_array_equal(d.U[:2], prefix.U)
    with pytest.raises(ValueError):
        simulate_dataset(LINEAR, Theta(0.2, 0.1), design, seed=1, exact=True)

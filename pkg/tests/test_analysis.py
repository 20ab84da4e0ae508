import math

import numpy as np
import pytest

from dicode.analysis import (
    DiscreteDesignSpace,
    adjacency_test,
    brute_force_objective,
    compare_runs,
    final_smoothed,
    grid_search_optimum,
    occupancy_frequency,
    simplex_grid,
    soft_codesign_exact,
)


def test_space_validation():
    with pytest.raises(ValueError):
        DiscreteDesignSpace([], [])
    with pytest.raises(ValueError):
        DiscreteDesignSpace(["a"], [1.0, 2.0])
    with pytest.raises(ValueError):
        DiscreteDesignSpace.from_returns([0.0, np.inf])


def test_equal_returns_give_uniform():
    np.testing.assert_allclose(soft_codesign_exact(DiscreteDesignSpace.from_returns([2.0] * 5), 3.0), np.full(5, 0.2))


def test_small_omega_approaches_uniform():
    p = soft_codesign_exact([0.0, 1.0, 5.0, -3.0], 1e-8)
    assert np.abs(p - 0.25).max() <= 1e-6


def test_exact_k3_hand_values_and_grid_certificate():
    space = DiscreteDesignSpace.from_returns([0.0, 1.0, 2.0])
    p = soft_codesign_exact(space, 1.0)
    e = math.e
    np.testing.assert_allclose(p, np.array([1, e, e * e]) / (1 + e + e * e), rtol=1e-12)
    q, best = grid_search_optimum(space, 1.0, 0.001)
    assert np.abs(p - q).max() <= 0.001
    assert brute_force_objective(space, p, 1.0) >= best - 1e-12


def test_exact_beats_every_grid_point():
    rng = np.random.default_rng(0)
    for _ in range(5):
        J = rng.normal(size=3)
        omega = float(rng.uniform(0.2, 5))
        grid = simplex_grid(3, 0.01)
        vals = brute_force_objective(J, grid, omega)
        assert brute_force_objective(J, soft_codesign_exact(J, omega), omega) >= vals.max() - 1e-12


def test_local_search_for_larger_k():
    J = np.array([0.0, 0.5, 1.0, 0.2, -0.3])
    p, val = grid_search_optimum(J, 2.0, 1e-4)
    exact = soft_codesign_exact(J, 2.0)
    assert brute_force_objective(J, exact, 2.0) >= val - 1e-12
    assert np.abs(p - exact).max() < 0.02


def test_shift_invariance():
    J = np.array([0.3, -1.0, 2.2, 0.0])
    np.testing.assert_allclose(soft_codesign_exact(J, 1.7), soft_codesign_exact(J + 100.0, 1.7), atol=1e-12)


def test_large_returns_are_stable():
    p = soft_codesign_exact([1e4, 1e4 + 1, 0.0], 10.0)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_argmax_probability_monotone_in_omega():
    J = np.array([0.1, 0.9, 0.4, 0.85])
    probs = [soft_codesign_exact(J, w)[1] for w in np.linspace(0.01, 50, 200)]
    assert np.all(np.diff(probs) >= -1e-15)


def test_objective_examples():
    J = np.array([1.0, 3.0, 2.0])
    assert brute_force_objective(J, [0, 1, 0], 2.0) == pytest.approx(3.0)
    assert brute_force_objective(J, np.full(3, 1 / 3), 2.0) == pytest.approx(2.0 + math.log(3) / 2.0)


def test_objective_rejects_off_simplex_and_bad_omega():
    with pytest.raises(ValueError):
        brute_force_objective([0.0, 1.0], [0.6, 0.6], 1.0)
    with pytest.raises(ValueError):
        brute_force_objective([0.0, 1.0], [1.2, -0.2], 1.0)
    with pytest.raises(ValueError):
        brute_force_objective([0.0, 1.0], [0.5, 0.5], 0.0)
    with pytest.raises(ValueError):
        soft_codesign_exact([0.0, 1.0], -1.0)


def test_simplex_grid_counts():
    assert len(simplex_grid(3, 0.1)) == 66
    assert len(simplex_grid(4, 0.25)) == math.comb(4 + 3, 3)
    np.testing.assert_allclose(simplex_grid(4, 0.25).sum(1), 1.0)


# ---------------------------------------------------------------------------
# Run comparison


def test_identical_runs_contain_zero():
    curves = [np.random.default_rng(i).normal(size=50) for i in range(5)]
    c = compare_runs(curves, curves)
    assert c.ci_low <= 0 <= c.ci_high and not c.excludes_zero


def test_constant_offset_detected():
    rng = np.random.default_rng(0)
    b = [rng.normal(size=40) for _ in range(5)]
    a = [x + 1.0 for x in b]
    c = compare_runs(a, b)
    assert c.difference == pytest.approx(1.0)
    assert c.excludes_zero and c.paired


def test_needs_three_seeds():
    with pytest.raises(ValueError):
        compare_runs([[1.0], [2.0]], [[1.0], [2.0], [3.0]])


def test_unpaired_when_counts_differ():
    c = compare_runs([1.0, 1.1, 0.9, 1.0], [0.0, 0.1, -0.1])
    assert not c.paired and c.n_a == 4 and c.n_b == 3
    assert c.difference == pytest.approx(1.0)


def test_scalar_and_curve_statistics():
    assert final_smoothed([1.0, 3.0]) == pytest.approx(0.95 + 0.05 * 3)
    c = compare_runs([[0, 2], [0, 3], [0, 4]], [[0, 0], [0, 0], [0, 0]], statistic="final")
    assert c.difference == pytest.approx(3.0)
    with pytest.raises(ValueError):
        compare_runs([[0, 1]] * 3, [[0, 1]] * 3, statistic="median")


def test_coverage_simulation():
    rng = np.random.default_rng(0)
    covered = 0
    for trial in range(100):
        b = rng.normal(0.0, 0.1, 9)
        a = 0.5 + rng.normal(0.0, 0.1, 9)
        c = compare_runs(a, b, n_boot=2000, seed=trial, paired=False)
        covered += c.ci_low <= 0.5 <= c.ci_high
    assert covered >= 90


# ---------------------------------------------------------------------------
# Design statistics


def test_occupancy_of_identical_masks_is_indicator():
    m = np.zeros((2, 3, 3))
    m[0, 0, 0] = 1
    m[1, 2, 1] = 1
    f = occupancy_frequency([m] * 10)
    expect = np.zeros((3, 3))
    expect[0, 0] = expect[2, 1] = 1
    np.testing.assert_array_equal(f, expect)


def test_occupancy_frequency_averages():
    a, b = np.zeros((1, 2, 2)), np.zeros((1, 2, 2))
    a[0, 0, 0] = 1
    b[0, 0, 0] = b[0, 1, 1] = 1
    np.testing.assert_array_equal(occupancy_frequency([a, b]), [[1.0, 0.0], [0.0, 0.5]])
    with pytest.raises(ValueError):
        occupancy_frequency([])


def test_adjacency_test_direction():
    rng = np.random.default_rng(0)
    hi = adjacency_test(rng.poisson(4, 100), rng.poisson(2, 100))
    assert hi.p_value < 1e-6 and hi.mean_generated > hi.mean_uniform
    lo = adjacency_test(rng.poisson(2, 100), rng.poisson(4, 100))
    assert lo.p_value > 0.5

"""Pair-path Monte Carlo tests.

Deterministic cases (zero or constant kernels, degenerate profiles) must come
out exact; genuinely stochastic estimates are checked against closed forms or
independent routes within standard-error bands.  All runs are seeded.
"""

import math

import numpy as np
import pytest

from sbmre.covariance import Constant, ScaledTheta
from sbmre.feynmankac import (
    AtomicMeasure,
    MCConfig,
    annealed_moment_bruteforce,
    annealed_moment_w,
    first_moment_rhs,
    ldp_tail_probe,
    log_gradient_quantiles,
    lyapunov_estimate,
    pair_product,
    pam_second_moment_oracle,
    pi_diagonal,
    qtc,
    second_moment_rhs,
    wilson_interval,
)
from sbmre.grids import Grid, GridFunction
from sbmre.readouts import ConstantReadout, GaussianBump
from sbmre.spde import NoisePath, solve_pam

SEED = 20260814
ONE = ConstantReadout(1.0)


def wide_profile(r):
    r = np.asarray(r, dtype=float)
    return np.exp(-((r / 8.0) ** 2))


def test_config_and_measure_validation():
    with pytest.raises(ValueError):
        MCConfig(1, 0.1, SEED)
    with pytest.raises(ValueError):
        MCConfig(10, 0.0, SEED)
    with pytest.raises(ValueError):
        MCConfig(11, 0.1, SEED, antithetic=True)
    assert MCConfig(10, 0.1, SEED).steps_for(1.0) == 10
    with pytest.raises(ValueError):
        MCConfig(10, 0.3, SEED).steps_for(1.0)
    nu = AtomicMeasure.delta(0.0)
    assert nu.dim == 1 and nu.weights.tolist() == [1.0]
    with pytest.raises(ValueError):
        AtomicMeasure(np.array([1.0, 2.0]), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        AtomicMeasure(np.array([-1.0]), np.zeros((1, 1)))


def test_pair_helpers():
    f = GaussianBump(center=0.2, width=0.7)
    F = pair_product(f)
    x = np.array([[0.1], [0.5]])
    y = np.array([[-0.3], [0.9]])
    assert np.allclose(F(x, y), f(x) * f(y))
    diag = pi_diagonal(F)
    assert np.allclose(diag(x), f(x) ** 2)
    kern = ScaledTheta(2.5)

    def pair_cov(bx, by):
        return kern.envelope(np.linalg.norm(bx - by, axis=-1))

    assert np.allclose(pi_diagonal(pair_cov)(x), 2.5)


def test_qtc_deterministic_cases_and_replay():
    mc = MCConfig(5000, 0.1, SEED)
    est, se = qtc(lambda bx, by: np.ones(len(bx)), 0.0, 0.0, 1.0, Constant(0.0), mc)
    assert est == 1.0 and se == 0.0
    est, se = qtc(lambda bx, by: np.ones(len(bx)), 0.3, -0.2, 1.0, Constant(1.0), mc)
    assert abs(est - math.e) < 1e-12 * math.e
    assert se < 1e-9
    # replay across the internal chunk boundary is bit-identical
    again = qtc(lambda bx, by: np.ones(len(bx)), 0.3, -0.2, 1.0, Constant(1.0), mc)
    assert again == (est, se)
    with pytest.raises(FloatingPointError):
        qtc(lambda bx, by: np.full(len(bx), np.inf), 0.0, 0.0, 1.0, Constant(0.0), mc)


def test_qtc_zero_kernel_factorizes_into_heat_flows():
    f = GaussianBump(center=0.0, width=1.0)
    mc = MCConfig(20000, 0.05, SEED)
    x, y, t = 0.2, -0.4, 0.5
    est, se = qtc(pair_product(f), x, y, t, Constant(0.0), mc)
    target = float(f.heat_flow(t, np.array([[x]]))[0] * f.heat_flow(t, np.array([[y]]))[0])
    assert se > 0
    assert abs(est - target) < 3 * se


def test_qtc_antithetic_agrees():
    f = GaussianBump(center=0.0, width=1.0)
    plain = qtc(pair_product(f), 0.0, 0.0, 0.5, ScaledTheta(1.0), MCConfig(8000, 0.025, SEED))
    anti = qtc(pair_product(f), 0.0, 0.0, 0.5, ScaledTheta(1.0),
               MCConfig(8000, 0.025, SEED, antithetic=True))
    assert abs(plain[0] - anti[0]) < 3 * math.hypot(plain[1], anti[1])


def test_qtc_mesh_refinement_within_one_se():
    f = GaussianBump(center=0.0, width=1.0)
    coarse = qtc(pair_product(f), 0.0, 0.0, 0.5, ScaledTheta(1.0), MCConfig(4000, 0.005, SEED))
    fine = qtc(pair_product(f), 0.0, 0.0, 0.5, ScaledTheta(1.0), MCConfig(4000, 0.0025, SEED))
    assert abs(coarse[0] - fine[0]) < math.hypot(coarse[1], fine[1])


def test_first_moment_rhs_heat_pairing():
    assert abs(first_moment_rhs(ONE, AtomicMeasure.delta(0.0), 1.0) - 1.0) < 1e-12
    f = GaussianBump(center=0.0, width=1.0)
    nu = AtomicMeasure.delta(0.3)
    val = first_moment_rhs(f, nu, 0.7)
    target = float(f.heat_flow(0.7, np.array([[0.3]]))[0])
    assert abs(val - target) < 1e-8
    double = AtomicMeasure(np.array([2.0]), np.array([[0.3]]))
    assert abs(first_moment_rhs(f, double, 0.7) - 2 * val) < 1e-14


def test_second_moment_rhs_zero_kernel_is_exact():
    nu = AtomicMeasure.delta(0.0)
    mc = MCConfig(400, 0.1, SEED)
    est, se = second_moment_rhs(ONE, nu, 1.0, Constant(0.0), mc)
    assert se == 0.0
    assert abs(est - 2.0) < 1e-12  # 1 + t with t = 1
    zero = ConstantReadout(0.0)
    est, se = second_moment_rhs(zero, nu, 1.0, Constant(1.0), mc)
    assert est == 0.0 and se == 0.0


def test_second_moment_rhs_constant_kernel_closed_form():
    nu = AtomicMeasure.delta(0.0)
    mc = MCConfig(4000, 0.05, SEED)
    est, se = second_moment_rhs(ONE, nu, 1.0, Constant(1.0), mc)
    target = math.e + (math.e - 1.0)
    assert 0 < se < 0.01
    assert abs(est - target) < 3 * se + 1e-9


def test_second_moment_dominates_squared_first_moment():
    f = GaussianBump(center=0.0, width=1.0)
    nu = AtomicMeasure.delta(0.0)
    mc = MCConfig(4000, 0.025, SEED)
    second, se = second_moment_rhs(f, nu, 0.5, ScaledTheta(1.0), mc)
    first = first_moment_rhs(f, nu, 0.5)
    assert second >= first**2 - 5 * se


def test_pam_oracle_matches_ensemble_two_point_moment():
    # independent estimates of the same annealed second moment: pair-path
    # sampling vs a seeded solver ensemble on a wide torus
    f = GaussianBump(center=0.0, width=1.0)
    kernel = ScaledTheta(1.0)
    t = 0.5
    oracle, oracle_se = pam_second_moment_oracle(
        f, t, 0.0, 0.0, kernel, MCConfig(20000, 0.0125, SEED))

    grid = Grid(dim=1, extent=16.0, cells=128)
    datum = GridFunction.from_callable(grid, f)
    noise = NoisePath(grid, kernel, 1e-3, SEED + 1, n_replicas=600)
    sol = solve_pam(datum, t, noise)
    center = grid.nearest_index(0.0)
    samples = sol.values[-1][(slice(None),) + center] ** 2
    mean = float(samples.mean())
    se = float(samples.std(ddof=1)) / math.sqrt(len(samples))
    assert abs(mean - oracle) < 3 * math.hypot(se, oracle_se)


def test_annealed_moments_closed_forms():
    kern = ScaledTheta(2.0)
    est, se = annealed_moment_w(kern, 0.8, 1, MCConfig(100, 0.1, SEED))
    assert est == math.exp(0.4) and se == 0.0

    flat = ScaledTheta(3.0, lambda r: np.ones_like(np.asarray(r, dtype=float)))
    est, se = annealed_moment_w(flat, 0.6, 2, MCConfig(500, 0.1, SEED))
    assert abs(est - math.exp(2 * 0.6)) < 1e-12 * est
    assert se < 1e-9

    # frozen-path limit: huge amplitude freezes the 1/a paths
    frozen = ScaledTheta(1e8)
    est, se = annealed_moment_w(frozen, 0.5, 2, MCConfig(2000, 0.05, SEED))
    assert abs(est - math.exp(1.0)) < 1e-3 * math.exp(1.0)

    # positive profiles force every moment above the independent-field floor
    est, se = annealed_moment_w(ScaledTheta(2.0), 0.5, 3, MCConfig(2000, 0.05, SEED))
    assert est >= math.exp(3 * 0.25)

    for bad_k in (0, 5):
        with pytest.raises(ValueError):
            annealed_moment_w(kern, 0.5, bad_k, MCConfig(100, 0.1, SEED))
    with pytest.raises(ValueError):
        annealed_moment_w(Constant(1.0), 0.5, 2, MCConfig(100, 0.1, SEED))
    with pytest.raises(ValueError):
        annealed_moment_w(ScaledTheta(0.0), 0.5, 2, MCConfig(100, 0.1, SEED))


def test_annealed_bruteforce_double_mc_agrees():
    kern = ScaledTheta(2.0)
    mc_fast = MCConfig(20000, 0.025, SEED)
    mc_slow = MCConfig(1500, 0.025, SEED + 1)
    fast, fast_se = annealed_moment_w(kern, 0.25, 2, mc_fast)
    brute, brute_se = annealed_moment_bruteforce(kern, 0.25, 2, mc_slow)
    assert brute_se > 0
    assert abs(fast - brute) < 5 * math.hypot(fast_se, brute_se)


def test_wilson_interval_values():
    low, high = wilson_interval(50, 100)
    assert abs(low - 0.4039) < 5e-4 and abs(high - 0.5961) < 5e-4
    assert wilson_interval(0, 20)[0] == 0.0
    assert wilson_interval(20, 20)[1] == 1.0
    with pytest.raises(ValueError):
        wilson_interval(5, 0)
    with pytest.raises(ValueError):
        wilson_interval(6, 5)


def test_lyapunov_zero_coupling_is_flat():
    grid = Grid(dim=1, extent=8.0, cells=64)
    est = lyapunov_estimate(ScaledTheta(0.0), grid, T=2.0, dt=1e-2, seed=5, n_replicas=3)
    assert np.array_equal(est.slopes, np.zeros(3))
    assert est.median == 0.0 and est.conclusive
    with pytest.raises(ValueError):
        lyapunov_estimate(ScaledTheta(1.0), grid, T=2.0, dt=1e-2, seed=5, n_replicas=1)


def test_lyapunov_route_shift_and_quenched_ladder():
    grid = Grid(dim=1, extent=8.0, cells=64)
    a = 1.0
    strat = lyapunov_estimate(ScaledTheta(a), grid, T=2.0, dt=5e-3, seed=7, n_replicas=3)
    ito = lyapunov_estimate(ScaledTheta(a), grid, T=2.0, dt=5e-3, seed=7,
                            n_replicas=3, stratonovich=False)
    # scalar exponential tilt shifts every slope by exactly a/2
    assert np.allclose(strat.slopes - ito.slopes, a / 2.0, atol=1e-9)

    # quenched decay steepens with coupling, replica by replica (shared seed)
    slopes = {}
    for coupling in (1.0, 16.0):
        est = lyapunov_estimate(ScaledTheta(coupling), grid, T=4.0, dt=2e-3,
                                seed=11, n_replicas=4)
        slopes[coupling] = est.slopes - coupling / 2.0
    assert np.all(slopes[16.0] < slopes[1.0])


def test_lyapunov_plateau_detector_accepts_stabilized_run():
    grid = Grid(dim=1, extent=8.0, cells=64)
    est = lyapunov_estimate(ScaledTheta(4.0), grid, T=8.0, dt=1e-3, seed=99, n_replicas=8)
    assert est.conclusive
    assert est.band[0] <= est.median <= est.band[1]


def test_tail_probe_directions_and_validation():
    grid = Grid(dim=1, extent=8.0, cells=64)
    frac = {}
    for a in (4.0, 16.0):
        for t in (1.0, 4.0):
            probe = ldp_tail_probe(ScaledTheta(a, wide_profile), grid, t=t, L=2.0,
                                   dt=1e-3, seed=31, n_replicas=100)
            assert probe.interval[0] <= probe.fraction <= probe.interval[1]
            assert probe.threshold == math.exp(-a * t / 3.0)
            frac[(a, t)] = probe.fraction
    assert frac[(16.0, 1.0)] < frac[(4.0, 1.0)]
    assert frac[(16.0, 4.0)] < frac[(4.0, 4.0)]
    assert frac[(4.0, 4.0)] < frac[(4.0, 1.0)]
    assert frac[(16.0, 4.0)] < frac[(16.0, 1.0)]

    with pytest.raises(ValueError):
        ldp_tail_probe(ScaledTheta(0.0), grid, t=1.0, L=2.0, dt=1e-3, seed=1, n_replicas=4)
    with pytest.raises(ValueError):
        ldp_tail_probe(Constant(1.0), grid, t=1.0, L=2.0, dt=1e-3, seed=1, n_replicas=4)
    with pytest.raises(ValueError):
        ldp_tail_probe(ScaledTheta(1.0), grid, t=1.0, L=5.0, dt=1e-3, seed=1, n_replicas=4)


def test_log_gradient_quantiles_reports_scales():
    rng = np.random.default_rng(3)
    field = np.exp(rng.normal(size=(4, 32)))
    scan = log_gradient_quantiles(field, spacing=0.25)
    assert set(scan) == {0.5, 0.9, 0.99}
    assert 0 < scan[0.5] <= scan[0.9] <= scan[0.99]
    with pytest.raises(ValueError):
        log_gradient_quantiles(np.zeros((2, 8)), spacing=0.5)

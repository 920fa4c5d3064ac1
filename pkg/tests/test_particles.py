"""Branching-system tests.

Forced-environment runs pin the exact combinatorics (doubling, extinction,
truncation); seeded ensembles check criticality, the mean-measure identity
(exact in n, since epoch displacements are Gaussian), the second-moment
closed form for a constant kernel, and the martingale residual.
"""

import math

import numpy as np
import pytest

from sbmre.covariance import Constant, ScaledTheta
from sbmre.particles import (
    BranchingConfig,
    ParticlePopulation,
    PopulationBlowupError,
    empirical_pairing,
    martingale_residual,
    pair_kernel_pairing,
    residual_variance_predictor,
    run,
    run_ensemble,
    snap_to_epoch,
    step_epoch,
)
from sbmre.readouts import ConstantReadout, GaussianBump

SEED = 20260814


def config(n=50, dim=1, kernel=None, k_start=None, horizon=1.0, cap=1_000_000):
    kernel = Constant(0.0) if kernel is None else kernel
    k_start = n if k_start is None else k_start
    return BranchingConfig(n=n, dim=dim, kernel=kernel,
                           initial=np.zeros((k_start, dim)), horizon=horizon,
                           max_population=cap)


def test_config_validation_and_epoch_snapping():
    cfg = config(n=10, horizon=0.52)
    assert cfg.epoch_length == 0.1
    assert cfg.truncation == math.sqrt(10)
    assert cfg.n_epochs == 5
    assert snap_to_epoch(0.25, 10) == 3  # half-up
    assert snap_to_epoch(0.24, 10) == 2
    assert snap_to_epoch(0.0, 7) == 0
    with pytest.raises(ValueError):
        config(n=0)
    with pytest.raises(ValueError):
        config(horizon=-1.0)
    with pytest.raises(ValueError):
        BranchingConfig(n=5, dim=2, kernel=Constant(0.0),
                        initial=np.zeros((3, 1)), horizon=1.0)
    with pytest.raises(ValueError):
        config(cap=0)


def test_forced_doubling_and_extinction():
    cfg = config(n=4, k_start=5, horizon=1.0)
    rng = np.random.default_rng(0)
    pop = ParticlePopulation(0, cfg.initial.copy(), cfg.n)
    up = lambda pts: np.full(len(pts), 1e9)  # clipped to +sqrt(n): all split
    for epoch in range(1, 5):
        pop = step_epoch(pop, cfg, rng, field_override=up)
        assert pop.count == 5 * 2**epoch
        assert pop.epoch == epoch
    down = lambda pts: np.full(len(pts), -1e9)  # all die
    pop = step_epoch(pop, cfg, rng, field_override=down)
    assert pop.count == 0
    # empty populations stay empty and keep advancing the clock
    pop = step_epoch(pop, cfg, rng)
    assert pop.count == 0 and pop.epoch == 6
    assert empirical_pairing(pop, ConstantReadout(1.0)) == (0.0, 0.0)


def test_field_override_sees_displaced_positions():
    cfg = config(n=9, k_start=3)
    seen = {}

    def probe(pts):
        seen["pts"] = pts.copy()
        return np.zeros(len(pts))

    rng = np.random.default_rng(1)
    pop = ParticlePopulation(0, cfg.initial.copy(), cfg.n)
    step_epoch(pop, cfg, rng, field_override=probe)
    assert seen["pts"].shape == (3, 1)
    # displacement variance 1/n per axis: moved points differ from start
    assert np.all(seen["pts"] != 0.0)
    assert np.abs(seen["pts"]).max() < 10 / cfg.truncation


def test_population_bookkeeping_splits_plus_deaths():
    cfg = config(n=16, k_start=64, kernel=ScaledTheta(1.0))
    rng = np.random.default_rng(2)
    pop = ParticlePopulation(0, cfg.initial.copy(), cfg.n)
    for _ in range(10):
        new = step_epoch(pop, cfg, rng)
        assert new.count % 2 == 0  # offspring come in pairs
        assert 0 <= new.count <= 2 * pop.count
        # offspring sit exactly at parent positions, duplicated
        if new.count:
            assert np.array_equal(new.positions[0::2], new.positions[1::2])
        pop = new


def test_split_frequency_truncated_standard_normal():
    # one particle, one epoch, c=1, n=1: split probability (1 + xi)/2 with xi
    # standard normal truncated at 1; by symmetry the mean probability is 1/2
    cfg = config(n=1, k_start=1, kernel=Constant(1.0))
    rng = np.random.default_rng(SEED)
    trials = 100_000
    splits = 0
    start = ParticlePopulation(0, cfg.initial.copy(), cfg.n)
    for _ in range(trials):
        splits += step_epoch(start, cfg, rng).count == 2
    freq = splits / trials
    assert abs(freq - 0.5) < 3 * 0.5 / math.sqrt(trials)


def test_cap_breach_raises_and_is_recorded_by_ensemble():
    cfg = config(n=4, k_start=8, horizon=1.0, cap=30)
    up = lambda pts: np.full(len(pts), 1e9)
    rng = np.random.default_rng(3)
    pop = ParticlePopulation(0, cfg.initial.copy(), cfg.n)
    pop = step_epoch(pop, cfg, rng, field_override=up)  # 16
    with pytest.raises(PopulationBlowupError) as exc:
        step_epoch(pop, cfg, rng, field_override=up)  # 32 > 30
    assert exc.value.population == 32 and exc.value.cap == 30

    # supercritical-by-chance replicas show up as recorded blowups, not raises
    wild = config(n=2, k_start=20, kernel=Constant(40.0), horizon=3.0, cap=60)
    rows, blowups = run_ensemble(wild, [0.0, 3.0], seed=SEED, n_replicas=40,
                                 statistic=lambda snaps: [s.mass for s in snaps])
    assert len(blowups) > 0
    for r, _epoch, population in blowups:
        assert population > 60
        assert np.isnan(rows[r]).all()
    finite = rows[~np.isnan(rows[:, 0])]
    assert len(finite) == 40 - len(blowups)


def test_run_snapshots_snap_and_are_deterministic():
    cfg = config(n=10, k_start=30, kernel=ScaledTheta(0.5), horizon=1.0)
    times = [0.0, 0.24, 0.25, 1.0]
    snaps1 = run(cfg, times, SEED)
    snaps2 = run(cfg, times, SEED)
    assert [s.epoch for s in snaps1] == [0, 2, 3, 10]
    assert snaps1[0].count == 30
    for a, b in zip(snaps1, snaps2):
        assert np.array_equal(a.positions, b.positions)
    other = run(cfg, times, SEED + 1)
    assert not np.array_equal(snaps1[-1].positions, other[-1].positions)
    with pytest.raises(ValueError):
        run(cfg, [1.5], SEED)
    with pytest.raises(ValueError):
        run(cfg, [-0.1], SEED)
    assert run(config(horizon=0.0), [0.0], SEED)[0].count == 50


def test_pairing_formulas_exact():
    f = GaussianBump(center=0.3, width=0.9)
    one = ParticlePopulation(0, np.array([[0.7]]), 10)
    first, second = empirical_pairing(one, f)
    fx = float(f(np.array([[0.7]]))[0])
    assert abs(first - fx / 10) < 1e-15
    assert abs(second - fx * fx / 100) < 1e-15
    two = ParticlePopulation(0, np.array([[0.0], [1.0]]), 7)
    assert empirical_pairing(two, ConstantReadout(1.0)) == (2 / 7, 4 / 49)
    # kernel-weighted double pairing
    kern = ScaledTheta(2.0)
    expect = (2 * kern.diagonal_value() + 2 * float(kern.envelope(np.ones(1))[0])) / 49
    assert abs(pair_kernel_pairing(two, ConstantReadout(1.0), kern) - expect) < 1e-12
    assert pair_kernel_pairing(ParticlePopulation(0, np.zeros((0, 1)), 7),
                               ConstantReadout(1.0), kern) == 0.0


def test_mass_martingale_and_mean_measure():
    # critical branching preserves expected mass for any kernel
    cfg = config(n=50, k_start=50, kernel=Constant(0.0), horizon=0.5)
    rows, blow = run_ensemble(cfg, [0.5], seed=SEED + 1, n_replicas=400,
                              statistic=lambda snaps: [snaps[0].mass])
    assert not blow
    mass = rows[:, 0]
    se = mass.std(ddof=1) / math.sqrt(len(mass))
    assert abs(mass.mean() - 1.0) < 3 * se

    # mean measure follows the exact heat flow (epoch sums of Gaussians)
    f = GaussianBump(center=0.0, width=1.0)
    cfg = config(n=100, k_start=100, kernel=Constant(1.0), horizon=0.5)
    rows, blow = run_ensemble(cfg, [0.5], seed=SEED + 2, n_replicas=1000,
                              statistic=lambda snaps: [empirical_pairing(snaps[0], f)[0]])
    assert not blow
    vals = rows[:, 0]
    target = float(f.heat_flow(0.5, np.zeros((1, 1)))[0])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - target) < 3 * se

    # same identity under a genuinely spatial kernel
    cfg = config(n=40, k_start=40, kernel=ScaledTheta(1.0), horizon=0.25)
    rows, blow = run_ensemble(cfg, [0.25], seed=SEED + 3, n_replicas=200,
                              statistic=lambda snaps: [empirical_pairing(snaps[0], f)[0]])
    assert not blow
    vals = rows[:, 0]
    target = float(f.heat_flow(0.25, np.zeros((1, 1)))[0])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - target) < 3 * se


def test_second_moment_constant_kernel_closed_form():
    # E<1,X_t>^2 -> e^(ct) + (e^(ct)-1)/c as n grows; n=100 sits within the
    # Monte Carlo band of the limit at these sizes
    c, t = 1.0, 0.5
    cfg = config(n=100, k_start=100, kernel=Constant(c), horizon=t)
    rows, blow = run_ensemble(cfg, [t], seed=SEED + 4, n_replicas=1500,
                              statistic=lambda snaps: [snaps[0].mass])
    assert not blow
    sq = rows[:, 0] ** 2
    target = math.exp(c * t) + (math.exp(c * t) - 1.0) / c
    se = sq.std(ddof=1) / math.sqrt(len(sq))
    assert abs(sq.mean() - target) < 5 * se


def test_martingale_residual_zero_readout_and_centering():
    cfg = config(n=50, k_start=50, kernel=Constant(1.0), horizon=0.5)
    zero = ConstantReadout(0.0)
    times, resid = martingale_residual(run(cfg, np.linspace(0, 0.5, 6), SEED), zero)
    assert np.array_equal(resid, np.zeros(6))

    f = GaussianBump(center=0.0, width=1.0)
    save = np.linspace(0.0, 0.5, 6)

    def stat(snaps):
        _, resid = martingale_residual(snaps, f)
        _, pred = residual_variance_predictor(snaps, f, cfg.kernel)
        return np.concatenate([resid, pred])

    rows, blow = run_ensemble(cfg, save, seed=SEED + 5, n_replicas=500,
                              statistic=stat)
    assert not blow
    resid, pred = rows[:, :6], rows[:, 6:]
    assert np.abs(resid[:, 0]).max() == 0.0
    for j in range(1, 6):
        se = resid[:, j].std(ddof=1) / math.sqrt(len(rows))
        assert abs(resid[:, j].mean()) < 3 * se
    # variance tracks the integrated quadratic-variation predictor
    for j in (3, 5):
        var = resid[:, j].var(ddof=1)
        se_var = (resid[:, j] ** 2).std(ddof=1) / math.sqrt(len(rows))
        mean_pred = pred[:, j].mean()
        se_pred = pred[:, j].std(ddof=1) / math.sqrt(len(rows))
        assert abs(var - mean_pred) < 5 * math.hypot(se_var, se_pred)


def test_variance_predictor_reduces_without_kernel_term():
    cfg = config(n=30, k_start=30, kernel=Constant(0.0), horizon=0.2)
    f = GaussianBump(width=0.8)
    snaps = run(cfg, np.linspace(0, 0.2, 5), SEED)
    _, with_zero_kernel = residual_variance_predictor(snaps, f, Constant(0.0))
    sq_only = [
        float(np.sum(f(s.positions) ** 2)) / s.n if s.count else 0.0 for s in snaps
    ]
    times = np.array([s.time for s in snaps])
    expect = np.concatenate([[0.0], np.cumsum(
        0.5 * (np.array(sq_only)[1:] + np.array(sq_only)[:-1]) * np.diff(times))])
    assert np.allclose(with_zero_kernel, expect, atol=1e-15)

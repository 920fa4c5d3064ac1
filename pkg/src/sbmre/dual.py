"""Jump-perturbed dual flow and duality-gap diagnostics.

The dual state is a nonnegative grid function.  Between the arrivals of a
rate-n Poisson clock it follows the deterministic absorption flow

    dY/dt = (1/2) Laplacian Y - (1/2) Y^2

integrated by the same splitting substeps as the stochastic solvers (spectral
half-heat, exact reaction, half-heat); each arrival multiplies the state
cellwise by 1 + h/sqrt(n), where h is a fresh Gaussian field draw with the
environment covariance, truncated to +-sqrt(n) so the factor stays
nonnegative.  Pairing Y_t with the initial measure estimates the same Laplace
functional as the log-Laplace route, and the gap between the two routes is
the uniqueness diagnostic; it shrinks as n grows.

Determinism: the arrival clock and each jump's mark use separate spawn-keyed
child streams of one seed, so a replica replays bit-identically from
(seed, stream) and the jump log alone.  Jump times snap to the next substep
boundary; the snap bias is O(dt) per jump and sits far below Monte Carlo
noise at the default step (documented in the gap tests).

Marks are read as i.i.d. field realizations, one independent draw per jump.
"""

import math
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceKernel, grid_covariance_factor
from .grids import Grid, GridFunction, PolynomialWeight
from .heatkernel import apply_spectral_multiplier, heat_multiplier
from .spde import NoisePath, _resolve_steps, solve_log_laplace

__all__ = [
    "DualEvolutionError",
    "PoissonClock",
    "DualState",
    "evolve_dual",
    "pair_with_measure",
    "laplace_via_log_laplace",
    "laplace_via_dual",
    "duality_gap",
    "ThirdMomentReport",
    "third_moment_scan",
]


class DualEvolutionError(FloatingPointError):
    """Dual state left the finite range."""

    def __init__(self, step: int):
        super().__init__(f"dual state became non-finite at step {step}")
        self.step = step


class PoissonClock:
    """Rate-n arrival clock; inter-arrival gaps are exponential, mean 1/n."""

    def __init__(self, rate: float):
        if not rate > 0:
            raise ValueError(f"rate must be positive, got {rate}")
        self.rate = float(rate)

    def arrivals(self, rng, horizon: float) -> np.ndarray:
        """All arrival times in (0, horizon], in order."""
        times = []
        t = 0.0
        block = max(16, int(self.rate * horizon * 1.5) + 16)
        while True:
            gaps = rng.exponential(1.0 / self.rate, size=block)
            for g in gaps:
                t += g
                if t > horizon:
                    return np.array(times)
                times.append(t)


@dataclass(frozen=True)
class DualState:
    """Dual flow endpoint with the jump log needed for exact replay."""

    y: GridFunction
    time: float
    n: float
    jump_times: np.ndarray
    seed: int
    stream: tuple

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)

    def mark_key(self, k: int) -> tuple:
        """Spawn key of the k-th jump's field draw (replay handle)."""
        return self.stream + (1, k)


def _stream_rng(seed: int, key: tuple) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def evolve_dual(phi: GridFunction, t: float, n: float, kernel: CovarianceKernel,
                seed: int, dt: float = 1e-3, stream: tuple = (),
                field_override=None) -> DualState:
    """Run the jump-diffusion dual flow started from phi up to time t.

    field_override(k) may supply the k-th mark (an array over grid cells) in
    place of the Gaussian draw; the truncation to +-sqrt(n) still applies.
    """
    grid = phi.grid
    if np.min(phi.values) < 0:
        raise ValueError("dual initial condition must be nonnegative")
    if not n >= 1:
        raise ValueError(f"need branching scale n >= 1, got {n}")
    n_steps = _resolve_steps(t, dt)
    clock = PoissonClock(float(n))
    jump_times = clock.arrivals(_stream_rng(seed, stream + (0,)), t)
    # each jump applies right after the substep its time rounds up to
    due = np.maximum(np.ceil(jump_times / dt - 1e-12).astype(int), 1)
    factor = grid_covariance_factor(kernel, grid) if field_override is None else None
    half = heat_multiplier(grid, dt / 2.0)
    root_n = math.sqrt(n)
    y = phi.values.copy()
    k = 0
    for step in range(1, n_steps + 1):
        y = apply_spectral_multiplier(y, half, grid.shape)
        np.maximum(y, 0.0, out=y)
        y = y / (1.0 + y * (dt / 2.0))
        y = apply_spectral_multiplier(y, half, grid.shape)
        np.maximum(y, 0.0, out=y)
        while k < len(due) and due[k] == step:
            if field_override is None:
                h = factor.sample(_stream_rng(seed, stream + (1, k)))
            else:
                h = np.broadcast_to(np.asarray(field_override(k), dtype=float),
                                    grid.shape)
            h = np.clip(h, -root_n, root_n)
            y = y * (1.0 + h / root_n)
            k += 1
        if not np.all(np.isfinite(y)):
            raise DualEvolutionError(step)
    return DualState(y=GridFunction(grid, y), time=float(t), n=float(n),
                     jump_times=jump_times, seed=seed, stream=stream)


def pair_with_measure(y: GridFunction, mu) -> float:
    """<y, mu> for a torus-constant density (float) or atom list (weights, points)."""
    if np.isscalar(mu):
        return float(mu) * y.grid.cell_volume * float(np.sum(y.values))
    weights, points = mu
    weights = np.atleast_1d(np.asarray(weights, dtype=float))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return float(sum(w * y.at(x) for w, x in zip(weights, points)))


def _mean_se(values: np.ndarray) -> tuple:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1)) / math.sqrt(len(values))


def laplace_via_log_laplace(phi: GridFunction, mu, t: float,
                            kernel: CovarianceKernel, seed: int,
                            n_replicas: int, dt: float = 1e-3) -> tuple:
    """E[exp(-<phi, X_t>)] through the conditional log-Laplace solution."""
    noise = NoisePath(phi.grid, kernel, dt, seed, n_replicas=n_replicas)
    sol = solve_log_laplace(phi, 1.0, t, noise)
    final = sol.values[-1]
    pairings = [pair_with_measure(GridFunction(phi.grid, u), mu) for u in final]
    return _mean_se(np.exp(-np.asarray(pairings)))


def laplace_via_dual(phi: GridFunction, mu, t: float, n: float,
                     kernel: CovarianceKernel, seed: int,
                     n_replicas: int, dt: float = 1e-3) -> tuple:
    """E[exp(-<X_0, Y_t>)] through replicas of the jump-diffusion dual."""
    values = []
    for r in range(n_replicas):
        state = evolve_dual(phi, t, n, kernel, seed, dt=dt, stream=(r,))
        values.append(math.exp(-pair_with_measure(state.y, mu)))
    return _mean_se(np.asarray(values))


def duality_gap(phi: GridFunction, mu, t: float, n: float,
                kernel: CovarianceKernel, seed: int, n_replicas: int,
                dt: float = 1e-3) -> tuple:
    """|log-Laplace route - dual route| with the combined standard error."""
    left, left_se = laplace_via_log_laplace(phi, mu, t, kernel, seed + 1, n_replicas, dt)
    right, right_se = laplace_via_dual(phi, mu, t, n, kernel, seed + 2, n_replicas, dt)
    return abs(left - right), math.hypot(left_se, right_se)


@dataclass(frozen=True)
class ThirdMomentReport:
    """Weight-normalized third moments of the dual state across an n-ladder."""

    n_ladder: tuple
    times: tuple
    probes: np.ndarray
    ratios: np.ndarray  # (n, time, probe)
    max_ratio: np.ndarray  # per n

    def spread(self) -> float:
        """Relative variation of the per-n maxima (stability statistic)."""
        peak = float(self.max_ratio.max())
        if peak == 0.0:
            return 0.0
        return float((self.max_ratio.max() - self.max_ratio.min()) / peak)


def third_moment_scan(phi: GridFunction, times, n_ladder, kernel: CovarianceKernel,
                      probes, rho: float, seed: int, n_replicas: int,
                      dt: float = 1e-3) -> ThirdMomentReport:
    """Empirical E[Y_t(x)^3] / weight(x)^3 over an n-ladder and probe points.

    The weight is the polynomial reference weight; the scan reports the ratio
    surface and its per-n maxima so a ladder test can check boundedness in n.
    """
    times = tuple(float(s) for s in times)
    n_ladder = tuple(float(v) for v in n_ladder)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    weight = PolynomialWeight(rho)
    w3 = weight(probes) ** 3
    ratios = np.zeros((len(n_ladder), len(times), len(probes)))
    for i, n in enumerate(n_ladder):
        for j, s in enumerate(times):
            cubes = np.zeros(len(probes))
            for r in range(n_replicas):
                state = evolve_dual(phi, s, n, kernel, seed, dt=dt, stream=(i, r))
                vals = np.array([state.y.at(x) for x in probes])
                cubes += vals**3
            ratios[i, j] = cubes / n_replicas / w3
    return ThirdMomentReport(n_ladder=n_ladder, times=times, probes=probes,
                             ratios=ratios,
                             max_ratio=ratios.reshape(len(n_ladder), -1).max(axis=1))

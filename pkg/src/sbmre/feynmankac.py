"""Monte Carlo oracles built on pair-path expectations.

The central object is the weighted pair semigroup

    Q_t F(x, y) = E[(F(B_t, B'_t) exp(int_0^t C(B_s, B'_s) ds)]

over two independent Brownian motions started at (x, y).  It gives the
annealed second moment of the multiplicative-noise flow and the right-hand
sides of the measure-process moment identities, so it serves as an oracle
that shares no code with the ensemble solvers it checks.

Conventions fixed here:
  - the potential integral along paths is a left-endpoint Riemann sum on the
    path mesh (bias O(dt), probed by mesh-refinement tests);
  - the outer time integral of the second-moment identity is stratified over
    the same mesh with a uniform draw inside each cell, which keeps it
    unbiased and gives it an honest nonzero standard error;
  - sampling is chunked with fixed-size chunks keyed by a SeedSequence spawn
    index, so estimates are byte-identical regardless of how work is split.

Estimates are returned as (value, standard error) pairs.
"""

import math
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceKernel, ScaledTheta, points_covariance_factor
from .grids import Grid, GridFunction
from .heatkernel import heat_at_points
from .spde import NoisePath, pam_log_max_series, solve_pam

__all__ = [
    "MCConfig",
    "AtomicMeasure",
    "pair_product",
    "pi_diagonal",
    "qtc",
    "first_moment_rhs",
    "second_moment_rhs",
    "pam_second_moment_oracle",
    "annealed_moment_w",
    "annealed_moment_bruteforce",
    "LyapunovEstimate",
    "lyapunov_estimate",
    "TailProbe",
    "ldp_tail_probe",
    "wilson_interval",
    "log_gradient_quantiles",
]

_CHUNK = 4096


@dataclass(frozen=True)
class MCConfig:
    """Path-sampling budget: count, mesh step, seed, antithetic pairing."""

    n_paths: int
    dt: float
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError(f"need at least 2 paths, got {self.n_paths}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")

    def steps_for(self, t: float) -> int:
        m = int(round(t / self.dt))
        if m < 1 or abs(m * self.dt - t) > 1e-9 * max(t, self.dt):
            raise ValueError(f"dt={self.dt} does not divide t={t}")
        return m


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite weighted point list; simulation-side measures are atomic."""

    weights: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if w.ndim != 1 or p.ndim != 2 or len(w) != len(p) or len(w) == 0:
            raise ValueError("need matching nonempty weights (K,) and points (K, dim)")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "points", p)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def delta(cls, x) -> "AtomicMeasure":
        return cls(np.ones(1), np.atleast_1d(np.asarray(x, dtype=float))[None, :])


def pair_product(f):
    """Tensor readout (x, y) -> f(x) f(y)."""

    def F(bx, by):
        return np.asarray(f(bx), dtype=float) * np.asarray(f(by), dtype=float)

    return F


def pi_diagonal(F):
    """Restriction of a pair function to the diagonal, x -> F(x, x)."""

    def g(x):
        x = np.asarray(x, dtype=float)
        return np.asarray(F(x, x), dtype=float)

    return g


def _chunks(total: int) -> list:
    sizes = [_CHUNK] * (total // _CHUNK)
    if total % _CHUNK:
        sizes.append(total % _CHUNK)
    return sizes


def _rng(seed: int, chunk: int, tag: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag, chunk)))


class _Welford:
    """Chunk-merged mean and standard error (deterministic merge order).

    Antithetic draws must be folded into pair averages before being added, so
    the i.i.d. standard-error formula stays honest.
    """

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, values: np.ndarray):
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("non-finite functional values in Monte Carlo batch")
        self.n += values.size
        self.total += float(np.sum(values))
        self.total_sq += float(np.sum(values * values))

    def estimate(self) -> tuple:
        mean = self.total / self.n
        var = max(self.total_sq - self.n * mean * mean, 0.0) / max(self.n - 1, 1)
        return mean, math.sqrt(var / self.n)


def _fold_antithetic(values: np.ndarray, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return values
    half = len(values) // 2
    return 0.5 * (values[:half] + values[half:])


def _pair_increments(rng, n: int, m: int, dim: int, dt: float, antithetic: bool):
    """Increments for n pair paths over m steps; antithetic halves the draws."""
    draw = n // 2 if antithetic else n
    inc = rng.standard_normal((2, draw, m, dim)) * math.sqrt(dt)
    if antithetic:
        inc = np.concatenate([inc, -inc], axis=1)
    return inc[0], inc[1]


def qtc(F, x, y, t: float, kernel: CovarianceKernel, mc: MCConfig) -> tuple:
    """Pair-path expectation of F weighted by the exponentiated correlation.

    Left-endpoint Riemann sum for the exponent; independent path streams for
    the two coordinates.  Returns (estimate, standard error).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be points of the same dimension")
    m = mc.steps_for(t)
    dim = len(x)
    acc = _Welford()
    for c, size in enumerate(_chunks(mc.n_paths)):
        rng = _rng(mc.seed, c)
        inc_b, inc_bp = _pair_increments(rng, size, m, dim, mc.dt, mc.antithetic)
        # difference path at left endpoints drives the exponent
        beta = np.cumsum(inc_b - inc_bp, axis=1)
        left = np.concatenate([np.zeros((size, 1, dim)), beta[:, :-1]], axis=1)
        left += (x - y)
        radii = np.sqrt(np.sum(left * left, axis=-1))
        exponent = mc.dt * np.sum(kernel.envelope(radii), axis=1)
        end_b = x + np.sum(inc_b, axis=1)
        end_bp = y + np.sum(inc_bp, axis=1)
        vals = np.exp(exponent) * np.asarray(F(end_b, end_bp), dtype=float)
        acc.add(_fold_antithetic(vals, mc.antithetic))
    return acc.estimate()


def first_moment_rhs(f, nu: AtomicMeasure, t: float) -> float:
    """Heat flow of the readout paired with an atomic measure."""
    flowed = heat_at_points(f, t, nu.points, nu.dim)
    return float(np.dot(nu.weights, flowed))


def _diagonal_time_integral(f, F, x: np.ndarray, t: float,
                            kernel: CovarianceKernel, mc: MCConfig) -> tuple:
    """int_0^t P_{t-s}(pi Q_s F)(x) ds, stratified uniformly over mesh cells.

    Each sample runs a plain Gaussian jump of length t-s from x, then a pair
    started at its endpoint for the remaining s; the draw of s inside its mesh
    cell keeps the estimator unbiased with a nonzero standard error.  The
    stratification already plays the variance-reduction role, so the
    antithetic flag is ignored here.
    """
    m = mc.steps_for(t)
    if mc.n_paths < 2 * m:
        raise ValueError(
            f"need at least {2 * m} paths for {m} time strata, got {mc.n_paths}")
    dim = len(x)
    base, rem = divmod(mc.n_paths, m)
    value = 0.0
    variance = 0.0
    for j in range(m):
        n_j = base + (1 if j < rem else 0)
        rng = _rng(mc.seed, j, tag=1)
        u = rng.random(n_j)
        s = (j + u) * mc.dt
        # common phase: a single exact Gaussian jump of length t - s
        common = x + rng.standard_normal((n_j, dim)) * np.sqrt(t - s)[:, None]
        # pair phase: j full steps of dt plus one partial step of u dt
        widths = np.concatenate(
            [np.full((n_j, j), mc.dt), (u * mc.dt)[:, None]], axis=1)
        inc_b, inc_bp = _pair_increments(rng, n_j, j + 1, dim, 1.0, False)
        scale = np.sqrt(widths)[..., None]
        inc_b = inc_b * scale
        inc_bp = inc_bp * scale
        beta = np.cumsum(inc_b - inc_bp, axis=1)
        left = np.concatenate([np.zeros((n_j, 1, dim)), beta[:, :-1]], axis=1)
        radii = np.sqrt(np.sum(left * left, axis=-1))
        exponent = np.sum(kernel.envelope(radii) * widths, axis=1)
        end_b = common + np.sum(inc_b, axis=1)
        end_bp = common + np.sum(inc_bp, axis=1)
        vals = np.exp(exponent) * np.asarray(F(end_b, end_bp), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite functional values in Monte Carlo batch")
        value += mc.dt * float(np.mean(vals))
        variance += mc.dt**2 * float(np.var(vals, ddof=1)) / n_j
    return value, math.sqrt(variance)


def second_moment_rhs(f, nu: AtomicMeasure, t: float,
                      kernel: CovarianceKernel, mc: MCConfig) -> tuple:
    """Two-term second-moment identity for an atomic initial measure.

    First term pairs the weighted pair semigroup with nu (x) nu; second term
    integrates its diagonal restriction, flowed by the heat semigroup, against
    nu over [0, t].  Standard errors of all Monte Carlo pieces combine in
    quadrature.
    """
    F = pair_product(f)
    value = 0.0
    var = 0.0
    for i, (wi, xi) in enumerate(zip(nu.weights, nu.points)):
        for j, (wj, xj) in enumerate(zip(nu.weights, nu.points)):
            est, se = qtc(F, xi, xj, t, kernel,
                          MCConfig(mc.n_paths, mc.dt, mc.seed + 7919 * (i * len(nu.weights) + j),
                                   mc.antithetic))
            value += wi * wj * est
            var += (wi * wj * se) ** 2
        est, se = _diagonal_time_integral(f, F, xi, t, kernel, mc)
        value += wi * est
        var += (wi * se) ** 2
    return value, math.sqrt(var)


def pam_second_moment_oracle(f, t: float, x, y,
                             kernel: CovarianceKernel, mc: MCConfig) -> tuple:
    """Annealed two-point moment of the linear flow: Q_t(f (x) f) at (x, y)."""
    return qtc(pair_product(f), x, y, t, kernel, mc)


def annealed_moment_w(kernel: ScaledTheta, t: float, k: int, mc: MCConfig,
                      dim: int = 1) -> tuple:
    """k-th annealed moment of the slow-path exponential functional.

    Conditional on k independent paths with diffusivity 1/a, the summed
    functional is centered Gaussian, so the environment integrates out to
    exp(k t / 2 + sum_{i<j} int profile(|X_i - X_j|) ds); only paths are
    sampled.  k = 1 is deterministic (standard error 0).
    """
    if not isinstance(kernel, ScaledTheta):
        raise ValueError("annealed moments are defined for amplitude-scaled profiles")
    if not 1 <= k <= 4:
        raise ValueError(f"moment order must lie in 1..4, got {k}")
    if kernel.a <= 0:
        raise ValueError("need a positive amplitude for the 1/a path scaling")
    m = mc.steps_for(t)
    if k == 1:
        return math.exp(t / 2.0), 0.0
    root_dt = math.sqrt(mc.dt / kernel.a)
    acc = _Welford()
    for c, size in enumerate(_chunks(mc.n_paths)):
        rng = _rng(mc.seed, c, tag=2)
        draw = size // 2 if mc.antithetic else size
        inc = rng.standard_normal((draw, k, m, dim)) * root_dt
        if mc.antithetic:
            inc = np.concatenate([inc, -inc], axis=0)
        pos = np.cumsum(inc, axis=2)
        left = np.concatenate([np.zeros((size, k, 1, dim)), pos[:, :, :-1]], axis=2)
        cross = np.zeros(size)
        for i in range(k):
            for j in range(i + 1, k):
                radii = np.linalg.norm(left[:, i] - left[:, j], axis=-1)
                cross += 2.0 * mc.dt * np.sum(kernel.profile(radii), axis=1)
        acc.add(_fold_antithetic(np.exp(0.5 * (k * t + cross)), mc.antithetic))
    return acc.estimate()


def annealed_moment_bruteforce(kernel: ScaledTheta, t: float, k: int,
                               mc: MCConfig, dim: int = 1) -> tuple:
    """Double Monte Carlo oracle: sample the environment along the paths.

    For each replica, k independent slow paths are drawn and the white-in-time
    field is sampled slice by slice at the current positions (joint Gaussian
    with the profile covariance); the product of the k exponentials estimates
    the same moment as annealed_moment_w by an independent mechanism.
    """
    if not isinstance(kernel, ScaledTheta):
        raise ValueError("annealed moments are defined for amplitude-scaled profiles")
    if not 1 <= k <= 4:
        raise ValueError(f"moment order must lie in 1..4, got {k}")
    if kernel.a <= 0:
        raise ValueError("need a positive amplitude for the 1/a path scaling")
    m = mc.steps_for(t)
    profile_kernel = ScaledTheta(1.0, kernel.profile)
    root_dt = math.sqrt(mc.dt / kernel.a)
    acc = _Welford()
    for c, size in enumerate(_chunks(mc.n_paths)):
        rng = _rng(mc.seed, c, tag=3)
        for _ in range(size):
            inc = rng.standard_normal((k, m, dim)) * root_dt
            pos = np.cumsum(inc, axis=1)
            left = np.concatenate([np.zeros((k, 1, dim)), pos[:, :-1]], axis=1)
            eta = np.zeros(k)
            for step in range(m):
                factor = points_covariance_factor(profile_kernel, left[:, step])
                eta += factor.sample(rng, mc.dt)
            acc.add(np.exp(eta.sum(keepdims=True)))
    return acc.estimate()


@dataclass(frozen=True)
class LyapunovEstimate:
    """Per-replica log-slope fits of the spatial max, with a plateau verdict."""

    slopes: np.ndarray
    early_slopes: np.ndarray
    median: float
    band: tuple
    conclusive: bool


def _window_slopes(times: np.ndarray, rows: np.ndarray, lo: float, hi: float) -> np.ndarray:
    mask = (times >= lo - 1e-12) & (times <= hi + 1e-12)
    if mask.sum() < 2:
        raise ValueError("not enough saved times in the slope window")
    tw = times[mask]
    design = np.stack([tw, np.ones_like(tw)], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, rows[mask], rcond=None)
    return coeffs[0]


def lyapunov_estimate(kernel: CovarianceKernel, grid: Grid, T: float, dt: float,
                      seed: int, n_replicas: int, stratonovich: bool = True) -> LyapunovEstimate:
    """Least-squares slope of log max_x of the multiplicative flow over [T/2, T].

    Fits each replica separately and reports the median with the interquartile
    band.  The verdict is conclusive only when the late-window median agrees
    with the [T/4, T/2] median within the late interquartile range; otherwise
    the slope has not stabilized and the numbers are exploratory.
    """
    if n_replicas < 2:
        raise ValueError("need at least 2 replicas for a band")
    f = GridFunction.constant(grid, 1.0)
    noise = NoisePath(grid, kernel, dt, seed, n_replicas=n_replicas)
    stride = max(1, int(round(T / (256.0 * dt))))
    times, rows = pam_log_max_series(f, T, noise, save_every=stride,
                                     correction=not stratonovich)
    late = _window_slopes(times, rows, T / 2.0, T)
    early = _window_slopes(times, rows, T / 4.0, T / 2.0)
    q25, q75 = np.percentile(late, [25.0, 75.0])
    iqr = max(q75 - q25, 1e-12)
    conclusive = abs(float(np.median(late)) - float(np.median(early))) <= iqr
    return LyapunovEstimate(slopes=late, early_slopes=early,
                            median=float(np.median(late)), band=(float(q25), float(q75)),
                            conclusive=bool(conclusive))


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    """Wilson score interval for a binomial proportion."""
    if n < 1 or not 0 <= successes <= n:
        raise ValueError("need 0 <= successes <= n with n >= 1")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


@dataclass(frozen=True)
class TailProbe:
    """Exceedance frequency of the spatial max against the decay threshold."""

    fraction: float
    interval: tuple
    threshold: float
    n_replicas: int


def ldp_tail_probe(kernel: ScaledTheta, grid: Grid, t: float, L: float, dt: float,
                   seed: int, n_replicas: int) -> TailProbe:
    """Fraction of replicas whose max of the flat-start flow over |x| <= L
    exceeds exp(-a t / 3).

    Only a > 0 is meaningful: at a = 0 the flow is identically 1 and the
    threshold degenerates to the strict boundary, so it is rejected.
    """
    if not isinstance(kernel, ScaledTheta) or kernel.a <= 0:
        raise ValueError("tail probe needs an amplitude-scaled kernel with a > 0")
    if grid.extent < 2 * L:
        raise ValueError(f"grid extent {grid.extent} cannot cover |x| <= {L}")
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    f = GridFunction.constant(grid, 1.0)
    noise = NoisePath(grid, kernel, dt, seed, n_replicas=n_replicas)
    sol = solve_pam(f, t, noise)
    final = sol.values[-1]  # (n_replicas, *grid.shape)
    mask = np.abs(grid.axis()) <= L + 1e-12
    for _ in range(grid.dim - 1):
        mask = mask[..., None] & (np.abs(grid.axis()) <= L + 1e-12)
    peaks = final[:, mask].max(axis=1)
    threshold = math.exp(-kernel.a * t / 3.0)
    hits = int(np.sum(peaks > threshold))
    return TailProbe(fraction=hits / n_replicas,
                     interval=wilson_interval(hits, n_replicas),
                     threshold=threshold, n_replicas=n_replicas)


def log_gradient_quantiles(sol_values: np.ndarray, spacing: float,
                           quantiles=(0.5, 0.9, 0.99)) -> dict:
    """Spatial smoothness scan of log of a positive field (reported, not asserted).

    Returns quantiles of |d log v / dx| over all axes, replicas and cells,
    using periodic differences; a rough empirical counterpart of pointwise
    comparability of nearby values.
    """
    values = np.asarray(sol_values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("smoothness scan needs a strictly positive field")
    logs = np.log(values)
    grads = []
    for axis in range(1, logs.ndim):
        diff = np.abs(np.roll(logs, -1, axis=axis) - logs) / spacing
        grads.append(diff.ravel())
    flat = np.concatenate(grads)
    return {q: float(np.quantile(flat, q)) for q in quantiles}

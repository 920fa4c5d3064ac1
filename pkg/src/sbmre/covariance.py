"""Spatial covariance kernels of the driving noise and exact Gaussian sampling.

The environment noise is white in time and colored in space: increments over a
time step dt form a centered Gaussian field with covariance C(x, y) * dt.  All
kernel variants here are stationary (functions of x - y), bounded, and carry
an explicit sup bound used both for fail-fast validation and for the jitter
budget of the dense factorization.

Factorization strategy: plain Cholesky first; on failure add diagonal jitter
1e-10 * sup_bound and retry once; if that still fails the matrix is indefinite
beyond tolerance and we raise with the most negative eigenvalue.  The jitter
actually applied never exceeds 1e-8 * sup_bound.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

JITTER_SCALE = 1e-10
JITTER_CAP = 1e-8


class IndefiniteKernelError(np.linalg.LinAlgError):
    """Covariance matrix is not positive semidefinite within the jitter budget."""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


@dataclass(frozen=True)
class EnvelopeTraits:
    """Analytic facts about a radial envelope that quadratures can rely on.

    ``None`` means unknown; numerical checks take over in that case.
    """

    divergent_potential: bool = None  # integral of r * g(r) diverges
    nonincreasing: bool = None
    support_radius: float = None  # envelope vanishes beyond this radius


def _pair_distances(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(
            f"dimension mismatch: x has dim {x.shape[-1]}, y has dim {y.shape[-1]}"
        )
    return np.sqrt(np.sum((x - y) ** 2, axis=-1))


class CovarianceKernel:
    """Base class: stationary spatial covariance C(x, y) = envelope(|x - y|)."""

    def __call__(self, x, y):
        """Evaluate C(x, y); x and y broadcast with a trailing coordinate axis."""
        return self.envelope(_pair_distances(x, y))

    def envelope(self, r):
        """Radial profile g(r) with C(x, y) = g(|x - y|)."""
        raise NotImplementedError

    def sup_bound(self) -> float:
        raise NotImplementedError

    def diagonal_value(self) -> float:
        """C(x, x), constant by stationarity."""
        return float(self.envelope(np.zeros(1))[0])

    def matrix(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.envelope(cdist(points, points))

    def envelope_traits(self) -> EnvelopeTraits:
        return EnvelopeTraits()


@dataclass(frozen=True)
class Constant(CovarianceKernel):
    """Fully correlated environment: C(x, y) = level."""

    level: float

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"level must be nonnegative, got {self.level}")

    def envelope(self, r):
        return np.full_like(np.asarray(r, dtype=float), self.level)

    def sup_bound(self) -> float:
        return self.level

    def envelope_traits(self) -> EnvelopeTraits:
        return EnvelopeTraits(
            divergent_potential=self.level > 0, nonincreasing=True
        )


@dataclass(frozen=True)
class StationaryPower(CovarianceKernel):
    """Power-decay correlation C(x, y) = eps / (1 + |x - y|^alpha)."""

    eps: float
    alpha: float

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be nonnegative, got {self.eps}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def envelope(self, r):
        return self.eps / (1.0 + np.asarray(r, dtype=float) ** self.alpha)

    def sup_bound(self) -> float:
        return self.eps

    def envelope_traits(self) -> EnvelopeTraits:
        # integral of r * g(r) converges iff alpha > 2
        return EnvelopeTraits(
            divergent_potential=self.eps > 0 and self.alpha <= 2,
            nonincreasing=True,
        )


def gaussian_profile(r):
    """Default correlation profile exp(-r^2), unit value at r = 0."""
    r = np.asarray(r, dtype=float)
    return np.exp(-r * r)


@dataclass(frozen=True)
class GaussianProfile:
    """Width-parameterized correlation profile exp(-(r/width)^2).

    Picklable stand-in for gaussian_profile when the correlation length must
    come from a config file; width 1 reproduces gaussian_profile exactly.
    """

    width: float = 1.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")

    def __call__(self, r):
        r = np.asarray(r, dtype=float) / self.width
        return np.exp(-r * r)


@dataclass(frozen=True)
class ScaledTheta(CovarianceKernel):
    """Amplitude-scaled correlation profile: C(x, y) = a * profile(|x - y|).

    The profile is normalized to profile(0) = 1 so that C(x, x) = a exactly.
    """

    a: float
    profile: object = field(default=None)

    def __post_init__(self):
        if self.a < 0:
            raise ValueError(f"a must be nonnegative, got {self.a}")
        if self.profile is None:
            object.__setattr__(self, "profile", gaussian_profile)
        p0 = float(np.asarray(self.profile(np.zeros(1)))[0])
        if abs(p0 - 1.0) > 1e-12:
            raise ValueError(f"profile(0) must equal 1, got {p0}")

    def envelope(self, r):
        return self.a * np.asarray(self.profile(np.asarray(r, dtype=float)))

    def sup_bound(self) -> float:
        # profiles are correlation shapes; guard against ones that overshoot 1
        probe = np.linspace(0.0, 16.0, 4097)
        return self.a * float(np.max(np.abs(self.profile(probe))))

    def diagonal_value(self) -> float:
        return self.a

    def envelope_traits(self) -> EnvelopeTraits:
        if self.profile is gaussian_profile:
            return EnvelopeTraits(divergent_potential=False, nonincreasing=True)
        return EnvelopeTraits()


@dataclass(frozen=True)
class IndicatorBall(CovarianceKernel):
    """Hard-cutoff correlation: C(x, y) = height * 1{|x - y| <= radius}.

    Not positive semidefinite in general; factorization may legitimately fail.
    """

    radius: float
    height: float = 1.0

    def __post_init__(self):
        if self.radius <= 0 or self.height < 0:
            raise ValueError("radius must be positive and height nonnegative")

    def envelope(self, r):
        return np.where(np.asarray(r, dtype=float) <= self.radius, self.height, 0.0)

    def sup_bound(self) -> float:
        return self.height

    def envelope_traits(self) -> EnvelopeTraits:
        return EnvelopeTraits(
            divergent_potential=False,
            nonincreasing=True,
            support_radius=self.radius,
        )


class Tabulated(CovarianceKernel):
    """Radial kernel interpolated linearly from (radius, value) samples.

    Values beyond the last tabulated radius are zero; below the first radius
    the first value is held.
    """

    def __init__(self, radii, values):
        radii = np.asarray(radii, dtype=float)
        values = np.asarray(values, dtype=float)
        if radii.ndim != 1 or radii.shape != values.shape or radii.size < 2:
            raise ValueError("need matching 1-d arrays with at least two samples")
        if np.any(np.diff(radii) <= 0):
            raise ValueError("radii must be strictly increasing")
        if radii[0] < 0:
            raise ValueError("radii must be nonnegative")
        self.radii = radii
        self.values = values

    @classmethod
    def from_file(cls, path) -> "Tabulated":
        table = np.loadtxt(path)
        if table.ndim != 2 or table.shape[1] != 2:
            raise ValueError(f"{path}: expected two columns (radius, value)")
        return cls(table[:, 0], table[:, 1])

    def envelope(self, r):
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.radii, self.values, left=self.values[0], right=0.0)

    def sup_bound(self) -> float:
        return float(np.max(np.abs(self.values)))

    def envelope_traits(self) -> EnvelopeTraits:
        mono = bool(np.all(np.diff(self.values) <= 0))
        return EnvelopeTraits(
            divergent_potential=False,
            nonincreasing=mono if mono else None,
            support_radius=float(self.radii[-1]),
        )


class GaussianFieldFactor:
    """Square-root factor of C over a fixed point set, ready for exact sampling.

    ``root`` has shape (m, r) with root @ root.T equal to the (possibly
    jittered) covariance matrix of the m deduplicated points.  ``index_map``
    scatters sampled values back to the original (possibly duplicated) points:
    coincident positions always share one field value.
    """

    def __init__(self, root, index_map, jitter, diagonal_value, out_shape=None):
        self.root = np.asarray(root, dtype=float)
        self.index_map = np.asarray(index_map, dtype=np.intp)
        self.jitter = float(jitter)
        self.diagonal_value = float(diagonal_value)
        self.out_shape = tuple(out_shape) if out_shape is not None else (len(self.index_map),)

    @property
    def n_points(self) -> int:
        return len(self.index_map)

    def sample(self, rng, dt: float = 1.0, batch: int = None) -> np.ndarray:
        """Draw a centered Gaussian field with covariance C * dt.

        Returns out_shape for batch=None, else (batch,) + out_shape.  Each call
        is an independent draw (white in time).
        """
        if dt < 0:
            raise ValueError(f"dt must be nonnegative, got {dt}")
        rank = self.root.shape[1]
        cols = 1 if batch is None else int(batch)
        z = rng.standard_normal((rank, cols))
        vals = math.sqrt(dt) * (self.root @ z)  # (m, cols)
        vals = vals[self.index_map, :]
        if batch is None:
            return vals[:, 0].reshape(self.out_shape)
        return np.moveaxis(vals, -1, 0).reshape((cols,) + self.out_shape)


def _factor_matrix(matrix, sup_bound):
    """PSD square root with the jitter/retry contract; returns (root, jitter)."""
    if not matrix.any():
        return np.zeros((matrix.shape[0], 1)), 0.0
    try:
        return np.linalg.cholesky(matrix), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * sup_bound
    assert jitter <= JITTER_CAP * sup_bound
    try:
        bumped = matrix + jitter * np.eye(matrix.shape[0])
        return np.linalg.cholesky(bumped), jitter
    except np.linalg.LinAlgError:
        min_eig = float(np.linalg.eigvalsh(matrix)[0])
        raise IndefiniteKernelError(
            "covariance matrix is not positive semidefinite within the jitter "
            f"budget {jitter:.3e}; most negative eigenvalue {min_eig:.6e}",
            min_eig,
        ) from None


def points_covariance_factor(kernel: CovarianceKernel, points) -> GaussianFieldFactor:
    """Factor C over an arbitrary point set; duplicated points are deduplicated."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError(f"points must have shape (m, dim), got {points.shape}")
    unique, index_map = np.unique(points, axis=0, return_inverse=True)
    index_map = index_map.reshape(-1)
    if isinstance(kernel, Constant):
        # exact rank-1 root of the all-ones matrix times level
        root = np.full((len(unique), 1), math.sqrt(kernel.level))
        return GaussianFieldFactor(root, index_map, 0.0, kernel.diagonal_value())
    root, jitter = _factor_matrix(kernel.matrix(unique), kernel.sup_bound())
    return GaussianFieldFactor(root, index_map, jitter, kernel.diagonal_value())


def grid_covariance_factor(kernel: CovarianceKernel, grid) -> GaussianFieldFactor:
    """Factor C over all cell centers of a grid; samples come back grid-shaped."""
    if grid.n_points > 10000:
        raise ValueError(
            f"grid has {grid.n_points} cells; dense factorization is limited to 10000"
        )
    factor = points_covariance_factor(kernel, grid.points())
    factor.out_shape = grid.shape
    return factor


def sample_increment(factor: GaussianFieldFactor, dt: float, rng) -> np.ndarray:
    """One noise increment over a step of length dt (covariance C * dt)."""
    return factor.sample(rng, dt=dt)

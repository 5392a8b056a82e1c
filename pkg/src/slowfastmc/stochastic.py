"""Random-number streams, correlated Brownian increments, time grids,
path storage and Monte Carlo statistics.

Everything here is deterministic given a master seed: stream ``i`` of a
:class:`StreamFamily` produces the same increments no matter how many
workers are running or in which order paths are simulated.  That property
is what makes the higher-level experiment outputs byte-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ColumnNormViolation,
    InsufficientSamples,
    NonFiniteSample,
    OrthogonalityViolation,
)

# Tolerance for the correlation-matrix checks.  Configs hold decimal
# literals, so exact zero would be an unreasonable demand.
CORRELATION_TOL = 1e-12

_GRID_REL_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, t_end] with n_steps steps of width h."""

    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if not self.t_end > self.t0:
            raise ValueError(f"need t_end > t0, got [{self.t0}, {self.t_end}]")
        if self.n_steps > 0 and not self.h > 0:
            raise ValueError("step width must be positive")

    @property
    def h(self) -> float:
        return (self.t_end - self.t0) / self.n_steps if self.n_steps else 0.0

    @property
    def span(self) -> float:
        return self.t_end - self.t0

    @classmethod
    def from_step(cls, t0: float, t_end: float, h: float) -> "TimeGrid":
        """Build a grid from a step width; h must tile [t0, t_end] exactly
        (within 1e-12 relative)."""
        if h <= 0:
            raise ValueError(f"h must be > 0, got {h}")
        n = int(round((t_end - t0) / h))
        if n < 1 or abs(n * h - (t_end - t0)) > _GRID_REL_TOL * max(1.0, abs(t_end - t0)):
            raise ValueError(f"step {h} does not tile [{t0}, {t_end}]")
        return cls(t0, t_end, n)

    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.t_end, self.n_steps + 1)

    def node_index(self, t: float) -> int:
        """Index of the grid node closest to t."""
        k = int(round((t - self.t0) / self.h)) if self.n_steps else 0
        return min(max(k, 0), self.n_steps)


@dataclass(frozen=True)
class CorrelationSpec:
    """Correlation matrix rho linking the d slow drivers to the l fast ones.

    The fast drivers are built as  W~_j = sum_i rho_ij W_i + residual_j Z_j
    with Z independent of W, so E[dW_i dW~_j] = rho_ij dt.
    """

    rho: np.ndarray
    residual: np.ndarray  # per-column weight sqrt(1 - sum_i rho_ij^2)

    @property
    def d(self) -> int:
        return self.rho.shape[0]

    @property
    def l(self) -> int:
        return self.rho.shape[1]


def build_correlation(rho) -> CorrelationSpec:
    """Validate a d x l correlation matrix and precompute residual weights.

    Raises ColumnNormViolation when a column's squared norm exceeds 1 and
    OrthogonalityViolation when two columns fail the orthogonality
    requirement, both at tolerance 1e-12.
    """
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    if rho.ndim != 2:
        raise ValueError("rho must be a d x l matrix")
    if not np.all(np.isfinite(rho)):
        raise ValueError("rho entries must be finite")
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("rho entries must lie in (-1, 1)")
    col_sq = np.sum(rho * rho, axis=0)
    if np.any(col_sq > 1.0 + CORRELATION_TOL):
        j = int(np.argmax(col_sq))
        raise ColumnNormViolation(
            f"column {j} has squared norm {col_sq[j]:.15g} > 1"
        )
    gram = rho.T @ rho
    off = gram - np.diag(np.diag(gram))
    if np.any(np.abs(off) > CORRELATION_TOL):
        j, k = np.unravel_index(int(np.argmax(np.abs(off))), off.shape)
        raise OrthogonalityViolation(
            f"columns {j} and {k} are not orthogonal: "
            f"sum_i rho_i{j} rho_i{k} = {gram[j, k]:.15g}"
        )
    residual = np.sqrt(np.clip(1.0 - col_sq, 0.0, 1.0))
    return CorrelationSpec(rho=rho, residual=residual)


def scalar_correlation(rho: float) -> CorrelationSpec:
    """The d = l = 1 case used by the finance models."""
    return build_correlation([[float(rho)]])


@dataclass
class RngStream:
    """A reproducible Gaussian stream identified by (master_seed, key).

    Streams are backed by the counter-based Philox generator; the key is a
    spawn tuple, so any two distinct keys yield statistically independent
    streams and the draw sequence of a given key never depends on other
    streams or on scheduling.
    """

    master_seed: int
    key: tuple[int, ...]
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    @property
    def stream_index(self) -> int:
        return self.key[-1] if self.key else 0

    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def normals(self, shape) -> np.ndarray:
        """Draw standard normals, advancing the substream cursor."""
        return self.generator().standard_normal(shape)

    def fresh(self) -> "RngStream":
        """A copy rewound to the start of the stream."""
        return RngStream(self.master_seed, self.key)


@dataclass(frozen=True)
class StreamFamily:
    """Factory for hierarchically keyed RngStreams.

    ``family.stream(i)`` is the i-th path stream; ``family.child(tag)``
    opens a disjoint namespace (one per experiment cell, per tabulation
    node, ...).  Keys never collide across distinct tag tuples.
    """

    master_seed: int
    key_prefix: tuple[int, ...] = ()

    def stream(self, index: int) -> RngStream:
        return RngStream(self.master_seed, self.key_prefix + (int(index),))

    def child(self, *tags: int) -> "StreamFamily":
        return StreamFamily(self.master_seed, self.key_prefix + tuple(int(t) for t in tags))

    def streams(self, start: int, stop: int) -> list[RngStream]:
        return [self.stream(i) for i in range(start, stop)]


def sample_increments(
    spec: CorrelationSpec, grid: TimeGrid, stream: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """Correlated Brownian increments over one grid.

    Returns (dW, dW~) with shapes (n_steps, d) and (n_steps, l).  dW has
    independent N(0, h) entries; dW~ follows the displayed construction
    from dW plus fresh independent dZ.  Same stream and grid imply
    identical output.
    """
    n = grid.n_steps
    d, l = spec.d, spec.l
    if n == 0:
        return np.empty((0, d)), np.empty((0, l))
    raw = stream.normals((n, d + l)) * math.sqrt(grid.h)
    dW = raw[:, :d]
    dZ = raw[:, d:]
    dWt = dW @ spec.rho + dZ * spec.residual
    return dW, dWt


@dataclass(frozen=True)
class MonteCarloEstimate:
    """(mean, standard error, sample count) of a scalar MC quantity."""

    mean: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise InsufficientSamples(f"need >= 2 samples, got {self.n_samples}")
        if not (self.std_error >= 0):
            raise ValueError("std_error must be >= 0")

    def ci(self, z: float = 3.0) -> tuple[float, float]:
        return (self.mean - z * self.std_error, self.mean + z * self.std_error)


def mc_estimate(samples) -> MonteCarloEstimate:
    """Sample mean with standard error sd / sqrt(n), n >= 2 finite samples.

    Constant samples report their common value with SE exactly 0 (float
    summation would otherwise leave ~1 ulp of spurious spread).
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientSamples(f"need >= 2 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteSample("samples contain NaN or infinity")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return MonteCarloEstimate(mean=lo, std_error=0.0, n_samples=int(x.size))
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return MonteCarloEstimate(mean=mean, std_error=se, n_samples=int(x.size))


def combined_se(a: MonteCarloEstimate, b: MonteCarloEstimate) -> float:
    """Standard error of the difference of two independent estimates."""
    return math.hypot(a.std_error, b.std_error)


@dataclass
class PathBundle:
    """Trajectories on a shared grid: values[path, node, component].

    ``labels`` maps component names (e.g. "X", "Y", "X_aux") to column
    slices of the last axis.  ``metadata`` carries per-run extras such as
    stored increments or extrapolation counts.
    """

    grid: TimeGrid
    values: np.ndarray
    labels: dict[str, slice]
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def component(self, name: str) -> np.ndarray:
        """(n_paths, n_nodes, dim) view of one labelled component."""
        return self.values[:, :, self.labels[name]]

    def terminal(self, name: str) -> np.ndarray:
        return self.values[:, -1, self.labels[name]]

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteSample("bundle contains non-finite values")


def stack_labels(dims: dict[str, int]) -> dict[str, slice]:
    """Consecutive column slices for named components of given widths."""
    labels, start = {}, 0
    for name, dim in dims.items():
        labels[name] = slice(start, start + dim)
        start += dim
    return labels


def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise InsufficientSamples("KS statistic needs non-empty samples")
    allv = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, allv, side="right") / a.size
    cdf_b = np.searchsorted(b, allv, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def ks_critical_value(n: int, m: int, coeff: float = 1.628) -> float:
    """Large-sample two-sample KS critical value c * sqrt((n+m)/(n m)).

    coeff = 1.628 corresponds to the 1% level.
    """
    return coeff * math.sqrt((n + m) / (n * m))


def path_batches(n_paths: int, batch_size: int) -> list[tuple[int, int]]:
    """Fixed decomposition of path indices into contiguous batches.

    The decomposition depends only on (n_paths, batch_size), never on the
    worker count, so reductions ordered by batch index are reproducible.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [(s, min(s + batch_size, n_paths)) for s in range(0, n_paths, batch_size)]

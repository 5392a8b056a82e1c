"""Frozen-equation simulation, invariant-measure estimation and averaged
coefficients.

The fast pair (B, C) with time and slow state held fixed defines the
frozen dynamics; under a dissipativity constant beta its law contracts to
a unique invariant measure at rate exp(-2 beta s).  Averaged coefficients
are time averages of b and a = sigma sigma^T / 2 along long frozen
trajectories, with standard errors from batch means; the averaged
diffusion factor is the symmetric PSD square root of 2 a-bar.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coefficients import CoefficientField, SlowFastSystem
from .errors import (
    NonStationaryWarning,
    NotPSD,
    NotSymmetric,
    NumericalBlowup,
)
from .stochastic import PathBundle, StreamFamily, TimeGrid, stack_labels

_NOISE_BLOCK_FLOATS = 8_000_000


@dataclass(frozen=True)
class FrozenEquation:
    """Fast dynamics dy = B(t, x, y) ds + C(t, x, y) dW with (t, x) fixed."""

    fast_drift: CoefficientField
    fast_diffusion: CoefficientField
    t: float
    x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        if self.fast_drift.d != self.x.size:
            raise ValueError(
                f"frozen state has dim {self.x.size}, coefficients expect {self.fast_drift.d}"
            )

    @property
    def l(self) -> int:
        return self.fast_drift.l

    @property
    def beta(self) -> float | None:
        return self.fast_drift.dissipativity

    @classmethod
    def of_system(cls, system: SlowFastSystem, t: float, x) -> "FrozenEquation":
        return cls(system.fast_drift, system.fast_diffusion, float(t), x)


def _frozen_chunks(frozen: FrozenEquation, y: np.ndarray, n_steps: int, h: float,
                   streams, guard: float = 1e8):
    """Advance the frozen dynamics, yielding (first_step_index, states).

    ``states`` holds the post-step values for a chunk of steps; the
    per-stream generators persist across chunks so chunking never affects
    the draw sequence.
    """
    B, l = y.shape
    xb = np.broadcast_to(frozen.x, (B, frozen.x.size))
    t = frozen.t
    sqrt_h = math.sqrt(h)
    chunk = max(1, min(n_steps, _NOISE_BLOCK_FLOATS // max(1, B * l)))
    k = 0
    while k < n_steps:
        rows = min(chunk, n_steps - k)
        noise = np.empty((B, rows, l))
        for i, s in enumerate(streams):
            noise[i] = s.normals((rows, l))
        out = np.empty((B, rows, l))
        for j in range(rows):
            Bv = frozen.fast_drift(t, xb, y)
            Cv = frozen.fast_diffusion(t, xb, y)
            y = y + Bv * h + np.einsum("nij,nj->ni", Cv, sqrt_h * noise[:, j, :])
            out[:, j] = y
        worst = np.abs(out[:, -1]).max(axis=1)
        if not np.all(worst <= guard):
            idx = int(np.argmax(~(worst <= guard)))
            raise NumericalBlowup(
                f"frozen state exceeded overflow guard near step {k + rows}",
                path_index=idx,
            )
        yield k, out
        k += rows


def simulate_frozen(
    frozen: FrozenEquation,
    y_init,
    horizon: float,
    step: float,
    family: StreamFamily,
    n_paths: int = 1,
    *,
    max_nodes: int = 1024,
    guard: float = 1e8,
) -> PathBundle:
    """Euler-Maruyama trajectories of the frozen equation.

    At most ``max_nodes`` interior nodes are recorded (uniformly thinned),
    so long horizons stay cheap to store; the terminal time is always hit
    exactly.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    n_steps = max(1, int(round(horizon / step)))
    stride = max(1, math.ceil(n_steps / max_nodes))
    n_steps = math.ceil(n_steps / stride) * stride
    h = horizon / n_steps
    n_rec = n_steps // stride
    y0 = np.broadcast_to(np.atleast_1d(np.asarray(y_init, dtype=float)), (n_paths, frozen.l)).copy()

    values = np.empty((n_paths, n_rec + 1, frozen.l))
    values[:, 0] = y0
    streams = family.streams(0, n_paths)
    for k0, states in _frozen_chunks(frozen, y0.copy(), n_steps, h, streams, guard):
        rows = states.shape[1]
        for j in range(rows):
            g = k0 + j + 1
            if g % stride == 0:
                values[:, g // stride] = states[:, j]
    grid = TimeGrid(0.0, horizon, n_rec)
    bundle = PathBundle(grid=grid, values=values, labels=stack_labels({"Y": frozen.l}),
                        metadata={"step": h, "stride": stride, "frozen_t": frozen.t})
    bundle.check_finite()
    return bundle


# ---------------------------------------------------------------------------
# ergodic time averages


@dataclass(frozen=True)
class ErgodicParams:
    """Trajectory layout for invariant-measure estimation.

    ``burn_in`` defaults to 10/beta and ``horizon`` to 200/beta using the
    declared dissipativity constant; ``n_strands`` independent trajectories
    are averaged jointly (the estimator remains a time average, strands
    only multiply the effective horizon).
    """

    burn_in: float | None = None
    horizon: float | None = None
    step: float = 1e-3
    n_strands: int = 1
    n_batches: int = 32

    def resolve(self, beta: float | None) -> tuple[float, float]:
        burn, hor = self.burn_in, self.horizon
        if burn is None or hor is None:
            if beta is None or beta <= 0:
                raise ValueError(
                    "burn_in/horizon defaults need a declared dissipativity constant"
                )
            if burn is None:
                burn = 10.0 / beta
            if hor is None:
                hor = 200.0 / beta
        if not (burn >= 0 and hor > burn):
            raise ValueError(f"need 0 <= burn_in < horizon, got {burn}, {hor}")
        return float(burn), float(hor)


@dataclass
class TimeAverage:
    mean: np.ndarray  # (m,)
    std_error: np.ndarray  # (m,)
    n_kept: int
    stationary: bool


def _batch_index(k_kept: np.ndarray, n_kept: int, n_batches: int) -> np.ndarray:
    return np.minimum(k_kept * n_batches // n_kept, n_batches - 1)


def time_average_functionals(
    frozen: FrozenEquation,
    funcs: dict[str, Callable[[np.ndarray], np.ndarray]],
    y_init,
    params: ErgodicParams,
    family: StreamFamily,
    *,
    collect_states: bool = False,
) -> tuple[dict[str, TimeAverage], dict]:
    """Single streaming pass computing time averages of several functionals.

    Each ``funcs[name]`` maps states (n, l) to values (n, m).  Standard
    errors come from batch means over ``n_batches`` time blocks pooled
    across strands.  Emits NonStationaryWarning when the two halves of the
    kept window disagree by more than 5 combined batch standard errors.

    Returns the per-functional averages plus raw extras (thinned states,
    per-block means) used by estimate_invariant.
    """
    burn, hor = params.resolve(frozen.beta)
    S = params.n_strands
    nb = params.n_batches
    n_steps = max(nb, int(round(hor / params.step)))
    h = hor / n_steps
    k_burn = int(math.ceil(burn / h - 1e-9))
    n_kept = n_steps - k_burn
    if n_kept < nb:
        raise ValueError("kept window too short for the requested batch count")

    y = np.broadcast_to(np.atleast_1d(np.asarray(y_init, dtype=float)), (S, frozen.l)).copy()
    streams = family.streams(0, S)
    widths = {}
    block_sums = {}
    vmin, vmax = {}, {}
    block_counts = np.zeros(nb, dtype=np.int64)
    thin = max(1, n_kept // 4000)
    kept_states = [] if collect_states else None

    probe = {name: np.asarray(f(y), dtype=float) for name, f in funcs.items()}
    for name, v in probe.items():
        widths[name] = v.reshape(S, -1).shape[1]
        block_sums[name] = np.zeros((S, nb, widths[name]))
        vmin[name] = np.full(widths[name], np.inf)
        vmax[name] = np.full(widths[name], -np.inf)

    for k0, states in _frozen_chunks(frozen, y, n_steps, h, streams):
        rows = states.shape[1]
        gk = np.arange(k0 + 1, k0 + rows + 1)  # post-step indices, 1-based
        kept = gk > k_burn
        if not kept.any():
            continue
        kidx = np.nonzero(kept)[0]
        kk = gk[kidx] - k_burn - 1  # kept-step offsets, 0-based
        b_of = _batch_index(kk, n_kept, nb)
        np.add.at(block_counts, b_of, 1)
        flat = states[:, kidx, :].reshape(S * kidx.size, frozen.l)
        for name, f in funcs.items():
            vals = np.asarray(f(flat), dtype=float).reshape(S, kidx.size, widths[name])
            np.minimum(vmin[name], vals.min(axis=(0, 1)), out=vmin[name])
            np.maximum(vmax[name], vals.max(axis=(0, 1)), out=vmax[name])
            for b in np.unique(b_of):
                sel = b_of == b
                block_sums[name][:, b, :] += vals[:, sel, :].sum(axis=1)
        if collect_states:
            tsel = kidx[(kk % thin) == 0]
            if tsel.size:
                kept_states.append(states[:, tsel, :])

    # block_counts currently accumulated once per strand set (same for all
    # strands); the loop above adds each kept step exactly once.
    counts = block_counts.astype(float)
    out = {}
    stationary_all = True
    for name in funcs:
        sums = block_sums[name]
        total = sums.sum(axis=(0, 1)) / (counts.sum() * S)
        constant = vmin[name] == vmax[name]
        total = np.where(constant, vmin[name], total)
        means = sums / counts[None, :, None]
        flat_means = means.reshape(S * nb, widths[name])
        se = np.std(flat_means, axis=0, ddof=1) / math.sqrt(S * nb)
        se = np.where(constant, 0.0, se)
        half = nb // 2
        m1 = means[:, :half, :].mean(axis=(0, 1))
        m2 = means[:, half:, :].mean(axis=(0, 1))
        se1 = np.std(means[:, :half, :].reshape(-1, widths[name]), axis=0, ddof=1) / math.sqrt(S * half)
        se2 = np.std(means[:, half:, :].reshape(-1, widths[name]), axis=0, ddof=1) / math.sqrt(S * (nb - half))
        gap = np.where(constant, 0.0, np.abs(m1 - m2))
        tol = 5.0 * np.hypot(se1, se2)
        stationary = bool(np.all(gap <= np.maximum(tol, 1e-300)))
        if not stationary:
            stationary_all = False
            warnings.warn(
                f"time average of {name!r} drifts between trajectory halves "
                f"(gap {gap.max():.3g} > 5 SE)",
                NonStationaryWarning,
                stacklevel=2,
            )
        out[name] = TimeAverage(mean=total, std_error=se, n_kept=int(n_kept * S),
                                stationary=stationary)
    extras = {
        "thinned": (np.concatenate(kept_states, axis=1) if collect_states and kept_states else None),
        "thin_stride_time": thin * h,
        "step": h,
        "burn_in": burn,
        "horizon": hor,
        "stationary": stationary_all,
    }
    return out, extras


def _identity_states(y):
    return y


@dataclass
class InvariantMeasureEstimate:
    """Sample summary of the frozen equation's long-run law at one (t, x)."""

    frozen_t: float
    frozen_x: np.ndarray
    mean: np.ndarray
    se_mean: np.ndarray
    cov: np.ndarray
    quantiles: dict[float, np.ndarray]
    burn_in: float
    horizon: float
    n_kept: int
    effective_sample_size: float
    decay_lags: np.ndarray
    decay_corr: np.ndarray
    stationary: bool
    n_strands: int = 1


def estimate_invariant(
    frozen: FrozenEquation,
    burn_in: float | None,
    horizon: float | None,
    step: float,
    family: StreamFamily,
    *,
    y_init=None,
    n_strands: int = 1,
    n_batches: int = 32,
    quantile_levels=(0.05, 0.25, 0.5, 0.75, 0.95),
) -> InvariantMeasureEstimate:
    """Moments, quantiles and a decay curve of the invariant measure.

    A long trajectory (optionally several independent strands) is
    time-averaged past the burn-in; batch means give the standard error
    and effective sample size, and the windowed autocorrelation of the
    states provides the empirical distance-to-equilibrium curve.
    """
    params = ErgodicParams(burn_in=burn_in, horizon=horizon, step=step,
                           n_strands=n_strands, n_batches=n_batches)
    if y_init is None:
        y_init = np.zeros(frozen.l)
    funcs = {"y": _identity_states, "yy": _second_moment_states}
    avgs, extras = time_average_functionals(
        frozen, funcs, y_init, params, family, collect_states=True
    )
    l = frozen.l
    mean = avgs["y"].mean
    second = avgs["yy"].mean.reshape(l, l)
    cov = second - np.outer(mean, mean)
    cov = (cov + cov.T) / 2.0

    thinned = extras["thinned"]  # (S, n_thin, l)
    flat = thinned.reshape(-1, l)
    quantiles = {float(q): np.quantile(flat, q, axis=0) for q in quantile_levels}

    # autocorrelation decay from the thinned series, pooled over strands
    n_thin = thinned.shape[1]
    z = thinned - mean
    denom = np.mean(z * z, axis=(0, 1)) + 1e-300
    lags, corrs = [], []
    lag = 1
    while lag <= n_thin // 4:
        c = np.mean(z[:, :-lag, :] * z[:, lag:, :], axis=(0, 1)) / denom
        lags.append(lag * extras["thin_stride_time"])
        corrs.append(float(np.max(np.abs(c))))
        lag *= 2
    se = avgs["y"].std_error
    var_point = np.diag(cov)
    with np.errstate(divide="ignore", invalid="ignore"):
        ess_comp = np.where(se > 0, var_point / np.maximum(se**2, 1e-300), float(avgs["y"].n_kept))
    ess = float(np.clip(np.min(ess_comp), 1.0, avgs["y"].n_kept))

    return InvariantMeasureEstimate(
        frozen_t=frozen.t,
        frozen_x=frozen.x.copy(),
        mean=mean,
        se_mean=se,
        cov=cov,
        quantiles=quantiles,
        burn_in=extras["burn_in"],
        horizon=extras["horizon"],
        n_kept=avgs["y"].n_kept,
        effective_sample_size=ess,
        decay_lags=np.asarray(lags),
        decay_corr=np.asarray(corrs),
        stationary=extras["stationary"],
        n_strands=n_strands,
    )


def _second_moment_states(y):
    return (y[:, :, None] * y[:, None, :]).reshape(y.shape[0], -1)


# ---------------------------------------------------------------------------
# contraction check


@dataclass(frozen=True)
class ContractionRow:
    s: float
    measured: float
    std_error: float
    bound: float
    margin: float
    flagged: bool


@dataclass
class ContractionReport:
    beta: float
    initial_sq_distance: float
    rows: list[ContractionRow]

    @property
    def any_flagged(self) -> bool:
        return any(r.flagged for r in self.rows)


def verify_contraction(
    frozen: FrozenEquation,
    y1,
    y2,
    times,
    n_paths: int,
    family: StreamFamily,
    *,
    step: float = 1e-3,
    rel_margin: float = 0.01,
) -> ContractionReport:
    """Coupled two-start check of the exponential contraction bound.

    Both solutions share the same noise; for each requested time s the
    mean squared distance is compared against exp(-2 beta s) |y1 - y2|^2.
    A row is flagged when the measurement exceeds the bound by more than
    the Monte Carlo (3 SE) plus discretization margin.
    """
    beta = frozen.beta
    if beta is None or beta <= 0:
        raise ValueError("verify_contraction needs a declared dissipativity constant")
    y1 = np.atleast_1d(np.asarray(y1, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    if np.allclose(y1, y2):
        raise ValueError("y1 and y2 must differ")
    times = sorted(float(s) for s in times)
    horizon = times[-1]
    d0 = float(np.sum((y1 - y2) ** 2))

    n_steps = max(1, int(round(horizon / step))) if horizon > 0 else 0
    h = horizon / n_steps if n_steps else 0.0
    snap = {max(0, min(n_steps, int(round(s / h)))) if n_steps else 0: s for s in times}
    B = n_paths
    xb = np.broadcast_to(frozen.x, (B, frozen.x.size))
    ya = np.broadcast_to(y1, (B, frozen.l)).copy()
    yb = np.broadcast_to(y2, (B, frozen.l)).copy()
    streams = family.streams(0, B)
    results: dict[int, np.ndarray] = {}
    if 0 in snap:
        results[0] = np.sum((ya - yb) ** 2, axis=1)

    sqrt_h = math.sqrt(h) if h else 0.0
    chunk = max(1, min(n_steps, _NOISE_BLOCK_FLOATS // max(1, B * frozen.l))) if n_steps else 0
    k = 0
    while k < n_steps:
        rows = min(chunk, n_steps - k)
        noise = np.empty((B, rows, frozen.l))
        for i, s_ in enumerate(streams):
            noise[i] = s_.normals((rows, frozen.l))
        for j in range(rows):
            dW = sqrt_h * noise[:, j, :]
            Ba = frozen.fast_drift(frozen.t, xb, ya)
            Ca = frozen.fast_diffusion(frozen.t, xb, ya)
            Bb = frozen.fast_drift(frozen.t, xb, yb)
            Cb = frozen.fast_diffusion(frozen.t, xb, yb)
            ya = ya + Ba * h + np.einsum("nij,nj->ni", Ca, dW)
            yb = yb + Bb * h + np.einsum("nij,nj->ni", Cb, dW)
            g = k + j + 1
            if g in snap:
                results[g] = np.sum((ya - yb) ** 2, axis=1)
        k += rows

    rows_out = []
    for g, s in sorted(snap.items()):
        vals = results[g]
        measured = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / math.sqrt(B)) if B > 1 else 0.0
        bound = math.exp(-2.0 * beta * s) * d0
        margin = bound * (rel_margin + beta * beta * s * h) + 3.0 * se
        flagged = measured > bound + margin
        rows_out.append(ContractionRow(s, measured, se, bound, margin, flagged))
    return ContractionReport(beta=beta, initial_sq_distance=d0, rows=rows_out)


# ---------------------------------------------------------------------------
# averaged coefficients


def _min_horizon(beta: float | None, horizon: float) -> None:
    if beta is not None and beta > 0 and horizon < 50.0 / beta - 1e-9:
        raise ValueError(
            f"ergodic horizon {horizon} is below 50/beta = {50.0 / beta:.3g}"
        )


def estimate_averaged_drift(
    b: CoefficientField,
    frozen: FrozenEquation,
    params: ErgodicParams,
    family: StreamFamily,
    *,
    y_init=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Time average of b(t, x, y_s) over the frozen trajectory.

    Returns (b-bar(t, x), SE) with batch-means standard errors.
    """
    _, hor = params.resolve(frozen.beta)
    _min_horizon(frozen.beta, hor)
    if y_init is None:
        y_init = np.zeros(frozen.l)
    xrow = frozen.x

    avgs, _ = time_average_functionals(
        frozen, {"b": _FieldOnFrozen(b, frozen.t, xrow)}, y_init, params, family
    )
    return avgs["b"].mean, avgs["b"].std_error


def estimate_averaged_diffusion(
    sigma: CoefficientField,
    frozen: FrozenEquation,
    params: ErgodicParams,
    family: StreamFamily,
    *,
    y_init=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Time average of a = sigma sigma^T / 2 over the frozen trajectory.

    Returns (a-bar(t, x), SE), both (d, d); the mean is symmetrized to
    remove roundoff asymmetry.
    """
    _, hor = params.resolve(frozen.beta)
    _min_horizon(frozen.beta, hor)
    if y_init is None:
        y_init = np.zeros(frozen.l)
    avgs, _ = time_average_functionals(
        frozen, {"a": _HalfOuterOnFrozen(sigma, frozen.t, frozen.x)}, y_init, params, family
    )
    d = sigma.out_dim
    abar = avgs["a"].mean.reshape(d, d)
    abar = (abar + abar.T) / 2.0
    se = avgs["a"].std_error.reshape(d, d)
    return abar, se


@dataclass
class _FieldOnFrozen:
    """b(t, x, .) as a functional of the frozen state (picklable)."""

    fld: CoefficientField
    t: float
    x: np.ndarray

    def __call__(self, y):
        xb = np.broadcast_to(self.x, (y.shape[0], self.x.size))
        return self.fld(self.t, xb, y).reshape(y.shape[0], -1)


@dataclass
class _HalfOuterOnFrozen:
    """sigma sigma^T / 2 as a functional of the frozen state."""

    fld: CoefficientField
    t: float
    x: np.ndarray

    def __call__(self, y):
        xb = np.broadcast_to(self.x, (y.shape[0], self.x.size))
        s = self.fld(self.t, xb, y)
        return (0.5 * np.einsum("nij,nkj->nik", s, s)).reshape(y.shape[0], -1)


def psd_sqrt(a_bar, *, sym_tol: float = 1e-10, eig_tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD solution of sigma sigma^T = 2 a.

    Eigenvalues of ``a_bar`` below -eig_tol raise NotPSD; small negative
    eigenvalues within tolerance are clamped to zero.  Asymmetry beyond
    ``sym_tol`` raises NotSymmetric.
    """
    A = np.atleast_2d(np.asarray(a_bar, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if asym > sym_tol:
        raise NotSymmetric(f"asymmetry {asym:.3g} exceeds tolerance {sym_tol:.3g}")
    S = (A + A.T) / 2.0
    w, Q = np.linalg.eigh(S)
    if w.min() < -eig_tol:
        raise NotPSD(f"eigenvalue {w.min():.3g} below -{eig_tol:.3g}")
    w = np.clip(w, 0.0, None)
    root = (Q * np.sqrt(2.0 * w)) @ Q.T
    return (root + root.T) / 2.0


# ---------------------------------------------------------------------------
# averaged model: tabulation, interpolation, serialization


def multilinear_interpolate(axes, values, pts):
    """Multilinear interpolation on a rectilinear grid, constant outside.

    axes: sequence of sorted 1-D arrays; values has shape
    (len(axes[0]), ..., len(axes[-1]), *tail); pts is (n, len(axes)).
    Returns (out (n, *tail), n_outside).
    """
    pts = np.asarray(pts, dtype=float)
    n, na = pts.shape
    idx0, frac = [], []
    outside = np.zeros(n, dtype=bool)
    for a in range(na):
        ax = axes[a]
        p = pts[:, a]
        outside |= (p < ax[0]) | (p > ax[-1])
        if ax.size == 1:
            idx0.append(np.zeros(n, dtype=np.intp))
            frac.append(np.zeros(n))
            continue
        j = np.clip(np.searchsorted(ax, p, side="right") - 1, 0, ax.size - 2)
        f = (p - ax[j]) / (ax[j + 1] - ax[j])
        idx0.append(j)
        frac.append(np.clip(f, 0.0, 1.0))
    tail = values.shape[na:]
    out = np.zeros((n,) + tail)
    for corner in range(1 << na):
        w = np.ones(n)
        ix = []
        for a in range(na):
            hi = (corner >> a) & 1
            if axes[a].size == 1:
                ix.append(idx0[a])
                if hi:
                    w = w * 0.0
                continue
            ix.append(idx0[a] + hi)
            w = w * (frac[a] if hi else 1.0 - frac[a])
        if not np.any(w):
            continue
        out += w.reshape((n,) + (1,) * len(tail)) * values[tuple(ix)]
    return out, int(np.count_nonzero(outside))


@dataclass
class AveragedModel:
    """Tabulated averaged coefficients with multilinear interpolation.

    Values live on the product grid t_nodes x x_axes; queries outside the
    hull use constant extrapolation and are counted on ``extrapolations``.
    """

    t_nodes: np.ndarray
    x_axes: tuple[np.ndarray, ...]
    drift_table: np.ndarray  # (nt, *nx, d)
    diffusion_table: np.ndarray  # (nt, *nx, d, d)
    se_drift: np.ndarray
    se_diffusion_sq: np.ndarray  # SEs of the a-bar entries
    metadata: dict = field(default_factory=dict)
    extrapolations: int = 0

    def __post_init__(self):
        self.t_nodes = np.asarray(self.t_nodes, dtype=float)
        self.x_axes = tuple(np.asarray(a, dtype=float) for a in self.x_axes)

    @property
    def d(self) -> int:
        return self.drift_table.shape[-1]

    def _axes(self):
        return (self.t_nodes,) + self.x_axes

    def _query(self, table, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pts = np.column_stack([np.full(x.shape[0], float(t)), x])
        out, n_out = multilinear_interpolate(self._axes(), table, pts)
        self.extrapolations += n_out
        return out

    def drift(self, t: float, x) -> np.ndarray:
        return self._query(self.drift_table, t, x)

    def diffusion(self, t: float, x) -> np.ndarray:
        return self._query(self.diffusion_table, t, x)

    def node_value(self, it: int, ix: tuple[int, ...]):
        return self.drift_table[(it,) + ix], self.diffusion_table[(it,) + ix]

    # -- flat-table serialization ------------------------------------------

    def column_names(self) -> list[str]:
        d = self.d
        cols = ["t"] + [f"x{a}" for a in range(len(self.x_axes))]
        cols += [f"bbar{i}" for i in range(d)]
        cols += [f"sigbar{i}_{j}" for i in range(d) for j in range(d)]
        cols += [f"se_bbar{i}" for i in range(d)]
        cols += [f"se_abar{i}_{j}" for i in range(d) for j in range(d)]
        return cols

    def to_csv(self, path) -> None:
        d = self.d
        shape = (self.t_nodes.size,) + tuple(a.size for a in self.x_axes)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.column_names()) + "\n")
            for flat in np.ndindex(shape):
                it, ix = flat[0], flat[1:]
                row = [self.t_nodes[it]]
                row += [self.x_axes[a][ix[a]] for a in range(len(ix))]
                row += list(self.drift_table[flat].ravel())
                row += list(self.diffusion_table[flat].ravel())
                row += list(self.se_drift[flat].ravel())
                row += list(self.se_diffusion_sq[flat].ravel())
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "AveragedModel":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        n_x = sum(1 for c in header if c.startswith("x") and not c.startswith("x_"))
        d = sum(1 for c in header if c.startswith("bbar"))
        t_nodes = np.unique(data[:, 0])
        x_axes = tuple(np.unique(data[:, 1 + a]) for a in range(n_x))
        shape = (t_nodes.size,) + tuple(a.size for a in x_axes)
        if int(np.prod(shape)) != data.shape[0]:
            raise ValueError("table rows do not form a full product grid")
        base = 1 + n_x
        order = np.lexsort(tuple(data[:, 1 + a] for a in reversed(range(n_x))) + (data[:, 0],))
        data = data[order]
        drift = data[:, base : base + d].reshape(shape + (d,))
        diff = data[:, base + d : base + d + d * d].reshape(shape + (d, d))
        se_b = data[:, base + d + d * d : base + 2 * d + d * d].reshape(shape + (d,))
        se_a = data[:, base + 2 * d + d * d :].reshape(shape + (d, d))
        return cls(t_nodes, x_axes, drift, diff, se_b, se_a)


@dataclass
class CallableAveragedModel:
    """Closed-form averaged coefficients with the AveragedModel interface.

    ``drift_fn(t, x)`` and ``diffusion_fn(t, x)`` receive x of shape
    (n, d) and must broadcast to (n, d) and (n, d, d).  Callables must be
    picklable (module-level functions / partials) to cross worker pools.
    """

    drift_fn: Callable
    diffusion_fn: Callable
    d: int = 1
    metadata: dict = field(default_factory=dict)
    extrapolations: int = 0

    def drift(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.drift_fn(t, x), dtype=float)
        return np.broadcast_to(out, (x.shape[0], self.d)).copy() if out.shape != (x.shape[0], self.d) else out

    def diffusion(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.asarray(self.diffusion_fn(t, x), dtype=float)
        target = (x.shape[0], self.d, self.d)
        return np.broadcast_to(out, target).copy() if out.shape != target else out


def tabulate_averaged_model(
    system: SlowFastSystem,
    t_nodes,
    x_nodes,
    params: ErgodicParams,
    family: StreamFamily,
) -> AveragedModel:
    """Estimate averaged drift and diffusion on a (t, x) product grid.

    Each node runs its own frozen trajectory (drift and diffusion share
    the pass); the diffusion factor is the symmetric PSD root of 2 a-bar.
    Node failures propagate with the node coordinates attached.
    """
    t_nodes = np.atleast_1d(np.asarray(t_nodes, dtype=float))
    if isinstance(x_nodes, (list, tuple)) and x_nodes and isinstance(x_nodes[0], (list, tuple, np.ndarray)):
        x_axes = tuple(np.atleast_1d(np.asarray(a, dtype=float)) for a in x_nodes)
    else:
        x_axes = (np.atleast_1d(np.asarray(x_nodes, dtype=float)),)
    if t_nodes.size == 0 or any(a.size == 0 for a in x_axes):
        raise ValueError("node grids must be non-empty")
    for a in (t_nodes,) + x_axes:
        if a.size > 1 and not np.all(np.diff(a) > 0):
            raise ValueError("node grids must be sorted strictly increasing")
    d = system.d
    if len(x_axes) != d:
        raise ValueError(f"need {d} x-axes, got {len(x_axes)}")

    shape = (t_nodes.size,) + tuple(a.size for a in x_axes)
    drift = np.empty(shape + (d,))
    diffusion = np.empty(shape + (d, d))
    se_b = np.empty(shape + (d,))
    se_a = np.empty(shape + (d, d))

    for flat_i, flat in enumerate(np.ndindex(shape)):
        it, ix = flat[0], flat[1:]
        t = float(t_nodes[it])
        x = np.array([x_axes[a][ix[a]] for a in range(d)])
        frozen = FrozenEquation.of_system(system, t, x)
        fam = family.child(flat_i)
        try:
            avgs, _ = time_average_functionals(
                frozen,
                {
                    "b": _FieldOnFrozen(system.slow_drift, t, x),
                    "a": _HalfOuterOnFrozen(system.slow_diffusion, t, x),
                },
                system.y0,
                params,
                fam,
            )
            abar = avgs["a"].mean.reshape(d, d)
            abar = (abar + abar.T) / 2.0
            drift[flat] = avgs["b"].mean
            diffusion[flat] = psd_sqrt(abar)
            se_b[flat] = avgs["b"].std_error
            se_a[flat] = avgs["a"].std_error.reshape(d, d)
        except Exception as exc:
            raise type(exc)(f"node (t={t}, x={x}): {exc}") from exc

    beta = system.beta
    return AveragedModel(
        t_nodes=t_nodes,
        x_axes=x_axes,
        drift_table=drift,
        diffusion_table=diffusion,
        se_drift=se_b,
        se_diffusion_sq=se_a,
        metadata={
            "system": system.name,
            "root": "symmetric-psd",
            "beta": beta,
            "burn_in": params.burn_in,
            "horizon": params.horizon,
            "step": params.step,
            "n_strands": params.n_strands,
        },
    )

"""Slow-fast local stochastic volatility pricing.

The spot follows dS = H S dt + F S dW with a fast mean-reverting factor
driving the local stochastic drift H and volatility F; working in the
log-price removes the multiplicative structure (drift H - F^2/2).  A
family of risk-neutral measures indexed by the market price of volatility
risk gamma_mpr is realized by simulating the changed system directly: the
slow drift becomes r - F^2/2 and the fast drift picks up the perturbation
-C Lambda at timescale exponent 1/2, with
Lambda = rho (H - r)/F + sqrt(1 - rho^2) gamma_mpr.

Prices are discounted expected payoffs at valuation time 0; payoffs are
capped (bounded continuous) by contract.  The averaged limit is a local
volatility model with rate R-bar and volatility F-bar = sqrt(avg F^2)
tabulated from the frozen-factor invariant measure.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coefficients import (
    CoefficientField,
    SlowFastSystem,
    VECTOR,
    constant_field,
    ou_fast_pair,
)
from .engine import NU_DEFAULT, check_dissipativity, integrate_batch, run_path_batches
from .errors import DegenerateVolatility, UnboundedPayoff
from .ergodic import (
    ErgodicParams,
    FrozenEquation,
    _FieldOnFrozen,
    multilinear_interpolate,
    time_average_functionals,
)
from .stochastic import (
    MonteCarloEstimate,
    PathBundle,
    RngStream,
    StreamFamily,
    TimeGrid,
    mc_estimate,
    scalar_correlation,
)


def _scalar(fieldobj: CoefficientField, t, x, y) -> np.ndarray:
    """Evaluate a scalar-valued field, returning shape (n,)."""
    return fieldobj(t, x, y)[:, 0]


# ---------------------------------------------------------------------------
# composite coefficient callables (picklable)


@dataclass(frozen=True)
class _LogDrift:
    """H - F^2 / 2, the Ito-corrected log-price drift."""

    H: CoefficientField
    F: CoefficientField

    def __call__(self, t, x, y):
        f = self.F(t, x, y)
        return self.H(t, x, y) - 0.5 * f * f


@dataclass(frozen=True)
class _ScalarAsMatrix:
    inner: CoefficientField

    def __call__(self, t, x, y):
        return self.inner(t, x, y)[:, :, None]


@dataclass(frozen=True)
class _VolRiskPerturbation:
    """-C Lambda with Lambda = rho (H - r)/F + sqrt(1 - rho^2) gamma."""

    C: CoefficientField
    H: CoefficientField
    F: CoefficientField
    r: CoefficientField
    gamma: CoefficientField
    rho: float

    def lam(self, t, x, y):
        theta = (self.H(t, x, y) - self.r(t, x, y)) / self.F(t, x, y)
        return self.rho * theta + math.sqrt(1.0 - self.rho**2) * self.gamma(t, x, y)

    def __call__(self, t, x, y):
        c = self.C(t, x, y)[:, :, 0]  # l = 1
        return -c * self.lam(t, x, y)


# ---------------------------------------------------------------------------
# model containers


@dataclass
class LSVModel:
    """Local stochastic volatility model in log coordinates.

    All coefficient fields are functions of (t, x, y) with x = log s.
    Declared bounds: |H| <= drift_bound, vol_floor <= F <= vol_cap, common
    Lipschitz constant and time-Hoelder exponent, and the fast pair's
    dissipativity constant.
    """

    name: str
    H: CoefficientField  # local stochastic drift
    F: CoefficientField  # local stochastic volatility
    fast_drift: CoefficientField
    fast_diffusion: CoefficientField
    rho: float
    s0: float
    y0: float
    horizon: float
    drift_bound: float
    vol_floor: float
    vol_cap: float
    lipschitz: float
    holder_time: float
    beta: float

    def __post_init__(self):
        if not (-1.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (-1, 1)")
        if not self.s0 > 0:
            raise ValueError("s0 must be positive")
        if not (0 < self.vol_floor <= self.vol_cap):
            raise ValueError("need 0 < vol_floor <= vol_cap")

    @property
    def x0(self) -> float:
        return math.log(self.s0)

    def validate(self, stream: RngStream | None = None, n_samples: int = 4096) -> float:
        """Spot-check the volatility bounds and dissipativity.

        Returns the estimated contraction constant; raises
        DegenerateVolatility when F leaves [vol_floor, vol_cap] on the
        sampled box.
        """
        if stream is None:
            stream = RngStream(0, (97,))
        _check_vol_bounds(self, stream, n_samples)
        return check_dissipativity(
            self.fast_drift, self.fast_diffusion, n_trials=n_samples, stream=stream
        )


def _check_vol_bounds(lsv: LSVModel, stream: RngStream, n_samples: int) -> None:
    z = stream.normals((n_samples, 2))
    x = lsv.x0 + 3.0 * np.tanh(z[:, :1]) * 2.0
    y = 4.0 * np.tanh(z[:, 1:])
    for t in np.linspace(0.0, lsv.horizon, 5):
        f = _scalar(lsv.F, float(t), x, y)
        if np.any(f < lsv.vol_floor - 1e-12) or np.any(f > lsv.vol_cap + 1e-12):
            raise DegenerateVolatility(
                f"F left [{lsv.vol_floor}, {lsv.vol_cap}] at t={t:.3g}: "
                f"range [{f.min():.6g}, {f.max():.6g}]"
            )


@dataclass
class MeasureChange:
    """Short rate and market price of volatility risk defining Q^gamma."""

    short_rate: CoefficientField
    gamma_mpr: CoefficientField
    rate_bound: float

    def theta(self, lsv: LSVModel, t, x, y) -> np.ndarray:
        return (_scalar(lsv.H, t, x, y) - _scalar(self.short_rate, t, x, y)) / _scalar(
            lsv.F, t, x, y
        )


def to_log_system(lsv: LSVModel) -> SlowFastSystem:
    """Objective-measure log-price system: drift H - F^2/2, diffusion F."""
    b = CoefficientField(
        name=f"{lsv.name}-log-drift", d=1, l=1, kind=VECTOR, out_dim=1,
        fn=_LogDrift(lsv.H, lsv.F),
        lipschitz=lsv.lipschitz * (1.0 + lsv.vol_cap), holder_time=lsv.holder_time,
        sublinear=lsv.drift_bound + 0.5 * lsv.vol_cap**2,
    )
    sigma = CoefficientField(
        name=f"{lsv.name}-log-vol", d=1, l=1, kind="matrix", out_dim=1,
        fn=_ScalarAsMatrix(lsv.F),
        lipschitz=lsv.lipschitz, holder_time=lsv.holder_time, sublinear=lsv.vol_cap,
    )
    return SlowFastSystem(
        name=f"{lsv.name}-log",
        slow_drift=b, slow_diffusion=sigma,
        fast_drift=lsv.fast_drift, fast_diffusion=lsv.fast_diffusion,
        correlation=scalar_correlation(lsv.rho),
        x0=[lsv.x0], y0=[lsv.y0], horizon=lsv.horizon,
    )


def risk_neutralize(lsv: LSVModel, mc: MeasureChange) -> SlowFastSystem:
    """Log-price system under the risk-neutral measure Q^gamma.

    Slow drift r - F^2/2 with diffusion F against the changed driver; the
    fast drift keeps B plus the perturbation -C Lambda at exponent 1/2.
    The change of measure is realized by simulating this system with
    fresh independent drivers.
    """
    stream = RngStream(0, (101,))
    _check_vol_bounds(lsv, stream, 4096)
    b = CoefficientField(
        name=f"{lsv.name}-rn-drift", d=1, l=1, kind=VECTOR, out_dim=1,
        fn=_LogDrift(mc.short_rate, lsv.F),
        lipschitz=lsv.lipschitz * (1.0 + lsv.vol_cap), holder_time=lsv.holder_time,
        sublinear=mc.rate_bound + 0.5 * lsv.vol_cap**2,
    )
    sigma = CoefficientField(
        name=f"{lsv.name}-rn-vol", d=1, l=1, kind="matrix", out_dim=1,
        fn=_ScalarAsMatrix(lsv.F),
        lipschitz=lsv.lipschitz, holder_time=lsv.holder_time, sublinear=lsv.vol_cap,
    )
    lam_bound = abs(lsv.rho) * (lsv.drift_bound + mc.rate_bound) / lsv.vol_floor
    pert = CoefficientField(
        name=f"{lsv.name}-vol-risk", d=1, l=1, kind=VECTOR, out_dim=1,
        fn=_VolRiskPerturbation(lsv.fast_diffusion, lsv.H, lsv.F,
                                mc.short_rate, mc.gamma_mpr, lsv.rho),
        holder_time=lsv.holder_time, sublinear=lam_bound,
    )
    return SlowFastSystem(
        name=f"{lsv.name}-rn",
        slow_drift=b, slow_diffusion=sigma,
        fast_drift=lsv.fast_drift, fast_diffusion=lsv.fast_diffusion,
        correlation=scalar_correlation(lsv.rho),
        x0=[lsv.x0], y0=[lsv.y0], horizon=lsv.horizon,
        perturbation=pert, perturbation_exponent=0.5,
    )


def girsanov_weight(bundle: PathBundle, lsv: LSVModel, mc: MeasureChange) -> MonteCarloEstimate:
    """Per-path Radon-Nikodym weights dQ/dP from stored increments.

    The bundle must come from an objective-measure simulation with
    ``store_increments=True``.  Returns the Monte Carlo estimate of the
    weight mean, which should sit at 1 (exponential-martingale check).
    """
    if "dW" not in bundle.metadata or "dZ" not in bundle.metadata:
        raise ValueError("bundle was simulated without store_increments=True")
    X = bundle.component("X")
    Y = bundle.component("Y")
    dW = bundle.metadata["dW"][:, :, 0]
    dZ = bundle.metadata["dZ"][:, :, 0]
    grid = bundle.grid
    h = grid.h
    log_w = np.zeros(bundle.n_paths)
    for k in range(grid.n_steps):
        t = grid.t0 + k * h
        xk, yk = X[:, k, :], Y[:, k, :]
        theta = mc.theta(lsv, t, xk, yk)
        gam = _scalar(mc.gamma_mpr, t, xk, yk)
        log_w += theta * dW[:, k] + gam * dZ[:, k] - 0.5 * (theta**2 + gam**2) * h
    return mc_estimate(np.exp(log_w))


# ---------------------------------------------------------------------------
# averaged local volatility


@dataclass
class LocalVolModel:
    """Tabulated local-volatility limit in price coordinates.

    rate(t, s) is the averaged short rate and vol(t, s) the root of the
    averaged squared volatility, both bilinear on the (t, s) grid with
    constant extrapolation outside.
    """

    t_nodes: np.ndarray
    s_nodes: np.ndarray
    rate_table: np.ndarray  # (nt, ns)
    vol_table: np.ndarray  # (nt, ns)
    se_rate: np.ndarray
    se_vol: np.ndarray
    metadata: dict = field(default_factory=dict)
    extrapolations: int = 0

    d = 1  # averaged log dynamics are scalar

    def _query(self, table, t, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts = np.column_stack([np.full(s.shape[0], float(t)), s])
        out, n_out = multilinear_interpolate((self.t_nodes, self.s_nodes), table, pts)
        self.extrapolations += n_out
        return out

    def rate(self, t: float, s) -> np.ndarray:
        return self._query(self.rate_table, t, s)

    def vol(self, t: float, s) -> np.ndarray:
        return self._query(self.vol_table, t, s)

    # AveragedModel interface for the log-price dynamics
    def drift(self, t: float, x) -> np.ndarray:
        s = np.exp(np.asarray(x, dtype=float)[:, 0])
        f = self.vol(t, s)
        return (self.rate(t, s) - 0.5 * f * f)[:, None]

    def diffusion(self, t: float, x) -> np.ndarray:
        s = np.exp(np.asarray(x, dtype=float)[:, 0])
        return self.vol(t, s)[:, None, None]


@dataclass(frozen=True)
class _SquaredVol:
    F: CoefficientField
    t: float
    x: np.ndarray

    def __call__(self, y):
        xb = np.broadcast_to(self.x, (y.shape[0], self.x.size))
        f = self.F(self.t, xb, y)[:, 0]
        return (f * f)[:, None]


def averaged_local_vol(
    lsv: LSVModel,
    mc: MeasureChange,
    t_nodes,
    s_nodes,
    params: ErgodicParams,
    family: StreamFamily,
) -> LocalVolModel:
    """Tabulate the averaged rate and volatility on a (t, s) grid.

    At each node the frozen fast factor is run at x = log s; the rate
    averages linearly while the volatility averages in squares,
    F-bar = sqrt(avg F^2).
    """
    t_nodes = np.atleast_1d(np.asarray(t_nodes, dtype=float))
    s_nodes = np.atleast_1d(np.asarray(s_nodes, dtype=float))
    if np.any(s_nodes <= 0):
        raise ValueError("price nodes must be positive")
    nt, ns = t_nodes.size, s_nodes.size
    rate = np.empty((nt, ns))
    volv = np.empty((nt, ns))
    se_r = np.empty((nt, ns))
    se_v = np.empty((nt, ns))
    for flat, (it, isx) in enumerate(np.ndindex(nt, ns)):
        t = float(t_nodes[it])
        x = np.array([math.log(s_nodes[isx])])
        frozen = FrozenEquation(lsv.fast_drift, lsv.fast_diffusion, t, x)
        avgs, _ = time_average_functionals(
            frozen,
            {"r": _FieldOnFrozen(mc.short_rate, t, x), "f2": _SquaredVol(lsv.F, t, x)},
            np.array([lsv.y0]),
            params,
            family.child(flat),
        )
        rate[it, isx] = avgs["r"].mean[0]
        se_r[it, isx] = avgs["r"].std_error[0]
        f2 = max(avgs["f2"].mean[0], lsv.vol_floor**2)
        volv[it, isx] = math.sqrt(f2)
        se_v[it, isx] = avgs["f2"].std_error[0] / (2.0 * math.sqrt(f2))
    return LocalVolModel(
        t_nodes=t_nodes, s_nodes=s_nodes,
        rate_table=rate, vol_table=volv, se_rate=se_r, se_vol=se_v,
        metadata={"model": lsv.name, "burn_in": params.burn_in,
                  "horizon": params.horizon, "n_strands": params.n_strands},
    )


# ---------------------------------------------------------------------------
# payoffs


def _weight_one(theta: np.ndarray) -> np.ndarray:
    return np.ones_like(theta)


def _weight_ramp(theta: np.ndarray) -> np.ndarray:
    # rises linearly from 0 at the oldest lag to 1 at expiry
    span = max(-float(theta[0]), 1e-300)
    return 1.0 + theta / span


WEIGHT_CATALOG: dict[str, Callable] = {"one": _weight_one, "ramp": _weight_ramp}

OPTION_KINDS = ("european", "asian", "lookback", "custom-bounded")


@dataclass(frozen=True)
class OptionSpec:
    """Bounded payoff specification priced at valuation time 0.

    The cap is mandatory: pricing theory here covers bounded continuous
    payoffs only, so an uncapped call is rejected (recommended cap:
    10 * s0).  For lookbacks the running supremum is taken over the
    window-averaged weighted path with window width ``smoothing`` (default
    4 grid steps at payoff-evaluation time).
    """

    kind: str
    strike: float = 1.0
    cap: float | None = None
    maturity: float = 1.0
    valuation_time: float = 0.0
    smoothing: float | None = None  # lookback window width
    weight: str | Callable = "one"
    custom_payoff: Callable | None = None  # (grid, S (B, nodes)) -> (B,)
    custom_bound: float | None = None

    def __post_init__(self):
        if self.kind not in OPTION_KINDS:
            raise ValueError(f"unknown option kind {self.kind!r}; known: {OPTION_KINDS}")
        if self.kind == "custom-bounded":
            if self.custom_payoff is None or self.custom_bound is None:
                raise UnboundedPayoff("custom payoffs need an explicit bound")
        elif self.cap is None:
            raise UnboundedPayoff(f"{self.kind} payoff declared without a cap")
        if not (0.0 <= self.valuation_time <= self.maturity):
            raise ValueError("valuation time must lie in [0, maturity]")
        if self.valuation_time != 0.0:
            raise ValueError("conditional valuation (tau > 0) is not supported")

    @property
    def bound(self) -> float:
        return self.custom_bound if self.kind == "custom-bounded" else float(self.cap)

    def weight_fn(self) -> Callable:
        if callable(self.weight):
            return self.weight
        return WEIGHT_CATALOG[self.weight]


def window_average_paths(grid: TimeGrid, paths: np.ndarray, weights: np.ndarray,
                         delta: float) -> np.ndarray:
    """Trailing window means of a weighted path on the maturity clock.

    theta_i = t_i - T runs over [-T, 0]; the value at theta is the mean of
    weight * path over [max(theta - delta, -T), theta], computed from the
    trapezoid prefix integral (single-node windows fall back to the node
    value).  Constant paths with unit weight are reproduced exactly for
    every delta.
    """
    if delta <= 0:
        raise ValueError("window width must be positive")
    nodes = grid.nodes()
    theta = nodes - nodes[-1]
    w = paths * weights
    h = grid.h
    prefix = np.zeros_like(w)
    np.cumsum(0.5 * h * (w[:, 1:] + w[:, :-1]), axis=1, out=prefix[:, 1:])
    lower = np.maximum(theta - delta, theta[0])
    j = np.clip(np.searchsorted(theta, lower, side="right") - 1, 0, len(theta) - 2)
    frac = (lower - theta[j]) / (theta[j + 1] - theta[j])
    prefix_lo = prefix[:, j] * (1.0 - frac) + prefix[:, j + 1] * frac
    length = theta - lower
    out = np.empty_like(w)
    pos = length > 1e-300
    out[:, pos] = (prefix[:, pos] - prefix_lo[:, pos]) / length[pos]
    out[:, ~pos] = w[:, ~pos]
    return out


def mollify_lookback(psi0: Callable, weight: Callable, delta: float) -> Callable:
    """Build the smoothed lookback functional on discrete paths.

    Returns ``functional(grid, S) -> (B,)`` computing
    psi0(S_T, sup_theta window_mean(weight * S)) with the running integral
    discretized trapezoidally and the window clamped at the path start.
    """

    def functional(grid: TimeGrid, S: np.ndarray) -> np.ndarray:
        theta = grid.nodes() - grid.t_end
        wvals = np.asarray(weight(theta), dtype=float)
        smooth = window_average_paths(grid, S, wvals, delta)
        return psi0(S[:, -1], np.max(smooth, axis=1))

    return functional


def evaluate_payoff(spec: OptionSpec, grid: TimeGrid, S: np.ndarray) -> np.ndarray:
    """Payoff per path from price trajectories S of shape (B, nodes)."""
    if spec.kind == "european":
        vals = np.minimum(np.maximum(S[:, -1] - spec.strike, 0.0), spec.cap)
    elif spec.kind == "asian":
        h = grid.h
        avg = (0.5 * h * (S[:, 0] + S[:, -1]) + h * S[:, 1:-1].sum(axis=1)) / grid.span
        vals = np.minimum(np.maximum(avg - spec.strike, 0.0), spec.cap)
    elif spec.kind == "lookback":
        delta = spec.smoothing if spec.smoothing is not None else 4.0 * grid.h
        fn = mollify_lookback(
            lambda sT, m: np.minimum(np.maximum(m - spec.strike, 0.0), spec.cap),
            spec.weight_fn(),
            delta,
        )
        vals = fn(grid, S)
    else:
        vals = np.asarray(spec.custom_payoff(grid, S), dtype=float)
    worst = float(np.max(np.abs(vals))) if vals.size else 0.0
    if worst > spec.bound + 1e-9:
        raise UnboundedPayoff(f"payoff exceeded declared bound: {worst} > {spec.bound}")
    return vals


# ---------------------------------------------------------------------------
# pricing


def _trapz_weights(n_nodes: int, h: float) -> np.ndarray:
    w = np.full(n_nodes, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True)
class _SystemPriceTask:
    system: SlowFastSystem
    eps: float
    grid: TimeGrid
    family: StreamFamily
    spec: OptionSpec
    mc: MeasureChange
    substeps: int | None
    nu: int

    def __call__(self, rng):
        lo, hi = rng
        res = integrate_batch(
            self.system, self.eps, self.grid, self.family, lo, hi,
            substeps=self.substeps, nu=self.nu,
        )
        X, Y = res["X"], res["Y"]
        S = np.exp(X[:, :, 0])
        nodes = self.grid.nodes()
        rsum = np.zeros(S.shape[0])
        w = _trapz_weights(nodes.size, self.grid.h)
        for k, t in enumerate(nodes):
            rsum += w[k] * _scalar(self.mc.short_rate, float(t), X[:, k, :], Y[:, k, :])
        payoff = evaluate_payoff(self.spec, self.grid, S)
        return np.exp(-rsum) * payoff


@dataclass(frozen=True)
class _LocalVolPriceTask:
    model: LocalVolModel
    x0: float
    grid: TimeGrid
    family: StreamFamily
    spec: OptionSpec

    def __call__(self, rng):
        from .convergence import integrate_averaged_batch

        lo, hi = rng
        paths, _ = integrate_averaged_batch(
            self.model, np.array([self.x0]), self.grid, self.family, lo, hi
        )
        S = np.exp(paths[:, :, 0])
        nodes = self.grid.nodes()
        w = _trapz_weights(nodes.size, self.grid.h)
        rsum = np.zeros(S.shape[0])
        for k, t in enumerate(nodes):
            rsum += w[k] * self.model.rate(float(t), S[:, k])
        payoff = evaluate_payoff(self.spec, self.grid, S)
        return np.exp(-rsum) * payoff


def price(
    target,
    spec: OptionSpec,
    mc: MeasureChange,
    n_paths: int,
    family: StreamFamily,
    *,
    eps: float | None = None,
    grid: TimeGrid | None = None,
    substeps: int | None = None,
    nu: int = NU_DEFAULT,
    batch_size: int = 4096,
    workers: int = 1,
) -> MonteCarloEstimate:
    """Discounted expected payoff under the risk-neutral dynamics.

    ``target`` is either a risk-neutral SlowFastSystem (then ``eps`` is
    required) or a LocalVolModel limit.  Discounting accumulates the
    simulated short rate by the trapezoid rule on the grid.
    """
    if grid is None:
        horizon = spec.maturity
        grid = TimeGrid(0.0, horizon, 256)
    if abs(grid.t_end - spec.maturity) > 1e-12:
        raise ValueError("grid horizon must match the option maturity")
    if isinstance(target, SlowFastSystem):
        if eps is None:
            raise ValueError("pricing a slow-fast system requires eps")
        task = _SystemPriceTask(target, eps, grid, family, spec, mc, substeps, nu)
    elif isinstance(target, LocalVolModel):
        if "s0" not in target.metadata:
            raise ValueError("LocalVolModel metadata must carry the spot s0")
        task = _LocalVolPriceTask(target, math.log(target.metadata["s0"]), grid, family, spec)
    else:
        raise TypeError(f"cannot price a {type(target).__name__}")
    parts = run_path_batches(task, n_paths, batch_size, workers)
    return mc_estimate(np.concatenate(parts))


def price_from_bundle(bundle: PathBundle, spec: OptionSpec, mc: MeasureChange) -> MonteCarloEstimate:
    """Price a payoff on already-simulated risk-neutral paths.

    Shares paths across specs, so payoff algebra (linearity, monotone
    dominance in cap and strike) holds exactly path by path.
    """
    X = bundle.component("X")
    Y = bundle.component("Y")
    S = np.exp(X[:, :, 0])
    grid = bundle.grid
    nodes = grid.nodes()
    w = _trapz_weights(nodes.size, grid.h)
    rsum = np.zeros(S.shape[0])
    for k, t in enumerate(nodes):
        rsum += w[k] * _scalar(mc.short_rate, float(t), X[:, k, :], Y[:, k, :])
    return mc_estimate(np.exp(-rsum) * evaluate_payoff(spec, grid, S))


# ---------------------------------------------------------------------------
# price-convergence experiment


@dataclass(frozen=True)
class PriceRow:
    epsilon: float  # 0.0 marks the averaged limit
    estimate: MonteCarloEstimate
    gap_vs_limit: float
    wall_ms: float


@dataclass
class PriceTable:
    eps_list: list[float]
    rows: list[PriceRow]
    metadata: dict = field(default_factory=dict)

    def row(self, epsilon: float) -> PriceRow:
        for r in self.rows:
            if r.epsilon == epsilon:
                return r
        raise KeyError(epsilon)

    def to_csv(self, path, include_timing: bool = False) -> None:
        """Schema: epsilon, price, std_error, n_paths, gap_vs_limit,
        wall_ms; the epsilon = 0 row is the averaged limit (gap 0)."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epsilon,price,std_error,n_paths,gap_vs_limit,wall_ms\n")
            for r in self.rows:
                wall = r.wall_ms if include_timing else 0.0
                fh.write(
                    f"{r.epsilon:.17g},{r.estimate.mean:.17g},{r.estimate.std_error:.17g},"
                    f"{r.estimate.n_samples},{r.gap_vs_limit:.17g},{wall:.0f}\n"
                )


def price_convergence_experiment(
    lsv: LSVModel,
    mc: MeasureChange,
    spec: OptionSpec,
    eps_list,
    n_paths: int,
    *,
    family: StreamFamily,
    grid: TimeGrid | None = None,
    t_nodes=None,
    s_nodes=None,
    ergodic: ErgodicParams | None = None,
    limit_model: LocalVolModel | None = None,
    substeps: int | None = None,
    nu: int = NU_DEFAULT,
    batch_size: int = 4096,
    workers: int = 1,
) -> PriceTable:
    """Price the option across the timescale sweep and at the limit.

    The slow-fast prices use the risk-neutral system; the limit price uses
    the tabulated local-volatility model (supplied or tabulated here).
    All cells are independently seeded.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    if grid is None:
        grid = TimeGrid(0.0, spec.maturity, 256)
    rn = risk_neutralize(lsv, mc)
    if limit_model is None:
        if ergodic is None:
            ergodic = ErgodicParams(n_strands=16)
        if t_nodes is None:
            t_nodes = np.linspace(0.0, spec.maturity, 3)
        if s_nodes is None:
            s_nodes = lsv.s0 * np.linspace(0.25, 2.5, 10)
        limit_model = averaged_local_vol(lsv, mc, t_nodes, s_nodes, ergodic, family.child(900))
    limit_model.metadata.setdefault("s0", lsv.s0)

    t0 = time.perf_counter()
    limit_est = price(limit_model, spec, mc, n_paths, family.child(901),
                      grid=grid, batch_size=batch_size, workers=workers)
    limit_wall = (time.perf_counter() - t0) * 1000.0

    rows = []
    for i, eps in enumerate(eps_list, start=1):
        t1 = time.perf_counter()
        est = price(rn, spec, mc, n_paths, family.child(i), eps=eps, grid=grid,
                    substeps=substeps, nu=nu, batch_size=batch_size, workers=workers)
        wall = (time.perf_counter() - t1) * 1000.0
        rows.append(PriceRow(eps, est, abs(est.mean - limit_est.mean), wall))
    rows.append(PriceRow(0.0, limit_est, 0.0, limit_wall))
    return PriceTable(eps_list=eps_list, rows=rows,
                      metadata={"option": spec.kind, "strike": spec.strike,
                                "cap": spec.cap, "limit_model": limit_model.metadata})


# ---------------------------------------------------------------------------
# catalog


def _tanh_vol(t, x, y):
    return 0.25 + 0.05 * np.tanh(y)


def lsv_tanh_model(
    rho: float = 0.3, s0: float = 1.0, y0: float = 0.0, horizon: float = 1.0
) -> LSVModel:
    """Reference finance model: H = 0.05, F = 0.25 + 0.05 tanh y over a
    unit-noise OU factor with rate 2.

    Every declared bound is verifiable by the module's own validators:
    |H| <= 0.05, F in [0.2, 0.3], Lipschitz 0.05 in y, beta = 2.
    """
    H = constant_field("lsv-tanh-drift", 1, 1, [0.05], VECTOR)
    F = CoefficientField(
        name="lsv-tanh-vol", d=1, l=1, kind=VECTOR, out_dim=1, fn=_tanh_vol,
        lipschitz=0.05, holder_time=1.0, sublinear=0.3,
    )
    B, C = ou_fast_pair(1, 1, kappa=2.0, noise=1.0)
    return LSVModel(
        name="lsv-tanh", H=H, F=F, fast_drift=B, fast_diffusion=C,
        rho=rho, s0=s0, y0=y0, horizon=horizon,
        drift_bound=0.05, vol_floor=0.2, vol_cap=0.3,
        lipschitz=0.05, holder_time=1.0, beta=2.0,
    )


def standard_measure_change(rate: float = 0.02, gamma: float = 0.1) -> MeasureChange:
    return MeasureChange(
        short_rate=constant_field("short-rate", 1, 1, [rate], VECTOR),
        gamma_mpr=constant_field("gamma-mpr", 1, 1, [gamma], VECTOR),
        rate_bound=abs(rate),
    )


LSV_CATALOG: dict[str, Callable[..., LSVModel]] = {"lsv-tanh": lsv_tanh_model}


def lsv_from_catalog(name: str, **params) -> LSVModel:
    try:
        factory = LSV_CATALOG[name]
    except KeyError:
        known = ", ".join(sorted(LSV_CATALOG))
        raise KeyError(f"unknown LSV model {name!r}; catalog: {known}") from None
    return factory(**params)

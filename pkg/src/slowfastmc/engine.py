"""Coupled slow-fast integration and a-priori diagnostics.

The integrator is explicit Euler-Maruyama.  The fast equation is stiff
(drift of order 1/eps), so every slow step of width h is internally split
into substeps of width at most eps/nu (nu = 20 by default); states are
recorded on the slow grid only.  The averaging-window variant co-simulates
the true pair (X, Y) and the window-frozen pair (X_aux, Y_aux) on shared
noise: within each window of width Delta the frozen pair sees coefficients
evaluated at the window-start time and the *true* slow state there, and
Y_aux is re-anchored to Y at every window start while X_aux stays
continuous.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .coefficients import SlowFastSystem
from .errors import DegenerateEpsilon, DissipativityViolated, NumericalBlowup, StepTooCoarse
from .stochastic import (
    PathBundle,
    RngStream,
    StreamFamily,
    TimeGrid,
    path_batches,
    stack_labels,
)

NU_DEFAULT = 20  # fast micro-substeps per unit of eps
GUARD_DEFAULT = 1e8  # overflow guard on any state component
_NOISE_BLOCK_FLOATS = 20_000_000  # ~160 MB of noise per batch chunk


def khasminskii_delta(eps: float) -> float:
    """Averaging-window width eps * (ln(1/eps))^(1/4).

    Defined for eps strictly inside (0, 1); the width shrinks to zero
    while the window-to-timescale ratio Delta/eps diverges.
    """
    if not (0.0 < eps < 1.0):
        raise DegenerateEpsilon(f"eps must lie in (0, 1), got {eps}")
    return eps * math.log(1.0 / eps) ** 0.25


def substep_count(h: float, eps: float, nu: int = NU_DEFAULT, substeps: int | None = None) -> int:
    """Number of fast substeps per slow step of width h.

    The default policy chooses the smallest count with h_sub <= eps/nu.
    An explicit override must still satisfy h_sub <= eps, otherwise the
    1/eps drift is unresolvable and StepTooCoarse is raised.
    """
    if substeps is None:
        return max(1, math.ceil(h * nu / eps))
    n = int(substeps)
    if n < 1:
        raise StepTooCoarse("substeps must be >= 1")
    if h / n > eps * (1 + 1e-12):
        raise StepTooCoarse(
            f"substep width {h / n:.3g} exceeds eps = {eps:.3g}; the fast drift is unresolved"
        )
    return n


def _draw_block(streams: Sequence[RngStream], rows: int, cols: int) -> np.ndarray:
    """(n_streams, rows, cols) standard normals; stream i fills row-block i.

    Each stream is advanced sequentially, so repeated calls continue the
    per-path substream regardless of block boundaries.
    """
    out = np.empty((len(streams), rows, cols))
    for i, s in enumerate(streams):
        out[i] = s.normals((rows, cols))
    return out


def _blowup_check(arrays, guard: float, k: int, lo: int) -> None:
    for arr in arrays:
        flat = np.abs(arr).max(axis=tuple(range(1, arr.ndim)))
        bad = ~(flat <= guard)  # catches NaN as well
        if bad.any():
            idx = int(np.argmax(bad))
            raise NumericalBlowup(
                f"state exceeded overflow guard at slow step {k} (path {lo + idx})",
                path_index=lo + idx,
            )


def integrate_batch(
    system: SlowFastSystem,
    eps: float,
    grid: TimeGrid,
    family: StreamFamily,
    lo: int,
    hi: int,
    *,
    substeps: int | None = None,
    nu: int = NU_DEFAULT,
    delta: float | None = None,
    store_increments: bool = False,
    guard: float = GUARD_DEFAULT,
) -> dict[str, np.ndarray]:
    """Simulate paths lo..hi-1 of the coupled system on one grid.

    Returns arrays keyed "X", "Y" of shape (B, n_nodes, d|l); when a
    window width ``delta`` is given, the frozen-window pair is co-simulated
    on the same noise and returned under "X_aux", "Y_aux".  With
    ``store_increments`` the per-slow-step driver increments "dW", "dZ"
    are returned as well.
    """
    if not (0.0 < eps <= 1.0):
        raise DegenerateEpsilon(f"eps must lie in (0, 1], got {eps}")
    d, l = system.d, system.l
    spec = system.correlation
    B = hi - lo
    n_steps = grid.n_steps
    n_sub = substep_count(grid.h, eps, nu=nu, substeps=substeps) if n_steps else 1
    h_sub = grid.h / n_sub if n_steps else 0.0
    sqrt_h = math.sqrt(h_sub) if h_sub else 0.0
    inv_eps = 1.0 / eps
    inv_sqrt_eps = 1.0 / math.sqrt(eps)
    pert = system.perturbation
    pert_scale = eps ** (-system.perturbation_exponent) if pert is not None else 0.0
    with_aux = delta is not None

    X = np.broadcast_to(system.x0, (B, d)).copy()
    Y = np.broadcast_to(system.y0, (B, l)).copy()
    out = {
        "X": np.empty((B, n_steps + 1, d)),
        "Y": np.empty((B, n_steps + 1, l)),
    }
    out["X"][:, 0] = X
    out["Y"][:, 0] = Y
    if with_aux:
        Xa = X.copy()
        Ya = Y.copy()
        out["X_aux"] = np.empty((B, n_steps + 1, d))
        out["Y_aux"] = np.empty((B, n_steps + 1, l))
        out["X_aux"][:, 0] = Xa
        out["Y_aux"][:, 0] = Ya
        window = -1
        t_frozen = grid.t0
        x_frozen = X.copy()
    if store_increments:
        out["dW"] = np.zeros((B, n_steps, d))
        out["dZ"] = np.zeros((B, n_steps, l))

    streams = family.streams(lo, hi)
    m = d + l
    scalar_pair = d == 1 and l == 1

    def matvec(mat, vec):
        if scalar_pair:
            return mat[:, :, 0] * vec
        return np.einsum("nij,nj->ni", mat, vec)

    chunk_steps = max(1, min(n_steps, _NOISE_BLOCK_FLOATS // max(1, B * n_sub * m)))
    noise = None
    noise_at = 0

    for k in range(n_steps):
        if noise is None or k >= noise_at + noise.shape[1] // n_sub:
            rows = min(chunk_steps, n_steps - k) * n_sub
            noise = _draw_block(streams, rows, m)
            noise_at = k
        base = (k - noise_at) * n_sub
        for j in range(n_sub):
            t = grid.t0 + (k * n_sub + j) * h_sub
            z = noise[:, base + j, :]
            dW = sqrt_h * z[:, :d]
            dZ = sqrt_h * z[:, d:]
            dWt = dW @ spec.rho + dZ * spec.residual
            if store_increments:
                out["dW"][:, k] += dW
                out["dZ"][:, k] += dZ

            if with_aux:
                cur = int(math.floor((t - grid.t0 + 1e-12) / delta))
                if cur != window:
                    window = cur
                    t_frozen = grid.t0 + cur * delta
                    x_frozen = X.copy()
                    Ya = Y.copy()

            bv = system.slow_drift(t, X, Y)
            sv = system.slow_diffusion(t, X, Y)
            Bv = system.fast_drift(t, X, Y)
            Cv = system.fast_diffusion(t, X, Y)
            drift_fast = Bv * inv_eps
            if pert is not None:
                drift_fast = drift_fast + pert_scale * pert(t, X, Y)
            X_new = X + bv * h_sub + matvec(sv, dW)
            Y_new = Y + drift_fast * h_sub + inv_sqrt_eps * matvec(Cv, dWt)

            if with_aux:
                bva = system.slow_drift(t_frozen, x_frozen, Ya)
                sva = system.slow_diffusion(t_frozen, x_frozen, Ya)
                Bva = system.fast_drift(t_frozen, x_frozen, Ya)
                Cva = system.fast_diffusion(t_frozen, x_frozen, Ya)
                drift_fast_a = Bva * inv_eps
                if pert is not None:
                    drift_fast_a = drift_fast_a + pert_scale * pert(t_frozen, x_frozen, Ya)
                Xa = Xa + bva * h_sub + matvec(sva, dW)
                Ya = Ya + drift_fast_a * h_sub + inv_sqrt_eps * matvec(Cva, dWt)

            X, Y = X_new, Y_new

        _blowup_check((X, Y) + ((Xa, Ya) if with_aux else ()), guard, k, lo)
        out["X"][:, k + 1] = X
        out["Y"][:, k + 1] = Y
        if with_aux:
            out["X_aux"][:, k + 1] = Xa
            out["Y_aux"][:, k + 1] = Ya
    return out


def _assemble_bundle(grid, parts: list[dict], names: tuple[str, ...], metadata=None) -> PathBundle:
    dims = {n: parts[0][n].shape[2] for n in names}
    labels = stack_labels(dims)
    values = np.concatenate(
        [np.concatenate([p[n] for n in names], axis=2) for p in parts], axis=0
    )
    bundle = PathBundle(grid=grid, values=values, labels=labels, metadata=metadata or {})
    bundle.check_finite()
    return bundle


def simulate_slow_fast(
    system: SlowFastSystem,
    eps: float,
    grid: TimeGrid,
    family: StreamFamily,
    n_paths: int,
    *,
    substeps: int | None = None,
    nu: int = NU_DEFAULT,
    batch_size: int = 4096,
    store_increments: bool = False,
    guard: float = GUARD_DEFAULT,
) -> PathBundle:
    """Euler-Maruyama paths of the coupled pair (X, Y) as a PathBundle.

    Fast drift is scaled by 1/eps, fast diffusion by eps^(-1/2), and any
    declared perturbation drift by eps^(-eta).  Path i is driven by stream
    i of ``family``, so results do not depend on batching.
    """
    parts = []
    inc_w, inc_z = [], []
    for lo, hi in path_batches(n_paths, batch_size):
        res = integrate_batch(
            system, eps, grid, family, lo, hi,
            substeps=substeps, nu=nu, store_increments=store_increments, guard=guard,
        )
        parts.append(res)
        if store_increments:
            inc_w.append(res["dW"])
            inc_z.append(res["dZ"])
    meta = {"eps": eps, "system": system.name}
    if store_increments:
        meta["dW"] = np.concatenate(inc_w, axis=0)
        meta["dZ"] = np.concatenate(inc_z, axis=0)
    return _assemble_bundle(grid, parts, ("X", "Y"), meta)


def simulate_auxiliary(
    system: SlowFastSystem,
    eps: float,
    grid: TimeGrid,
    family: StreamFamily,
    n_paths: int,
    *,
    delta: float | None = None,
    substeps: int | None = None,
    nu: int = NU_DEFAULT,
    batch_size: int = 4096,
    guard: float = GUARD_DEFAULT,
) -> PathBundle:
    """Co-simulate the true pair and its window-frozen companion.

    ``delta`` defaults to khasminskii_delta(eps).  The returned bundle has
    components X, Y, X_aux, Y_aux; (X, Y) consume increments in exactly
    the same order as simulate_slow_fast with the same family, so the two
    calls are coupled pathwise.
    """
    if delta is None:
        delta = khasminskii_delta(eps)
    if not delta > 0:
        raise ValueError("delta must be positive")
    parts = [
        integrate_batch(
            system, eps, grid, family, lo, hi,
            substeps=substeps, nu=nu, delta=delta, guard=guard,
        )
        for lo, hi in path_batches(n_paths, batch_size)
    ]
    meta = {"eps": eps, "system": system.name, "delta": delta}
    return _assemble_bundle(grid, parts, ("X", "Y", "X_aux", "Y_aux"), meta)


# ---------------------------------------------------------------------------
# batched map for experiment drivers


def run_path_batches(task: Callable, n_paths: int, batch_size: int, workers: int = 1) -> list:
    """Apply ``task((lo, hi))`` to every path batch, in batch order.

    ``workers > 1`` fans batches out to a process pool; results are always
    reduced in batch-index order, so the output is identical for any
    worker count.  ``task`` must be picklable for pooled execution.
    """
    batches = path_batches(n_paths, batch_size)
    if workers <= 1 or len(batches) == 1:
        return [task(b) for b in batches]
    with multiprocessing.Pool(processes=workers) as pool:
        return pool.map(task, batches)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class CheckRow:
    name: str
    statistic: float
    threshold: float
    passed: bool
    n_samples: int


@dataclass
class DiagnosticsReport:
    """Named empirical checks with their thresholds and verdicts."""

    rows: list[CheckRow] = field(default_factory=list)

    def add(self, name, statistic, threshold, passed, n_samples) -> None:
        statistic = float(statistic)
        if not math.isfinite(statistic):
            raise ValueError(f"check {name!r} produced a non-finite statistic")
        self.rows.append(CheckRow(name, statistic, float(threshold), bool(passed), int(n_samples)))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def __getitem__(self, name: str) -> CheckRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def check_moment_bounds(bundle: PathBundle, p: float = 2.0, component: str = "X") -> DiagnosticsReport:
    """Empirical supremum moment and increment-scaling diagnostics.

    Reports the sample mean of sup_t |X_t|^p and the log-log slope of
    E|X_{t+lag} - X_t|^p against the lag over a dyadic lag set; the slope
    should be close to p/2 and is flagged below 0.8 * (p/2).
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    X = bundle.component(component)
    n_paths, n_nodes, _ = X.shape
    r = np.linalg.norm(X, axis=2)
    report = DiagnosticsReport()
    sup_moment = float(np.mean(np.max(r, axis=1) ** p))
    report.add("sup_moment", sup_moment, math.inf, True, n_paths)

    lags, lag = [], 1
    while lag <= max(1, (n_nodes - 1) // 4):
        lags.append(lag)
        lag *= 2
    if len(lags) >= 2:
        moments = []
        for L in lags:
            inc = np.linalg.norm(X[:, L:, :] - X[:, :-L, :], axis=2)
            moments.append(float(np.mean(inc**p)))
        if max(moments) <= 0.0:
            # frozen paths: nothing to regress, report the zero moment
            report.add("increment_moment_max", 0.0, 0.0, True, n_paths)
        else:
            slope = float(
                np.polyfit(np.log(np.array(lags) * bundle.grid.h), np.log(moments), 1)[0]
            )
            report.add("increment_slope", slope, 0.8 * (p / 2.0), slope >= 0.8 * (p / 2.0), n_paths)
    return report


def box_pair_sampler(d: int, l: int, radius: float = 3.0, t_max: float = 1.0, n_times: int = 5):
    """Default sampler for dissipativity scans: uniform boxes, t on a grid.

    Yields groups (t, x, y1, y2) with y1 != y2 batched per time value.
    """

    def sample(stream: RngStream, n: int):
        per_t = max(1, n // n_times)
        for i in range(n_times):
            t = t_max * i / max(1, n_times - 1)
            u = stream.normals((per_t, 2 * l + d))  # reuse gaussians as box source
            # map to uniform(-radius, radius) through the probit-free trick:
            # ranks are unnecessary, tanh squashing keeps the box bounded.
            box = radius * np.tanh(u)
            x = box[:, :d]
            y1 = box[:, d : d + l]
            y2 = box[:, d + l :]
            sep = np.linalg.norm(y2 - y1, axis=1) > 1e-9
            yield t, x[sep], y1[sep], y2[sep]

    return sample


def check_dissipativity(
    fast_drift,
    fast_diffusion,
    sampler=None,
    n_trials: int = 10_000,
    stream: RngStream | None = None,
) -> float:
    """Estimate the one-sided contraction constant of the fast pair.

    For each sampled (t, x, y1, y2) evaluates
    (<B(t,x,y2) - B(t,x,y1), y2 - y1> + |C(t,x,y2) - C(t,x,y1)|^2) / |y2-y1|^2
    and returns beta_hat = -max ratio.  A positive ratio anywhere raises
    DissipativityViolated carrying the witness point.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if stream is None:
        stream = RngStream(0, (0,))
    if sampler is None:
        sampler = box_pair_sampler(fast_drift.d, fast_drift.l)
    worst = -math.inf
    witness = None
    n_seen = 0
    for t, x, y1, y2 in sampler(stream, n_trials):
        if x.shape[0] == 0:
            continue
        dB = fast_drift(t, x, y2) - fast_drift(t, x, y1)
        dC = fast_diffusion(t, x, y2) - fast_diffusion(t, x, y1)
        dy = y2 - y1
        dy2 = np.sum(dy * dy, axis=1)
        ratio = (np.sum(dB * dy, axis=1) + np.sum(dC * dC, axis=(1, 2))) / dy2
        n_seen += ratio.size
        i = int(np.argmax(ratio))
        if ratio[i] > worst:
            worst = float(ratio[i])
            witness = (t, x[i].copy(), y1[i].copy(), y2[i].copy())
    if n_seen == 0:
        raise ValueError("sampler produced no separated pairs")
    if worst > 0:
        raise DissipativityViolated(
            f"ratio {worst:.6g} > 0 at t={witness[0]:.4g}, x={witness[1]}, "
            f"y1={witness[2]}, y2={witness[3]}",
            witness=witness,
        )
    return -worst

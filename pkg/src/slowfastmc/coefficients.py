"""Coefficient fields of (t, x, y) and the named parametric catalog.

A :class:`CoefficientField` wraps an opaque callable together with its
declared regularity constants (Lipschitz L, time-Hoelder exponent,
sublinearity M, optional dissipativity beta).  The constants are metadata
validated by spot-check samplers, not enforced symbolically.

Catalog entries are picklable (plain functions + ``functools.partial``)
so systems built from them can cross process boundaries in worker pools.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable

import numpy as np

VECTOR = "vector"  # output shape (d,)
MATRIX = "matrix"  # output shape (d, d)


@dataclass
class CoefficientField:
    """A named scalar/vector/matrix function of (t, x, y).

    The callable receives a scalar time t, x of shape (n, d) and y of
    shape (n, l); the result must broadcast to (n, *out_shape).  Scalars
    and unbatched constants are broadcast automatically.
    """

    name: str
    d: int
    l: int
    kind: str  # VECTOR or MATRIX
    out_dim: int  # length of a vector output / side of a matrix output
    fn: Callable
    lipschitz: float | None = None
    holder_time: float | None = None
    sublinear: float | None = None
    dissipativity: float | None = None

    @property
    def out_shape(self) -> tuple[int, ...]:
        if self.kind == VECTOR:
            return (self.out_dim,)
        return (self.out_dim, self.out_dim)

    def __call__(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        raw = self.fn(t, x, y)
        return self._normalize(raw, x.shape[0])

    def _normalize(self, raw, n: int) -> np.ndarray:
        out = np.asarray(raw, dtype=float)
        target = (n,) + self.out_shape
        if out.shape == target:
            return out
        # Tolerated shorthands: scalars, unbatched constants, and (n,) /
        # (n, 1) outputs when the declared shape is one-dimensional.
        if out.ndim == 0:
            return np.broadcast_to(out, target)
        if out.shape == self.out_shape:
            return np.broadcast_to(out, target)
        if self.kind == VECTOR and self.out_dim == 1 and out.shape == (n,):
            return out.reshape(n, 1)
        if self.kind == MATRIX and self.out_dim == 1 and out.shape in ((n,), (n, 1)):
            return out.reshape(n, 1, 1)
        try:
            return np.broadcast_to(out, target)
        except ValueError:
            raise ValueError(
                f"coefficient {self.name!r} returned shape {out.shape}, "
                f"expected something broadcastable to {target}"
            ) from None

    def validate_probe(self) -> None:
        """Evaluate once at the origin; output must be finite and shaped."""
        x = np.zeros((2, self.d))
        y = np.zeros((2, self.l))
        out = self(0.0, x, y)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"coefficient {self.name!r} is non-finite at the origin")

    def with_meta(self, **kw) -> "CoefficientField":
        return replace(self, **kw)


def vector_field(name, d, l, fn, **meta) -> CoefficientField:
    f = CoefficientField(name=name, d=d, l=l, kind=VECTOR, out_dim=d, fn=fn, **meta)
    f.validate_probe()
    return f


def fast_drift_field(name, d, l, fn, **meta) -> CoefficientField:
    f = CoefficientField(name=name, d=d, l=l, kind=VECTOR, out_dim=l, fn=fn, **meta)
    f.validate_probe()
    return f


def matrix_field(name, d, l, fn, **meta) -> CoefficientField:
    f = CoefficientField(name=name, d=d, l=l, kind=MATRIX, out_dim=d, fn=fn, **meta)
    f.validate_probe()
    return f


def fast_diffusion_field(name, d, l, fn, **meta) -> CoefficientField:
    f = CoefficientField(name=name, d=d, l=l, kind=MATRIX, out_dim=l, fn=fn, **meta)
    f.validate_probe()
    return f


# ---------------------------------------------------------------------------
# system containers


@dataclass
class SlowFastSystem:
    """Two-timescale system: slow pair (b, sigma), fast pair (B, C).

    The fast drift is scaled by 1/eps and the fast diffusion by
    eps^(-1/2) at simulation time; an optional extra fast drift D enters
    at eps^(-eta) with eta in [0, 1).
    """

    name: str
    slow_drift: CoefficientField
    slow_diffusion: CoefficientField
    fast_drift: CoefficientField
    fast_diffusion: CoefficientField
    correlation: "CorrelationSpec"
    x0: np.ndarray
    y0: np.ndarray
    horizon: float
    perturbation: CoefficientField | None = None
    perturbation_exponent: float = 0.0

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=float))
        d, l = self.d, self.l
        for f in (self.slow_drift, self.slow_diffusion, self.fast_drift, self.fast_diffusion):
            if (f.d, f.l) != (d, l):
                raise ValueError(f"coefficient {f.name!r} arity {(f.d, f.l)} != {(d, l)}")
        if self.slow_drift.out_shape != (d,) or self.slow_diffusion.out_shape != (d, d):
            raise ValueError("slow coefficients must map to R^d / R^(d x d)")
        if self.fast_drift.out_shape != (l,) or self.fast_diffusion.out_shape != (l, l):
            raise ValueError("fast coefficients must map to R^l / R^(l x l)")
        if self.correlation.rho.shape != (d, l):
            raise ValueError(
                f"correlation shape {self.correlation.rho.shape} != {(d, l)}"
            )
        if self.perturbation is not None:
            if not (0.0 <= self.perturbation_exponent < 1.0):
                raise ValueError("perturbation exponent must lie in [0, 1)")
            if self.perturbation.out_shape != (l,):
                raise ValueError("perturbation must map to R^l")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def d(self) -> int:
        return self.x0.size

    @property
    def l(self) -> int:
        return self.y0.size

    @property
    def beta(self) -> float | None:
        return self.fast_drift.dissipativity


# ---------------------------------------------------------------------------
# catalog callables (module-level so they pickle)


def _zero(t, x, y, width):
    return np.zeros((x.shape[0], width))


def _zero_mat(t, x, y, side):
    return np.zeros((x.shape[0], side, side))


def _const_vec(t, x, y, value):
    return np.broadcast_to(np.asarray(value, dtype=float), (x.shape[0], len(value)))


def _const_mat(t, x, y, value):
    v = np.asarray(value, dtype=float)
    return np.broadcast_to(v, (x.shape[0],) + v.shape)


def _ou_drift(t, x, y, kappa, mean):
    return -kappa * (y - mean)


def _ref_ou_slow_drift(t, x, y):
    return np.sin(y) - x


def _ref_ou_slow_diffusion(t, x, y):
    return np.sqrt(2.0 + np.cos(2.0 * y))[:, :, None]


def _brownian_like_drift(t, x, y):
    return np.zeros_like(x)


def _identity_mat(t, x, y, side, scale):
    return np.broadcast_to(scale * np.eye(side), (x.shape[0], side, side))


def zero_field(name, d, l, kind, out_dim) -> CoefficientField:
    if kind == VECTOR:
        fn = partial(_zero, width=out_dim)
    else:
        fn = partial(_zero_mat, side=out_dim)
    return CoefficientField(
        name=name, d=d, l=l, kind=kind, out_dim=out_dim, fn=fn,
        lipschitz=0.0, holder_time=1.0, sublinear=0.0,
    )


def constant_field(name, d, l, value, kind) -> CoefficientField:
    value = np.asarray(value, dtype=float)
    if kind == VECTOR:
        fn = partial(_const_vec, value=tuple(np.atleast_1d(value)))
        out_dim = np.atleast_1d(value).size
    else:
        mat = np.atleast_2d(value)
        fn = partial(_const_mat, value=mat)
        out_dim = mat.shape[0]
    return CoefficientField(
        name=name, d=d, l=l, kind=kind, out_dim=out_dim, fn=fn,
        lipschitz=0.0, holder_time=1.0, sublinear=float(np.max(np.abs(value))),
    )


def ou_fast_pair(
    d: int = 1, l: int = 1, kappa: float = 2.0, mean: float = 0.0, noise: float = 1.0
) -> tuple[CoefficientField, CoefficientField]:
    """Ornstein-Uhlenbeck fast pair B = -kappa (y - mean), C = noise * I.

    Dissipativity constant is kappa (additive noise contributes zero).
    """
    B = fast_drift_field(
        "ou-drift", d, l, partial(_ou_drift, kappa=kappa, mean=mean),
        lipschitz=kappa, holder_time=1.0,
        sublinear=kappa * (1.0 + abs(mean)), dissipativity=kappa,
    )
    C = fast_diffusion_field(
        "ou-noise", d, l, partial(_identity_mat, side=l, scale=noise),
        lipschitz=0.0, holder_time=1.0, sublinear=abs(noise),
    )
    return B, C


def ref_ou_system(
    rho: float = 0.3, x0: float = 1.0, y0: float = 0.0, horizon: float = 1.0
) -> SlowFastSystem:
    """The scalar reference system used throughout the test-bed.

    Slow: b = sin(y) - x, sigma = sqrt(2 + cos 2y); fast: OU with rate 2
    and unit noise.  All hypotheses hold with L = 2, M = sqrt(3), beta = 2,
    and the stationary fast law is N(0, 1/4).
    """
    from .stochastic import scalar_correlation

    b = vector_field("ref-ou-drift", 1, 1, _ref_ou_slow_drift,
                     lipschitz=1.0, holder_time=1.0, sublinear=1.0)
    sigma = matrix_field("ref-ou-diffusion", 1, 1, _ref_ou_slow_diffusion,
                         lipschitz=1.0, holder_time=1.0, sublinear=float(np.sqrt(3.0)))
    B, C = ou_fast_pair(1, 1, kappa=2.0, noise=1.0)
    return SlowFastSystem(
        name="ref-ou",
        slow_drift=b, slow_diffusion=sigma, fast_drift=B, fast_diffusion=C,
        correlation=scalar_correlation(rho), x0=[x0], y0=[y0], horizon=horizon,
    )


def zero_system(d: int = 1, l: int = 1, x0=0.0, y0=0.0, horizon: float = 1.0) -> SlowFastSystem:
    from .stochastic import build_correlation

    return SlowFastSystem(
        name="zero",
        slow_drift=zero_field("zero-b", d, l, VECTOR, d),
        slow_diffusion=zero_field("zero-sigma", d, l, MATRIX, d),
        fast_drift=zero_field("zero-B", d, l, VECTOR, l),
        fast_diffusion=zero_field("zero-C", d, l, MATRIX, l),
        correlation=build_correlation(np.zeros((d, l))),
        x0=np.full(d, float(x0)), y0=np.full(l, float(y0)), horizon=horizon,
    )


def constant_system(
    b: float = 0.0, sigma: float = 1.0, kappa: float = 2.0, noise: float = 1.0,
    rho: float = 0.0, x0: float = 0.0, y0: float = 0.0, horizon: float = 1.0,
) -> SlowFastSystem:
    """Constant slow coefficients over an OU fast factor."""
    from .stochastic import scalar_correlation

    B, C = ou_fast_pair(1, 1, kappa=kappa, noise=noise)
    return SlowFastSystem(
        name="constant",
        slow_drift=constant_field("const-b", 1, 1, [b], VECTOR),
        slow_diffusion=constant_field("const-sigma", 1, 1, [[sigma]], MATRIX),
        fast_drift=B, fast_diffusion=C,
        correlation=scalar_correlation(rho), x0=[x0], y0=[y0], horizon=horizon,
    )


def ou_linear_system(
    kappa: float = 2.0, mean: float = 0.0, noise: float = 1.0,
    rho: float = 0.0, x0: float = 0.0, y0: float = 0.0, horizon: float = 1.0,
) -> SlowFastSystem:
    """Pure fast OU with a Brownian slow component (b = 0, sigma = 1)."""
    from .stochastic import scalar_correlation

    B, C = ou_fast_pair(1, 1, kappa=kappa, mean=mean, noise=noise)
    return SlowFastSystem(
        name="ou-linear",
        slow_drift=vector_field("zero-b", 1, 1, _brownian_like_drift,
                                lipschitz=0.0, holder_time=1.0, sublinear=0.0),
        slow_diffusion=constant_field("unit-sigma", 1, 1, [[1.0]], MATRIX),
        fast_drift=B, fast_diffusion=C,
        correlation=scalar_correlation(rho), x0=[x0], y0=[y0], horizon=horizon,
    )


SYSTEM_CATALOG: dict[str, Callable[..., SlowFastSystem]] = {
    "zero": zero_system,
    "constant": constant_system,
    "ou-linear": ou_linear_system,
    "ref-ou": ref_ou_system,
}


def system_from_catalog(name: str, **params) -> SlowFastSystem:
    try:
        factory = SYSTEM_CATALOG[name]
    except KeyError:
        known = ", ".join(sorted(SYSTEM_CATALOG))
        raise KeyError(f"unknown system {name!r}; catalog: {known}") from None
    return factory(**params)

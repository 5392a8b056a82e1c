import math

import numpy as np
import pytest

from slowfastmc import (
    TimeGrid,
    check_dissipativity,
    check_moment_bounds,
    khasminskii_delta,
    ks_two_sample,
    ou_fast_pair,
    ou_linear_system,
    ref_ou_system,
    simulate_auxiliary,
    simulate_frozen,
    simulate_slow_fast,
    zero_system,
)
from slowfastmc.coefficients import (
    VECTOR,
    CoefficientField,
    constant_field,
    fast_diffusion_field,
    fast_drift_field,
    vector_field,
)
from slowfastmc.engine import substep_count
from slowfastmc.ergodic import FrozenEquation
from slowfastmc.errors import (
    DegenerateEpsilon,
    DissipativityViolated,
    NumericalBlowup,
    StepTooCoarse,
)


class TestKhasminskiiDelta:
    def test_unit_log_point(self):
        assert khasminskii_delta(math.exp(-1)) == pytest.approx(math.exp(-1), abs=1e-15)

    def test_sixteenth_power(self):
        # ln(1/eps) = 16, fourth root 2
        assert khasminskii_delta(math.exp(-16)) == pytest.approx(2 * math.exp(-16), rel=1e-12)

    def test_numeric_point(self):
        assert khasminskii_delta(0.01) == pytest.approx(0.0146490, abs=5e-7)

    @pytest.mark.parametrize("eps", [0.0, 1.0, 1.5, -0.1])
    def test_degenerate(self, eps):
        with pytest.raises(DegenerateEpsilon):
            khasminskii_delta(eps)


class TestSubstepPolicy:
    def test_auto_policy(self):
        # h / n_sub <= eps / nu
        n = substep_count(0.004, 0.0125, nu=20)
        assert n == 7 and 0.004 / n <= 0.0125 / 20

    def test_explicit_too_coarse(self):
        with pytest.raises(StepTooCoarse):
            substep_count(0.1, 0.01, substeps=1)


class TestSimulateSlowFast:
    def test_zero_dynamics_exact(self, family):
        system = zero_system(x0=1.5, y0=-0.5)
        bundle = simulate_slow_fast(system, 0.5, TimeGrid(0.0, 1.0, 50), family, 16)
        assert np.all(bundle.component("X") == 1.5)
        assert np.all(bundle.component("Y") == -0.5)

    def test_initial_slice_exact(self, ref_ou, family, unit_grid):
        bundle = simulate_slow_fast(ref_ou, 0.2, unit_grid, family, 8)
        assert np.all(bundle.values[:, 0, 0] == 1.0)
        assert np.all(bundle.values[:, 0, 1] == 0.0)

    def test_batch_size_invariance(self, ref_ou, family, unit_grid):
        a = simulate_slow_fast(ref_ou, 0.2, unit_grid, family, 10, batch_size=3)
        b = simulate_slow_fast(ref_ou, 0.2, unit_grid, family, 10, batch_size=10)
        assert np.array_equal(a.values, b.values)

    def test_fast_stationary_variance(self, ref_ou, family, unit_grid):
        # OU fast factor: stationary variance c^2/(2 kappa) = 0.25; the
        # time-averaged sample variance over the second half must match
        # within 5% (substeps refined to keep the Euler bias ~2%)
        bundle = simulate_slow_fast(ref_ou, 0.05, unit_grid, family, 5000, nu=50)
        y = bundle.component("Y")[:, unit_grid.n_steps // 2 :, 0]
        assert y.var() == pytest.approx(0.25, rel=0.05)

    def test_fast_l2_uniform_over_eps(self, ref_ou, family, unit_grid):
        # second-moment envelope varies little across the timescale sweep
        maxima = []
        for i, eps in enumerate([0.2, 0.05]):
            b = simulate_slow_fast(ref_ou, eps, unit_grid, family.child(i), 5000, nu=50)
            maxima.append(float((b.component("Y")[:, :, 0] ** 2).mean(axis=0).max()))
        assert abs(maxima[0] - maxima[1]) / maxima[1] < 0.10

    def test_single_scale_law_at_unit_eps(self, family):
        # at eps = 1 the fast component is an ordinary SDE; its terminal
        # law must match a direct simulation (same step width)
        n = 10_000
        system = ou_linear_system(kappa=2.0, noise=1.0, y0=0.3)
        grid = TimeGrid(0.0, 1.0, 100)
        bundle = simulate_slow_fast(system, 1.0, grid, family.child(1), n, substeps=1)
        B, C = ou_fast_pair(kappa=2.0, noise=1.0)
        frozen = FrozenEquation(B, C, 0.0, [0.0])
        direct = simulate_frozen(frozen, [0.3], 1.0, 0.01, family.child(2), n_paths=n)
        stat = ks_two_sample(bundle.terminal("Y")[:, 0], direct.terminal("Y")[:, 0])
        assert stat < 1.63 / math.sqrt(n)

    def test_blowup_guard(self, family):
        cubic = vector_field("cubic", 1, 1, lambda t, x, y: x**3)
        system = zero_system(x0=3.0)
        system.slow_drift = cubic
        with pytest.raises(NumericalBlowup) as err:
            simulate_slow_fast(system, 1.0, TimeGrid(0.0, 4.0, 400), family, 4)
        assert err.value.path_index is not None

    def test_perturbation_zero_matches_unperturbed(self, ref_ou, family, unit_grid):
        import dataclasses

        zero_pert = fast_drift_field("no-op", 1, 1, lambda t, x, y: np.zeros_like(y))
        perturbed = dataclasses.replace(
            ref_ou, perturbation=zero_pert, perturbation_exponent=0.5
        )
        a = simulate_slow_fast(ref_ou, 0.1, unit_grid, family, 8)
        b = simulate_slow_fast(perturbed, 0.1, unit_grid, family, 8)
        assert np.array_equal(a.values, b.values)


class TestSimulateAuxiliary:
    def test_zero_dynamics(self, family):
        system = zero_system(x0=2.0, y0=1.0)
        bundle = simulate_auxiliary(system, 0.5, TimeGrid(0.0, 1.0, 50), family, 8)
        assert np.all(bundle.component("X_aux") == 2.0)
        assert np.all(bundle.component("Y_aux") == 1.0)

    def test_noise_sharing_with_plain_simulation(self, ref_ou, family, unit_grid):
        # the true pair inside the auxiliary bundle is bit-identical to a
        # plain run on the same streams: the pair (X, X_aux) is coupled
        plain = simulate_slow_fast(ref_ou, 0.1, unit_grid, family, 12)
        aux = simulate_auxiliary(ref_ou, 0.1, unit_grid, family, 12)
        assert np.array_equal(plain.component("X"), aux.component("X"))
        assert np.array_equal(plain.component("Y"), aux.component("Y"))

    def test_gap_is_reported_finite(self, ref_ou, family, unit_grid):
        bundle = simulate_auxiliary(ref_ou, 0.05, unit_grid, family, 256)
        gap = bundle.component("X") - bundle.component("X_aux")
        sup = np.max(np.sum(gap**2, axis=2), axis=1)
        assert np.all(np.isfinite(sup)) and sup.mean() > 0

    def test_gap_shrinks_with_eps(self, ref_ou, family, unit_grid):
        sups = []
        for i, eps in enumerate([0.2, 0.05]):
            b = simulate_auxiliary(ref_ou, eps, unit_grid, family.child(i), 2000)
            gap = b.component("X") - b.component("X_aux")
            sups.append(float(np.max(np.sum(gap**2, axis=2), axis=1).mean()))
        assert sups[1] < sups[0]


class TestMomentBounds:
    def test_constant_paths(self, family):
        system = zero_system(x0=2.0)
        bundle = simulate_slow_fast(system, 1.0, TimeGrid(0.0, 1.0, 64), family, 16)
        report = check_moment_bounds(bundle, p=2)
        assert report["sup_moment"].statistic == pytest.approx(4.0)
        assert report["increment_moment_max"].statistic == 0.0
        assert report.passed

    def test_ref_ou_diffusive_scaling(self, ref_ou, family):
        bundle = simulate_slow_fast(ref_ou, 0.1, TimeGrid(0.0, 1.0, 256), family, 2000)
        report = check_moment_bounds(bundle, p=2)
        slope = report["increment_slope"].statistic
        assert 0.9 <= slope <= 1.1
        assert report.passed

    def test_brownian_quartic_scaling(self, family):
        # E|W_{t+h} - W_t|^4 = 3 h^2: slope 2 at p = 4
        system = ou_linear_system()
        bundle = simulate_slow_fast(system, 1.0, TimeGrid(0.0, 1.0, 256), family, 4000)
        report = check_moment_bounds(bundle, p=4)
        assert report["increment_slope"].statistic == pytest.approx(2.0, rel=0.1)

    def test_p_below_two_rejected(self, ref_ou, family, unit_grid):
        bundle = simulate_slow_fast(ref_ou, 0.2, unit_grid, family, 4)
        with pytest.raises(ValueError):
            check_moment_bounds(bundle, p=1.0)


class TestDissipativity:
    def test_ou_exact(self, family):
        B, C = ou_fast_pair(kappa=2.0, noise=1.0)
        beta = check_dissipativity(B, C, n_trials=5000, stream=family.stream(0))
        assert beta == pytest.approx(2.0, abs=1e-12)

    def test_expansive_drift_violates(self, family):
        B = fast_drift_field("expansive", 1, 1, lambda t, x, y: y)
        C = constant_field("zero-noise", 1, 1, [[0.0]], "matrix")
        with pytest.raises(DissipativityViolated) as err:
            check_dissipativity(B, C, n_trials=100, stream=family.stream(1))
        assert err.value.witness is not None

    def test_wobbly_drift_lower_bound(self, family):
        # |d/dy sin y| <= 1 gives one-sided constant at least 2 - 0.5
        B = fast_drift_field("wobbly", 1, 1, lambda t, x, y: -2.0 * y + 0.5 * np.sin(y))
        C = constant_field("unit-noise", 1, 1, [[1.0]], "matrix")
        beta = check_dissipativity(B, C, n_trials=100_000, stream=family.stream(2))
        assert beta >= 1.5


class TestCoefficientField:
    def test_shape_normalization(self):
        f = CoefficientField("f", 1, 1, VECTOR, 1, lambda t, x, y: np.ones(x.shape[0]))
        out = f(0.0, np.zeros((5, 1)), np.zeros((5, 1)))
        assert out.shape == (5, 1)

    def test_shape_mismatch_raises(self):
        f = CoefficientField("bad", 2, 1, VECTOR, 2, lambda t, x, y: np.ones((x.shape[0], 3)))
        with pytest.raises(ValueError):
            f(0.0, np.zeros((4, 2)), np.zeros((4, 1)))

    def test_nonfinite_probe_rejected(self):
        with pytest.raises(ValueError):
            vector_field("inf", 1, 1, lambda t, x, y: np.full_like(x, np.nan))

    def test_matrix_scalar_shorthand(self):
        f = fast_diffusion_field("c", 1, 1, lambda t, x, y: np.ones(x.shape[0]))
        out = f(0.0, np.zeros((3, 1)), np.zeros((3, 1)))
        assert out.shape == (3, 1, 1)

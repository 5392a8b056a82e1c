import math

import numpy as np
import pytest

from slowfastmc import (
    ErgodicParams,
    OptionSpec,
    TimeGrid,
    averaged_local_vol,
    girsanov_weight,
    lsv_tanh_model,
    mollify_lookback,
    price,
    price_from_bundle,
    risk_neutralize,
    simulate_slow_fast,
    standard_measure_change,
    to_log_system,
)
from slowfastmc.coefficients import VECTOR, CoefficientField, constant_field
from slowfastmc.errors import DegenerateVolatility, UnboundedPayoff
from slowfastmc.finance import (
    LSVModel,
    _VolRiskPerturbation,
    evaluate_payoff,
    lsv_from_catalog,
    window_average_paths,
)


def _flat_lsv(h_level=0.05, vol=0.25, rho=0.3):
    """Constant-coefficient variant of the catalog model."""
    base = lsv_tanh_model(rho=rho)
    H = constant_field("flat-drift", 1, 1, [h_level], VECTOR)
    F = constant_field("flat-vol", 1, 1, [vol], VECTOR)
    return LSVModel(
        name="flat", H=H, F=F,
        fast_drift=base.fast_drift, fast_diffusion=base.fast_diffusion,
        rho=rho, s0=base.s0, y0=base.y0, horizon=base.horizon,
        drift_bound=abs(h_level), vol_floor=vol, vol_cap=vol,
        lipschitz=0.0, holder_time=1.0, beta=2.0,
    )


class TestLogTransform:
    def test_ito_correction_constants(self):
        system = to_log_system(_flat_lsv(h_level=0.05, vol=0.2))
        x = np.zeros((3, 1))
        y = np.zeros((3, 1))
        assert np.allclose(system.slow_drift(0.0, x, y), 0.03)
        assert np.allclose(system.slow_diffusion(0.0, x, y), 0.2)

    def test_unit_spot_maps_to_origin(self):
        assert to_log_system(lsv_tanh_model(s0=1.0)).x0[0] == 0.0

    def test_catalog_model_at_zero_factor(self):
        system = to_log_system(lsv_tanh_model())
        x = np.zeros((2, 1))
        y = np.zeros((2, 1))
        assert np.allclose(system.slow_diffusion(0.0, x, y)[:, 0, 0], 0.25)
        assert np.allclose(system.slow_drift(0.0, x, y)[:, 0], 0.05 - 0.03125)


class TestRiskNeutralize:
    def test_theta_value(self):
        lsv = _flat_lsv(h_level=0.05, vol=0.25)
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        theta = mc.theta(lsv, 0.0, np.zeros((1, 1)), np.zeros((1, 1)))
        assert theta[0] == pytest.approx(0.12)

    def test_lambda_mixture_value(self):
        lsv = _flat_lsv(h_level=0.05, vol=0.25, rho=0.3)
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        pert = _VolRiskPerturbation(
            lsv.fast_diffusion, lsv.H, lsv.F, mc.short_rate, mc.gamma_mpr, lsv.rho
        )
        lam = pert.lam(0.0, np.zeros((1, 1)), np.zeros((1, 1)))
        assert lam[0] == pytest.approx(0.3 * 0.12 + math.sqrt(0.91) * 0.1, abs=1e-6)

    def test_slow_drift_uses_short_rate(self):
        lsv = _flat_lsv(vol=0.2)
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        system = risk_neutralize(lsv, mc)
        drift = system.slow_drift(0.0, np.zeros((1, 1)), np.zeros((1, 1)))
        assert drift[0, 0] == pytest.approx(0.02 - 0.02)
        assert system.perturbation_exponent == 0.5

    def test_unpriced_risk_leaves_fast_equation(self):
        # H = r and gamma = 0 make Lambda vanish identically
        lsv = _flat_lsv(h_level=0.02)
        mc = standard_measure_change(rate=0.02, gamma=0.0)
        system = risk_neutralize(lsv, mc)
        x = np.linspace(-1, 1, 7).reshape(-1, 1)
        y = np.linspace(-2, 2, 7).reshape(-1, 1)
        assert np.allclose(system.perturbation(0.3, x, y), 0.0, atol=1e-15)

    def test_degenerate_volatility_rejected(self):
        base = lsv_tanh_model()
        wide = CoefficientField(
            name="wide-vol", d=1, l=1, kind=VECTOR, out_dim=1,
            fn=lambda t, x, y: 0.25 + 0.2 * np.tanh(y[:, 0])[:, None],
            lipschitz=0.2, holder_time=1.0, sublinear=0.45,
        )
        bad = LSVModel(
            name="bad", H=base.H, F=wide,
            fast_drift=base.fast_drift, fast_diffusion=base.fast_diffusion,
            rho=0.3, s0=1.0, y0=0.0, horizon=1.0,
            drift_bound=0.05, vol_floor=0.2, vol_cap=0.3,
            lipschitz=0.2, holder_time=1.0, beta=2.0,
        )
        with pytest.raises(DegenerateVolatility):
            risk_neutralize(bad, standard_measure_change())


class TestGirsanovWeight:
    def test_zero_prices_of_risk_give_unit_weights(self, family):
        lsv = _flat_lsv(h_level=0.02)
        mc = standard_measure_change(rate=0.02, gamma=0.0)
        bundle = simulate_slow_fast(
            to_log_system(lsv), 0.1, TimeGrid(0.0, 1.0, 64), family, 128,
            store_increments=True,
        )
        est = girsanov_weight(bundle, lsv, mc)
        assert est.mean == 1.0 and est.std_error == 0.0

    def test_martingale_mean(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        bundle = simulate_slow_fast(
            to_log_system(lsv), 0.1, TimeGrid(0.0, 1.0, 128), family, 20_000,
            store_increments=True,
        )
        est = girsanov_weight(bundle, lsv, mc)
        assert abs(est.mean - 1.0) <= 3.0 * est.std_error

    def test_constant_prices_match_closed_form(self, family):
        # theta = 0.12 and gamma = 0.1 constants: the weight is an exact
        # function of the accumulated increments
        lsv = _flat_lsv(h_level=0.05, vol=0.25)
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        bundle = simulate_slow_fast(
            to_log_system(lsv), 0.2, TimeGrid(0.0, 1.0, 32), family, 16,
            store_increments=True,
        )
        est = girsanov_weight(bundle, lsv, mc)
        wsum = bundle.metadata["dW"][:, :, 0].sum(axis=1)
        zsum = bundle.metadata["dZ"][:, :, 0].sum(axis=1)
        expected = np.exp(0.12 * wsum - 0.0072 + 0.1 * zsum - 0.005)
        assert est.mean == pytest.approx(expected.mean(), abs=1e-12)

    def test_requires_increments(self, family):
        lsv = lsv_tanh_model()
        bundle = simulate_slow_fast(to_log_system(lsv), 0.2, TimeGrid(0.0, 1.0, 16), family, 8)
        with pytest.raises(ValueError):
            girsanov_weight(bundle, lsv, standard_measure_change())


class TestAveragedLocalVol:
    def test_tanh_vol_against_quadrature(self, family):
        # E tanh^2(Y), Y ~ N(0, 1/4), via 64-point Gauss-Hermite
        nodes, weights = np.polynomial.hermite.hermgauss(64)
        etanh2 = float(np.sum(weights * np.tanh(np.sqrt(0.5) * nodes) ** 2) / np.sqrt(np.pi))
        target_f2 = 0.0625 + 0.0025 * etanh2
        lsv = lsv_tanh_model()
        mc = standard_measure_change()
        params = ErgodicParams(burn_in=5.0, horizon=50.0, n_strands=32)
        model = averaged_local_vol(lsv, mc, [0.0], [1.0], params, family)
        f2 = model.vol_table[0, 0] ** 2
        se_f2 = 2.0 * model.vol_table[0, 0] * model.se_vol[0, 0]
        assert abs(f2 - target_f2) <= 3.0 * se_f2

    def test_constant_rate_exact(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02)
        params = ErgodicParams(burn_in=1.0, horizon=26.0, n_strands=2)
        model = averaged_local_vol(lsv, mc, [0.0], [0.5, 1.0], params, family)
        assert np.all(model.rate_table == 0.02)
        assert np.all(model.se_rate == 0.0)

    def test_factor_independent_vol_passes_through(self, family):
        lsv = _flat_lsv(vol=0.25)
        mc = standard_measure_change()
        params = ErgodicParams(burn_in=1.0, horizon=26.0, n_strands=2)
        model = averaged_local_vol(lsv, mc, [0.0, 1.0], [1.0], params, family)
        assert np.allclose(model.vol_table, 0.25, atol=1e-12)

    def test_positive_nodes_required(self, family):
        with pytest.raises(ValueError):
            averaged_local_vol(
                lsv_tanh_model(), standard_measure_change(), [0.0], [-1.0],
                ErgodicParams(), family,
            )


class TestPayoffs:
    def test_cap_is_mandatory(self):
        with pytest.raises(UnboundedPayoff):
            OptionSpec(kind="european", strike=1.0, cap=None)

    def test_custom_needs_bound(self):
        with pytest.raises(UnboundedPayoff):
            OptionSpec(kind="custom-bounded", custom_payoff=lambda g, s: s[:, -1])

    def test_conditional_valuation_rejected(self):
        with pytest.raises(ValueError):
            OptionSpec(kind="european", strike=1.0, cap=2.0, maturity=1.0,
                       valuation_time=0.5)

    def test_european_capped(self):
        grid = TimeGrid(0.0, 1.0, 4)
        S = np.array([[1.0, 1.0, 1.0, 1.0, 1.4], [1.0, 1.0, 1.0, 1.0, 9.0]])
        spec = OptionSpec(kind="european", strike=1.0, cap=2.0)
        assert np.allclose(evaluate_payoff(spec, grid, S), [0.4, 2.0])

    def test_asian_trapezoid_average(self):
        grid = TimeGrid(0.0, 1.0, 2)
        S = np.array([[1.0, 2.0, 3.0]])  # trapezoid mean = 2.0
        spec = OptionSpec(kind="asian", strike=1.5, cap=10.0)
        assert evaluate_payoff(spec, grid, S)[0] == pytest.approx(0.5)


class TestMollifier:
    def test_constant_paths_exact_for_all_deltas(self):
        grid = TimeGrid(0.0, 1.0, 50)
        S = np.full((3, 51), 2.2)
        for delta in (0.9, 0.2, 0.05, 0.0125):
            out = window_average_paths(grid, S, np.ones(51), delta)
            assert np.allclose(out, 2.2, atol=1e-14)
            fn = mollify_lookback(lambda sT, m: m, lambda th: np.ones_like(th), delta)
            assert np.allclose(fn(grid, S), 2.2, atol=1e-14)

    def test_linear_window_mean_exact(self):
        # path theta -> theta, unit weight, delta 0.2: mean over
        # [-0.7, -0.5] is -0.6 exactly under the trapezoid rule
        grid = TimeGrid(0.0, 1.0, 40)
        theta = grid.nodes() - 1.0
        out = window_average_paths(grid, theta[None, :], np.ones(41), 0.2)
        i = int(np.argmin(np.abs(theta + 0.5)))
        assert out[0, i] == pytest.approx(-0.6, abs=1e-12)

    def test_delta_sweep_converges_to_running_sup(self):
        # piecewise-linear path with an interior peak
        grid = TimeGrid(0.0, 1.0, 200)
        t = grid.nodes()
        path = 1.0 - np.abs(t - 0.6)  # peak 1.0 at t = 0.6
        S = path[None, :]
        target = float(path.max())
        diffs = []
        for delta in (0.2, 0.05, 0.0125):
            fn = mollify_lookback(lambda sT, m: m, lambda th: np.ones_like(th), delta)
            diffs.append(abs(float(fn(grid, S)[0]) - target))
        assert diffs[0] > diffs[1] > diffs[2]

    def test_refinement_stability_for_piecewise_linear(self):
        # windowed averages of a piecewise-linear path shift only at the
        # trapezoid-error scale when the grid is refined
        vals = []
        for n in (100, 200):
            grid = TimeGrid(0.0, 1.0, n)
            t = grid.nodes()
            S = (1.0 - np.abs(t - 0.6))[None, :]
            fn = mollify_lookback(lambda sT, m: m, lambda th: np.ones_like(th), 0.125)
            vals.append(float(fn(grid, S)[0]))
        assert abs(vals[0] - vals[1]) <= (1.0 / 100) ** 2 * 10


class TestPrice:
    def test_constant_payoff_discounts_exactly(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02)
        system = risk_neutralize(lsv, mc)
        spec = OptionSpec(
            kind="custom-bounded", maturity=1.0,
            custom_payoff=lambda g, s: np.ones(s.shape[0]), custom_bound=1.0,
        )
        est = price(system, spec, mc, 256, family, eps=0.2, grid=TimeGrid(0.0, 1.0, 64))
        assert est.mean == pytest.approx(math.exp(-0.02), abs=1e-12)
        assert est.std_error == 0.0

    def test_discounted_spot_is_martingale(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        system = risk_neutralize(lsv, mc)
        spec = OptionSpec(
            kind="custom-bounded", maturity=1.0,
            custom_payoff=lambda g, s: np.minimum(s[:, -1], 10.0), custom_bound=10.0,
        )
        est = price(system, spec, mc, 20_000, family, eps=0.1,
                    grid=TimeGrid(0.0, 1.0, 128))
        assert abs(est.mean - 1.0) <= 3.0 * est.std_error

    def test_payoff_algebra_on_shared_paths(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change()
        system = risk_neutralize(lsv, mc)
        bundle = simulate_slow_fast(system, 0.1, TimeGrid(0.0, 1.0, 64), family, 2048)
        c1 = OptionSpec(kind="european", strike=1.0, cap=2.0)
        c2 = OptionSpec(kind="european", strike=1.1, cap=0.7)
        both = OptionSpec(
            kind="custom-bounded", maturity=1.0, custom_bound=2.7,
            custom_payoff=lambda g, s: (
                np.minimum(np.maximum(s[:, -1] - 1.0, 0.0), 2.0)
                + np.minimum(np.maximum(s[:, -1] - 1.1, 0.0), 0.7)
            ),
        )
        p1 = price_from_bundle(bundle, c1, mc)
        p2 = price_from_bundle(bundle, c2, mc)
        p12 = price_from_bundle(bundle, both, mc)
        assert p1.mean + p2.mean == pytest.approx(p12.mean, abs=1e-12)

    def test_monotone_in_cap_and_strike(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change()
        system = risk_neutralize(lsv, mc)
        bundle = simulate_slow_fast(system, 0.1, TimeGrid(0.0, 1.0, 64), family, 2048)
        p_small_cap = price_from_bundle(
            bundle, OptionSpec(kind="european", strike=1.0, cap=0.1), mc).mean
        p_big_cap = price_from_bundle(
            bundle, OptionSpec(kind="european", strike=1.0, cap=2.0), mc).mean
        p_high_strike = price_from_bundle(
            bundle, OptionSpec(kind="european", strike=1.3, cap=2.0), mc).mean
        assert p_small_cap <= p_big_cap
        assert p_high_strike <= p_big_cap

    def test_maturity_grid_mismatch_rejected(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change()
        spec = OptionSpec(kind="european", strike=1.0, cap=2.0, maturity=2.0)
        with pytest.raises(ValueError):
            price(risk_neutralize(lsv, mc), spec, mc, 256, family, eps=0.2,
                  grid=TimeGrid(0.0, 1.0, 16))


class TestCatalog:
    def test_catalog_lookup_and_validation(self):
        lsv = lsv_from_catalog("lsv-tanh")
        assert lsv.validate() == pytest.approx(2.0, abs=1e-9)

    def test_unknown_name(self):
        with pytest.raises(KeyError):
            lsv_from_catalog("nope")

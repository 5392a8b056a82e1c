"""Acceptance battery: every criterion at its stated tolerance.

Run with ``pytest -s tests/test_acceptance.py`` to see one verdict line
per criterion.  The weak-convergence and price-convergence runs also
export their CSV artifacts to out/acceptance/ for the plotting frontend.

Monte Carlo sizes are chosen so each fixed tolerance sits at >= 3 standard
errors of the relevant estimator; oracle values come from closed forms
(Gaussian moments, characteristic functions), quadrature, or independent
simulation routes, never from the code path under test.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from slowfastmc import (
    ErgodicParams,
    FrozenEquation,
    OptionSpec,
    StreamFamily,
    TimeGrid,
    auxiliary_gap,
    estimate_invariant,
    girsanov_weight,
    lsv_tanh_model,
    mollify_lookback,
    ou_fast_pair,
    price,
    psd_sqrt,
    ref_ou_system,
    risk_neutralize,
    simulate_slow_fast,
    standard_measure_change,
    tabulate_averaged_model,
    to_log_system,
    verify_contraction,
    weak_convergence_report,
)
from slowfastmc.cli import main as cli_main
from slowfastmc.finance import averaged_local_vol, price_convergence_experiment, window_average_paths

SEED = 93170452
ARTIFACT_DIR = Path(__file__).resolve().parent.parent / "out" / "acceptance"

# Gaussian oracles for the reference system (fast factor stationary N(0, 1/4)):
# E cos(2Y) = exp(-2 var) so abar = (2 + e^{-1/2}) / 2 and sigbar = sqrt(2 abar);
# the averaged slow path is then an OU with unit rate, giving a N(m, v)
# terminal law with m = e^{-1} and v = sigbar^2 (1 - e^{-2}) / 2.
ABAR_REF = (2.0 + math.exp(-0.5)) / 2.0
SIGBAR_REF = math.sqrt(2.0 * ABAR_REF)
TERM_MEAN = math.exp(-1.0)
TERM_VAR = SIGBAR_REF**2 * (1.0 - math.exp(-2.0)) / 2.0
COS_TARGET = math.exp(-TERM_VAR / 2.0) * math.cos(TERM_MEAN)

EPS_SWEEP = [0.2, 0.05, 0.0125]
N_PATHS = 200_000


def _verdict(num: int, label: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {label} -- {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


@pytest.fixture(scope="module")
def family():
    return StreamFamily(SEED)


@pytest.fixture(scope="module")
def ref_ou():
    return ref_ou_system()


@pytest.fixture(scope="module")
def averaged_ref_model(ref_ou, family):
    # hull wide enough that averaged paths (sd ~ 1.06) essentially never
    # leave it; drift is linear in x so interpolation is exact
    params = ErgodicParams(burn_in=5.0, horizon=50.0, step=1e-3, n_strands=64)
    x_nodes = [-6.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 6.0]
    return tabulate_averaged_model(
        ref_ou, [0.0, 0.5, 1.0], x_nodes, params, family.child(3)
    )


@pytest.fixture(scope="module")
def convergence_report(ref_ou, averaged_ref_model, family):
    grid = TimeGrid(0.0, 1.0, 250)
    return weak_convergence_report(
        ref_ou, averaged_ref_model, EPS_SWEEP, ["cos"], N_PATHS,
        grid=grid, family=family.child(5),
    )


class TestCriterion1:
    def test_frozen_equation_ergodics(self, family):
        B, C = ou_fast_pair(kappa=2.0, noise=1.0)
        frozen = FrozenEquation(B, C, 0.0, [0.0])
        t0 = time.perf_counter()
        est = estimate_invariant(
            frozen, 5.0, 100.0, 1e-3, family.child(1), n_strands=384, n_batches=32
        )
        wall = time.perf_counter() - t0
        mean_ok = abs(est.mean[0]) <= 3.0 * est.se_mean[0]
        var_err = abs(est.cov[0, 0] - 0.25) / 0.25
        _verdict(
            1, "frozen-equation ergodics",
            mean_ok and var_err <= 0.02 and wall < 10.0,
            f"mean {est.mean[0]:+.5f} (3SE {3 * est.se_mean[0]:.5f}), "
            f"variance {est.cov[0, 0]:.5f} vs 0.25 ({var_err:.2%}), wall {wall:.1f}s",
        )


class TestCriterion2:
    def test_contraction_bound(self, family):
        B, C = ou_fast_pair(kappa=2.0, noise=1.0)
        frozen = FrozenEquation(B, C, 0.0, [0.0])
        report = verify_contraction(
            frozen, [1.0], [0.0], [0.25, 0.5, 1.0], 64, family.child(2), step=1e-3
        )
        worst = max(
            abs(r.measured - math.exp(-4.0 * r.s)) / math.exp(-4.0 * r.s)
            for r in report.rows
        )
        _verdict(
            2, "exponential contraction",
            worst <= 0.01 and not report.any_flagged,
            f"max relative deviation {worst:.4%} from exp(-4s)",
        )


class TestCriterion3:
    def test_averaged_coefficient_recovery(self, averaged_ref_model):
        model = averaged_ref_model
        ix1 = list(model.x_axes[0]).index(1.0)
        b_val = model.drift_table[0, ix1, 0]
        b_se = model.se_drift[0, ix1, 0]
        drift_ok = abs(b_val - (-1.0)) <= 3.0 * b_se
        # diffusion is x-independent: check every node at t = 0
        sig_nodes = model.diffusion_table[0, :, 0, 0]
        a_nodes = sig_nodes**2 / 2.0
        a_err = float(np.max(np.abs(a_nodes - ABAR_REF) / ABAR_REF))
        s_err = float(np.max(np.abs(sig_nodes - SIGBAR_REF) / SIGBAR_REF))
        _verdict(
            3, "averaged-coefficient recovery",
            drift_ok and a_err <= 0.01 and s_err <= 0.005,
            f"b-bar(0,1) {b_val:+.4f} (3SE {3 * b_se:.4f}), "
            f"a-bar err {a_err:.3%} (tol 1%), sig-bar err {s_err:.3%} (tol 0.5%)",
        )


class TestCriterion4:
    def test_psd_sqrt_suite(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            dim = int(rng.integers(1, 6))
            m = rng.normal(size=(dim, dim))
            a = m @ m.T
            root = psd_sqrt(a)
            resid = np.linalg.norm(root @ root - 2.0 * a)
            worst = max(worst, resid / (1.0 + np.linalg.norm(2.0 * a)))
        hand = psd_sqrt(np.array([[2.5, 1.5], [1.5, 2.5]]) / 2.0)
        hand_err = float(np.max(np.abs(hand - np.array([[1.5, 0.5], [0.5, 1.5]]))))
        _verdict(
            4, "psd square root",
            worst <= 1e-10 and hand_err <= 1e-12,
            f"worst scaled residual {worst:.2e}, 2x2 hand case err {hand_err:.2e}",
        )


class TestCriterion5:
    def test_weak_convergence_of_bounded_functional(self, convergence_report):
        report = convergence_report
        ARTIFACT_DIR.mkdir(parents=True, exist_ok=True)
        report.to_csv(ARTIFACT_DIR / "converge.csv")
        gaps = report.gaps("cos")  # [(eps, |cell - limit|, combined SE)]
        monotone = all(
            g2 <= g1 + math.hypot(s1, s2)
            for (_, g1, s1), (_, g2, s2) in zip(gaps, gaps[1:])
        )
        final_eps, final_gap, final_se = gaps[-1]
        final_ok = final_gap <= max(0.01, 3.0 * final_se)
        limit = report.cell(0.0, "cos").estimate
        limit_ok = abs(limit.mean - COS_TARGET) <= max(0.01, 3.0 * limit.std_error)
        _verdict(
            5, "weak convergence (cos functional)",
            monotone and final_ok and limit_ok,
            f"gaps {[f'{g:.4f}' for _, g, _ in gaps]}, final {final_gap:.4f} "
            f"(tol {max(0.01, 3.0 * final_se):.4f}), limit {limit.mean:.4f} "
            f"vs oracle {COS_TARGET:.4f}",
        )


class TestCriterion6:
    def test_auxiliary_gap_decreases(self, ref_ou, family):
        grid = TimeGrid(0.0, 1.0, 250)
        gaps = []
        for i, eps in enumerate(EPS_SWEEP):
            est = auxiliary_gap(ref_ou, eps, 20_000, family.child(6, i), grid=grid)
            gaps.append(est.mean)
        decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
        _verdict(
            6, "averaging-window gap",
            decreasing,
            "E sup|X - X_aux|^2 = " + ", ".join(f"{g:.5f}" for g in gaps),
        )


class TestCriterion7:
    def test_uniform_fast_second_moment(self, convergence_report, ref_ou):
        bounds = [convergence_report.fast_sq_bound[eps] for eps in EPS_SWEEP]
        spread = (max(bounds) - min(bounds)) / min(bounds)
        cap = 1.0 + float(np.sum(ref_ou.y0**2))
        _verdict(
            7, "uniform fast second moment",
            spread < 0.10 and max(bounds) < cap,
            f"max_t E|Y|^2 per eps {[f'{b:.4f}' for b in bounds]}, spread {spread:.2%}, "
            f"cap {cap}",
        )


class TestCriterion8:
    def test_girsanov_and_martingale(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        bundle = simulate_slow_fast(
            to_log_system(lsv), 0.1, TimeGrid(0.0, 1.0, 128), family.child(8), 20_000,
            store_increments=True,
        )
        w = girsanov_weight(bundle, lsv, mc)
        weight_ok = abs(w.mean - 1.0) <= 3.0 * w.std_error

        spec = OptionSpec(
            kind="custom-bounded", maturity=1.0,
            custom_payoff=_capped_identity, custom_bound=10.0,
        )
        est = price(
            risk_neutralize(lsv, mc), spec, mc, 100_000, family.child(9),
            eps=0.05, grid=TimeGrid(0.0, 1.0, 256),
        )
        mart_ok = abs(est.mean - 1.0) <= 3.0 * est.std_error
        _verdict(
            8, "risk-neutral sanity",
            weight_ok and mart_ok,
            f"E[dQ/dP] {w.mean:.5f} (3SE {3 * w.std_error:.5f}), "
            f"E[e^-rT S_T] {est.mean:.5f} (3SE {3 * est.std_error:.5f})",
        )


def _capped_identity(grid, S):
    return np.minimum(S[:, -1], 10.0)


class TestCriterion9:
    def test_price_convergence(self, family):
        lsv = lsv_tanh_model()
        mc = standard_measure_change(rate=0.02, gamma=0.1)
        spec = OptionSpec(kind="european", strike=1.0, cap=2.0, maturity=1.0)
        grid = TimeGrid(0.0, 1.0, 256)
        ergodic = ErgodicParams(burn_in=5.0, horizon=50.0, step=1e-3, n_strands=64)
        s_nodes = np.linspace(0.3, 3.0, 10)
        limit_model = averaged_local_vol(
            lsv, mc, [0.0, 0.5, 1.0], s_nodes, ergodic, family.child(90)
        )
        table = price_convergence_experiment(
            lsv, mc, spec, EPS_SWEEP, N_PATHS,
            family=family.child(91), grid=grid, limit_model=limit_model,
        )
        ARTIFACT_DIR.mkdir(parents=True, exist_ok=True)
        table.to_csv(ARTIFACT_DIR / "price.csv")

        limit = table.row(0.0).estimate
        rows = [table.row(eps) for eps in EPS_SWEEP]
        ses = [math.hypot(r.estimate.std_error, limit.std_error) for r in rows]
        monotone = all(
            r2.gap_vs_limit <= r1.gap_vs_limit + math.hypot(s1, s2)
            for (r1, s1), (r2, s2) in zip(zip(rows, ses), zip(rows[1:], ses[1:]))
        )
        final_ok = rows[-1].gap_vs_limit <= max(0.005 * lsv.s0, 3.0 * ses[-1])

        oracle_mean, oracle_se = _independent_local_vol_price(
            limit_model, lsv.s0, strike=1.0, cap=2.0, maturity=1.0,
            n_paths=10_000_000, n_steps=256, seed=1230,
        )
        cross_se = math.hypot(limit.std_error, oracle_se)
        cross_ok = abs(limit.mean - oracle_mean) <= 3.0 * cross_se
        _verdict(
            9, "price convergence (capped call)",
            monotone and final_ok and cross_ok,
            f"gaps {[f'{r.gap_vs_limit:.5f}' for r in rows]}, "
            f"final tol {max(0.005 * lsv.s0, 3.0 * ses[-1]):.5f}; "
            f"limit {limit.mean:.5f} vs oracle {oracle_mean:.5f} "
            f"(3SE {3 * cross_se:.5f})",
        )


def _independent_local_vol_price(model, s0, *, strike, cap, maturity,
                                 n_paths, n_steps, seed):
    """Oracle route: Euler in price coordinates with its own generator.

    Deliberately shares nothing with the pricing engine except the
    tabulated coefficient values: different state variable (S, not log S),
    different stepper and a different RNG family.
    """
    rng = np.random.default_rng(seed)
    h = maturity / n_steps
    sqrt_h = math.sqrt(h)
    total = 0.0
    total_sq = 0.0
    batch = 100_000
    done = 0
    while done < n_paths:
        b = min(batch, n_paths - done)
        s = np.full(b, float(s0))
        disc = np.zeros(b)
        r_prev = model.rate(0.0, s)
        for k in range(n_steps):
            t = k * h
            f = model.vol(t, s)
            z = rng.standard_normal(b)
            s = s * (1.0 + r_prev * h + f * sqrt_h * z)
            s = np.maximum(s, 1e-12)
            r_next = model.rate((k + 1) * h, s)
            disc += 0.5 * h * (r_prev + r_next)
            r_prev = r_next
        vals = np.exp(-disc) * np.minimum(np.maximum(s - strike, 0.0), cap)
        total += float(vals.sum())
        total_sq += float((vals * vals).sum())
        done += b
    mean = total / n_paths
    var = total_sq / n_paths - mean * mean
    return mean, math.sqrt(max(var, 0.0) / n_paths)


class TestCriterion10:
    def test_lookback_mollifier(self):
        grid = TimeGrid(0.0, 1.0, 40)
        # constant paths are exact for every window width
        const = np.full((2, 41), 3.3)
        const_ok = all(
            np.allclose(window_average_paths(grid, const, np.ones(41), d), 3.3, atol=1e-14)
            for d in (0.9, 0.2, 0.05, 0.0125)
        )
        # linear path: mean over [-0.7, -0.5] is -0.6 exactly
        theta = grid.nodes() - 1.0
        lin = window_average_paths(grid, theta[None, :], np.ones(41), 0.2)
        i = int(np.argmin(np.abs(theta + 0.5)))
        lin_err = abs(lin[0, i] - (-0.6))
        # window sup converges to the running sup as the width shrinks
        fine = TimeGrid(0.0, 1.0, 200)
        t = fine.nodes()
        path = (1.0 - np.abs(t - 0.6))[None, :]
        diffs = []
        for delta in (0.2, 0.05, 0.0125):
            fn = mollify_lookback(lambda sT, m: m, lambda th: np.ones_like(th), delta)
            diffs.append(abs(float(fn(fine, path)[0]) - 1.0))
        sweep_ok = diffs[0] > diffs[1] > diffs[2]
        _verdict(
            10, "lookback mollifier",
            const_ok and lin_err <= 1e-12 and sweep_ok,
            f"constant exact {const_ok}, linear window err {lin_err:.1e}, "
            f"sup gaps {[f'{d:.4f}' for d in diffs]}",
        )


class TestCriterion11:
    def test_byte_identical_outputs_across_workers(self, tmp_path):
        cfg = {
            "model": {"name": "ref-ou"},
            "mc": {"n_paths": 600, "seed": 4242, "batch_size": 128},
            "grid": {"n_steps": 40},
            "sweep": {"epsilons": [0.2, 0.1], "functionals": ["cos", "tanh"]},
            "ergodic": {
                "burn_in": 2.0, "horizon": 25.0, "strands": 4,
                "t_nodes": [0.0, 1.0], "x_nodes": [-4.0, 0.0, 4.0],
                "s_nodes": [0.5, 1.0, 2.0],
            },
            "option": {"kind": "european", "strike": 1.0, "cap": 2.0},
        }
        cfg_path = tmp_path / "cfg.yaml"
        cfg_path.write_text(yaml.safe_dump(cfg))
        digests = {}
        for sub in ("converge", "price"):
            blobs = []
            for workers, tag in ((1, "w1"), (2, "w2")):
                out = tmp_path / f"{sub}-{tag}"
                status = cli_main([
                    sub, "--config", str(cfg_path), "--out", str(out),
                    "--workers", str(workers),
                ])
                assert status == 0
                blobs.append((out / f"{sub}.csv").read_bytes())
            digests[sub] = blobs[0] == blobs[1]
        _verdict(
            11, "reproducibility across worker counts",
            all(digests.values()),
            f"converge identical: {digests['converge']}, price identical: {digests['price']}",
        )

"""Configuration-driven experiment runner.

Subcommands
-----------
frozen    invariant-measure diagnostics of the fast factor
average   tabulate the averaged drift/diffusion model
converge  weak-convergence sweep against the averaged limit
price     option-price convergence table for the finance model
verify    run the invariant/property battery; exit 0 iff all pass

Every run writes its CSV artifact(s), an ``effective_config.yaml`` echo
and a ``run_manifest.json`` (seed, config hash, versions, wall time).
CSV numeric content is byte-identical for a fixed seed regardless of
worker count; wall-clock columns are zeroed unless ``--timing`` is given
(measured times always live in the manifest).

Exit codes: 0 success, 1 check failure, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import ou_fast_pair, system_from_catalog
from .config import ExperimentConfig, validate_config
from .convergence import simulate_averaged, weak_convergence_report
from .engine import (
    check_dissipativity,
    khasminskii_delta,
    simulate_slow_fast,
)
from .ergodic import (
    CallableAveragedModel,
    ErgodicParams,
    FrozenEquation,
    estimate_invariant,
    psd_sqrt,
    tabulate_averaged_model,
    verify_contraction,
)
from .errors import ConfigError, SlowFastError
from .finance import (
    OptionSpec,
    girsanov_weight,
    lsv_from_catalog,
    price_convergence_experiment,
    price_from_bundle,
    risk_neutralize,
    standard_measure_change,
    to_log_system,
)
from .stochastic import (
    StreamFamily,
    TimeGrid,
    build_correlation,
    mc_estimate,
    sample_increments,
)

ENV_OUT = "SLOWFASTMC_OUT"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="slowfastmc",
        description="Slow-fast SDE averaging and LSV pricing experiments",
    )
    p.add_argument("subcommand", choices=["frozen", "average", "converge", "price", "verify"])
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="override mc.seed")
    p.add_argument("--paths", type=int, default=None, help="override mc.n_paths")
    p.add_argument("--workers", type=int, default=None, help="override mc.workers")
    p.add_argument("--out", type=Path, default=None, help="override output.dir")
    p.add_argument("--timing", action="store_true", help="write measured wall clocks into CSVs")
    return p


def _load_config(args) -> ExperimentConfig:
    raw = args.config.read_text(encoding="utf-8") if args.config else None
    overrides: dict = {}
    if args.seed is not None:
        overrides["mc.seed"] = args.seed
    if args.paths is not None:
        overrides["mc.n_paths"] = args.paths
    if args.workers is not None:
        overrides["mc.workers"] = args.workers
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    if args.timing:
        overrides["output.timing"] = True
    return validate_config(raw, overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    configured = cfg["output"]["dir"] or os.environ.get(ENV_OUT) or "out"
    path = Path(configured)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ergodic_params(cfg: ExperimentConfig) -> ErgodicParams:
    e = cfg["ergodic"]
    return ErgodicParams(
        burn_in=e["burn_in"], horizon=e["horizon"], step=e["step"],
        n_strands=e["strands"], n_batches=e["batches"],
    )


def _grid(cfg: ExperimentConfig, t_end: float | None = None) -> TimeGrid:
    g = cfg["grid"]
    return TimeGrid(0.0, t_end if t_end is not None else g["t_end"], g["n_steps"])


def _write_manifest(out: Path, subcommand: str, cfg: ExperimentConfig,
                    wall_s: float, artifacts: list[str], failures: list[str]) -> None:
    manifest = {
        "subcommand": subcommand,
        "seed": cfg["mc"]["seed"],
        "config_hash": cfg.config_hash(),
        "versions": {
            "slowfast_mc": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": wall_s,
        "artifacts": artifacts,
        "failures": failures,
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _cmd_frozen(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[str]]:
    system = system_from_catalog(cfg["model"]["name"], **cfg["model"]["params"])
    family = StreamFamily(cfg["mc"]["seed"]).child(10)
    params = _ergodic_params(cfg)
    frozen = FrozenEquation.of_system(system, 0.0, system.x0)
    est = estimate_invariant(
        frozen, params.burn_in, params.horizon, params.step, family,
        y_init=system.y0, n_strands=params.n_strands, n_batches=params.n_batches,
    )
    path = out / "frozen.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("quantity,index,value\n")
        for i, v in enumerate(est.mean):
            fh.write(f"mean,{i},{v:.17g}\n")
        for i, v in enumerate(est.se_mean):
            fh.write(f"se_mean,{i},{v:.17g}\n")
        for i in range(est.cov.shape[0]):
            for j in range(est.cov.shape[1]):
                fh.write(f"cov_{i}_{j},{i * est.cov.shape[1] + j},{est.cov[i, j]:.17g}\n")
        for q, vals in est.quantiles.items():
            for i, v in enumerate(vals):
                fh.write(f"quantile_{q:g},{i},{v:.17g}\n")
        fh.write(f"effective_sample_size,0,{est.effective_sample_size:.17g}\n")
        fh.write(f"n_kept,0,{est.n_kept}\n")
        fh.write(f"stationary,0,{int(est.stationary)}\n")
        for lag, corr in zip(est.decay_lags, est.decay_corr):
            fh.write(f"decay_corr,{lag:.17g},{corr:.17g}\n")
    return [path.name], []


def _cmd_average(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[str]]:
    system = system_from_catalog(cfg["model"]["name"], **cfg["model"]["params"])
    family = StreamFamily(cfg["mc"]["seed"]).child(20)
    model = tabulate_averaged_model(
        system, cfg["ergodic"]["t_nodes"], cfg["ergodic"]["x_nodes"],
        _ergodic_params(cfg), family,
    )
    path = out / "averaged_model.csv"
    model.to_csv(path)
    return [path.name], []


def _cmd_converge(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[str]]:
    system = system_from_catalog(cfg["model"]["name"], **cfg["model"]["params"])
    family = StreamFamily(cfg["mc"]["seed"]).child(30)
    model = tabulate_averaged_model(
        system, cfg["ergodic"]["t_nodes"], cfg["ergodic"]["x_nodes"],
        _ergodic_params(cfg), family.child(999),
    )
    report = weak_convergence_report(
        system, model,
        cfg["sweep"]["epsilons"], cfg["sweep"]["functionals"], cfg["mc"]["n_paths"],
        grid=_grid(cfg), family=family, ks_times=cfg["sweep"]["ks_times"],
        substeps=cfg["grid"]["substeps"], nu=cfg["grid"]["nu"],
        batch_size=cfg["mc"]["batch_size"], workers=cfg["mc"]["workers"],
    )
    path = out / "converge.csv"
    report.to_csv(path, include_timing=cfg["output"]["timing"])
    return [path.name], []


def _cmd_price(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[str]]:
    fin = cfg["finance"]
    lsv = lsv_from_catalog(fin["model"], horizon=cfg["option"]["maturity"], **fin["params"])
    mc = standard_measure_change(rate=fin["rate"], gamma=fin["gamma_mpr"])
    opt = cfg["option"]
    spec = OptionSpec(
        kind=opt["kind"], strike=opt["strike"], cap=opt["cap"],
        maturity=opt["maturity"], smoothing=opt["smoothing"], weight=opt["weight"],
    )
    family = StreamFamily(cfg["mc"]["seed"]).child(40)
    table = price_convergence_experiment(
        lsv, mc, spec, cfg["sweep"]["epsilons"], cfg["mc"]["n_paths"],
        family=family, grid=TimeGrid(0.0, spec.maturity, cfg["grid"]["n_steps"]),
        t_nodes=cfg["ergodic"]["t_nodes"],
        s_nodes=cfg["ergodic"]["s_nodes"],
        ergodic=_ergodic_params(cfg),
        substeps=cfg["grid"]["substeps"], nu=cfg["grid"]["nu"],
        batch_size=cfg["mc"]["batch_size"], workers=cfg["mc"]["workers"],
    )
    path = out / "price.csv"
    table.to_csv(path, include_timing=cfg["output"]["timing"])
    return [path.name], []


def _cmd_verify(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[str]]:
    seed = cfg["mc"]["seed"]
    family = StreamFamily(seed).child(50)
    rows: list[tuple[str, float, float, bool]] = []

    def check(name: str, statistic: float, threshold: float):
        ok = bool(statistic <= threshold)
        rows.append((name, float(statistic), float(threshold), ok))

    # correlated increments: residuals, determinism, empirical correlation
    spec = build_correlation([[0.6], [0.8]])
    check("correlation_residual_range",
          max(0.0 - float(spec.residual.min()), float(spec.residual.max()) - 1.0, 0.0), 0.0)
    grid_n = TimeGrid(0.0, 1.0, 200_000)
    spec05 = build_correlation([[0.5]])
    dW1, dWt1 = sample_increments(spec05, grid_n, family.stream(0))
    dW2, dWt2 = sample_increments(spec05, grid_n, family.stream(0))
    check("increments_deterministic",
          float(np.max(np.abs(dW1 - dW2)) + np.max(np.abs(dWt1 - dWt2))), 0.0)
    corr = float(np.corrcoef(dW1[:, 0], dWt1[:, 0])[0, 1])
    check("increments_correlation", abs(corr - 0.5), 3.0 / math.sqrt(grid_n.n_steps))

    # plain MC estimator against the CLT
    draws = family.stream(1).normals(1_000_000)
    est = mc_estimate(draws)
    check("mc_estimate_clt", abs(est.mean), 3e-3)

    # averaging-window widths at the closed-form points
    check("window_width_values",
          abs(khasminskii_delta(math.exp(-1)) - math.exp(-1))
          + abs(khasminskii_delta(math.exp(-16)) - 2 * math.exp(-16)), 1e-15)

    # fast-factor ergodics: stationary moments of the reference OU factor
    B, C = ou_fast_pair(kappa=2.0, noise=1.0)
    frozen = FrozenEquation(B, C, 0.0, [0.0])
    inv = estimate_invariant(frozen, 5.0, 50.0, 1e-3, family.child(2), n_strands=64)
    check("ou_invariant_mean", abs(float(inv.mean[0])), 3.0 * float(inv.se_mean[0]))
    check("ou_invariant_variance", abs(float(inv.cov[0, 0]) - 0.25), 0.02 * 0.25)

    # contraction at the tight OU bound
    rep = verify_contraction(frozen, [1.0], [0.0], [0.25, 0.5, 1.0], 64, family.child(3))
    check("contraction_flags", float(sum(r.flagged for r in rep.rows)), 0.0)
    r1 = [r for r in rep.rows if r.s == 1.0][0]
    check("contraction_tightness", abs(r1.measured / r1.bound - 1.0), 0.01)

    # dissipativity scan is exact for the OU pair
    beta_hat = check_dissipativity(B, C, n_trials=10_000, stream=family.stream(4))
    check("dissipativity_ou", abs(beta_hat - 2.0), 1e-9)

    # PSD square root: hand value and random round trips
    hand = psd_sqrt(np.array([[2.5, 1.5], [1.5, 2.5]]) / 2.0)
    check("psd_sqrt_hand_2x2",
          float(np.max(np.abs(hand - np.array([[1.5, 0.5], [0.5, 1.5]])))), 1e-12)
    rng = family.stream(5)
    worst = 0.0
    for i in range(200):
        dim = 1 + (i % 5)
        m = rng.normals((dim, dim))
        a = m @ m.T
        root = psd_sqrt(a)
        worst = max(worst, float(np.linalg.norm(root @ root - 2 * a)
                                 / (1.0 + np.linalg.norm(2 * a))))
    check("psd_sqrt_roundtrip", worst, 1e-10)

    # Girsanov weights average to one on the finance catalog model
    lsv = lsv_from_catalog(cfg["finance"]["model"])
    mcange = standard_measure_change(rate=cfg["finance"]["rate"],
                                     gamma=cfg["finance"]["gamma_mpr"])
    bundle = simulate_slow_fast(
        to_log_system(lsv), 0.1, TimeGrid(0.0, 1.0, 128), family.child(6), 20_000,
        store_increments=True,
    )
    w = girsanov_weight(bundle, lsv, mcange)
    check("girsanov_weight_mean", abs(w.mean - 1.0), 3.0 * w.std_error)

    # payoff algebra on shared risk-neutral paths (exact linearity)
    rn = risk_neutralize(lsv, mcange)
    pb = simulate_slow_fast(rn, 0.1, TimeGrid(0.0, 1.0, 128), family.child(7), 4096)
    s1 = OptionSpec(kind="european", strike=1.0, cap=2.0, maturity=1.0)
    s2 = OptionSpec(kind="european", strike=1.2, cap=1.5, maturity=1.0)
    s12 = OptionSpec(kind="custom-bounded", maturity=1.0, custom_payoff=_sum_payoff,
                     custom_bound=3.5)
    lin = abs(price_from_bundle(pb, s1, mcange).mean
              + price_from_bundle(pb, s2, mcange).mean
              - price_from_bundle(pb, s12, mcange).mean)
    check("payoff_linearity_shared_paths", lin, 1e-12)

    # deterministic averaged path (zero diffusion) against the ODE flow
    g = TimeGrid(0.0, 1.0, 512)
    model = CallableAveragedModel(_neg_drift, _zero_diffusion, d=1)
    bund = simulate_averaged(model, [1.0], g, family.child(8), 4)
    err = float(np.max(np.abs(bund.component("X")[:, -1, 0] - math.exp(-1.0))))
    check("averaged_ode_flow", err, 2.0 * g.h)

    path = out / "verify.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,statistic,threshold,passed\n")
        for name, stat, thr, ok in rows:
            fh.write(f"{name},{stat:.17g},{thr:.17g},{int(ok)}\n")
    failures = [f"{name}: {stat:.6g} > {thr:.6g}" for name, stat, thr, ok in rows if not ok]
    return [path.name], failures


def _sum_payoff(grid, S):
    sT = S[:, -1]
    return (np.minimum(np.maximum(sT - 1.0, 0.0), 2.0)
            + np.minimum(np.maximum(sT - 1.2, 0.0), 1.5))


def _neg_drift(t, x):
    return -x


def _zero_diffusion(t, x):
    return np.zeros((x.shape[0], 1, 1))


_COMMANDS = {
    "frozen": _cmd_frozen,
    "average": _cmd_average,
    "converge": _cmd_converge,
    "price": _cmd_price,
    "verify": _cmd_verify,
}


def run_experiment(cfg: ExperimentConfig, subcommand: str) -> int:
    """Execute one subcommand; returns the process exit status."""
    out = _out_dir(cfg)
    (out / "effective_config.yaml").write_text(cfg.echo_yaml())
    t0 = time.perf_counter()
    failures: list[str] = []
    artifacts = ["effective_config.yaml"]
    status = 0
    try:
        files, failures = _COMMANDS[subcommand](cfg, out)
        artifacts += files
        if failures:
            status = 1
    except SlowFastError as exc:
        failures = [f"{type(exc).__name__}: {exc}"]
        status = 3
    wall = time.perf_counter() - t0
    _write_manifest(out, subcommand, cfg, wall, artifacts, failures)
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    return run_experiment(cfg, args.subcommand)


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance gate: each criterion runs at its stated size and tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per
criterion is printed in the terminal summary (and inline with ``-s``).
"""

import json
import math
import time

import numpy as np
import pytest

import oracles
from acceptance_report import record
from diffusion_lab import divergence as dv
from diffusion_lab import estimators as est
from diffusion_lab import experiments as ex
from diffusion_lab import processes as pr
from diffusion_lab import targets as tg
from diffusion_lab.schedules import corollary_alpha, geometric_schedule, uniform_schedule
from diffusion_lab.stats import energy_distance_block_test

GAUSS_CFG = {"kind": "isotropic_gaussian", "mean": 0.0, "variance": 1.0}
ATOMS_CFG = {"kind": "atom_mixture", "weights": [0.5, 0.5], "atoms": [-1.0, 1.0]}
MIX_CFG = {"kind": "gaussian_mixture", "weights": [0.5, 0.5], "means": [-2.0, 2.0], "variances": [0.25, 0.25]}

GAUSS = tg.from_config(GAUSS_CFG)
ATOMS = tg.from_config(ATOMS_CFG)
MIX = tg.from_config(MIX_CFG)
N_GRID = [4, 8, 16, 32, 64, 128, 256, 512]
SEED = 20240611


def test_criterion_01_decomposition_vs_monte_carlo():
    start = time.perf_counter()
    sched = uniform_schedule(1.0, 4)
    rep = dv.delta_exact(GAUSS, sched, est.EstimatorSpec(GAUSS))
    kl = dv.pathwise_kl_estimate(GAUSS, sched, est.EstimatorSpec(GAUSS), 100_000, SEED)
    elapsed = time.perf_counter() - start
    ok_exact = abs(rep.delta_exact - 0.033188) < 5e-7
    ok_mc = abs(kl.estimate - rep.delta_exact) < 3 * kl.stderr
    ok_time = elapsed < 10.0
    passed = record("1", ok_exact and ok_mc and ok_time,
                    f"delta_exact={rep.delta_exact:.6f} mc={kl.estimate:.6f}+-{kl.stderr:.6f} "
                    f"|diff|/se={abs(kl.estimate - rep.delta_exact) / kl.stderr:.2f} time={elapsed:.2f}s")
    assert passed


def test_criterion_02_first_bound_grid():
    start = time.perf_counter()
    cells = violations = 0
    worst = -math.inf
    for model in (GAUSS, ATOMS, MIX):
        estimators = [est.EstimatorSpec(model), est.EstimatorSpec(model, "biased", bias=0.5),
                      est.EstimatorSpec(model, "scaled", scale=0.8)]
        for alpha in (None, 0.5, 1.0, 2.0):
            for n in N_GRID:
                sched = uniform_schedule(1.0, n) if alpha is None else geometric_schedule(1.0, n, alpha)
                for spec in estimators:
                    rep = dv.delta_exact(model, sched, spec)
                    cells += 1
                    gap = rep.delta_exact - rep.thm1_bound
                    worst = max(worst, gap)
                    violations += gap > 1e-9
    elapsed = time.perf_counter() - start
    passed = record("2", violations == 0 and cells == 288 and elapsed < 120,
                    f"{cells} cells, {violations} violations, max(delta - bound)={worst:.3e}, time={elapsed:.1f}s")
    assert passed


def test_criterion_03_first_order_rate():
    cfg = ex.parse_config({"target": GAUSS_CFG, "schedule": {"T": 1.0}, "order": 1,
                           "n_grid": [8, 16, 32, 64, 128, 256, 512]}, "rate_study")
    res = ex.run_rate_study(cfg)
    slope = res.summary["slope"]
    n_delta = 512 * res.rows[-1][1]
    passed = record("3", -1.1 <= slope <= -0.9 and n_delta <= 0.5 + 1e-9,
                    f"slope={slope:.4f} in [-1.1, -0.9]; n*delta(512)={n_delta:.6f} <= 0.5")
    assert passed


def test_criterion_04_geometric_bound():
    sched = geometric_schedule(1.0, 4, 2.0)
    rep = dv.delta_exact(GAUSS, sched)
    ok_bound = abs(rep.thm2_bound - 0.113240) < 5e-7
    # the exact divergence is 0.0421890 (joint Gaussian path-law oracle)
    oracle = oracles.gaussian_chain_kl(sched.times)
    ok_delta = abs(rep.delta_exact - oracle) < 1e-10 and abs(rep.delta_exact - 0.042188) < 1.5e-6
    ok_order = rep.delta_exact <= rep.thm2_bound
    sweep = ex.run_schedule_sweep(ex.parse_config(
        {"target": GAUSS_CFG, "schedule": {"T": 1.0, "n": 4}, "alpha_grid": [0.25, 0.5, 0.8, 1.0, 1.25, 2.0, 4.0, 8.0]},
        "schedule_sweep"))
    a_cor = corollary_alpha(100.0, 64)
    b_cor = dv.thm2_bound(GAUSS, 100.0, 64, a_cor)
    b_one = dv.thm2_bound(GAUSS, 100.0, 64, 1.0)
    passed = record("4", ok_bound and ok_delta and ok_order and not sweep.violations and b_cor < b_one,
                    f"thm2={rep.thm2_bound:.6f} delta={rep.delta_exact:.8f} (oracle {oracle:.8f}); "
                    f"sweep violations={len(sweep.violations)}; corollary bound {b_cor:.5f} < uniform-limit {b_one:.5f}")
    assert passed


def test_criterion_05a_gaussian_matched_exact_on_gaussian():
    kernel = est.KernelSpec(GAUSS, "gaussian_matched")
    worst = 0.0
    ok = True
    for n in N_GRID:
        kl = dv.pathwise_kl_estimate(GAUSS, uniform_schedule(1.0, n), kernel, 100_000, SEED)
        # ratios cancel to roundoff, so a machine-precision floor guards se = 0
        within = abs(kl.estimate) < 3 * kl.stderr or (abs(kl.estimate) <= 1e-12 and kl.stderr <= 1e-12)
        ok &= within
        worst = max(worst, abs(kl.estimate) / max(kl.stderr, 1e-300))
    passed = record("5a", ok, f"max |estimate|/stderr over n in {N_GRID[0]}..{N_GRID[-1]} = {worst:.2f} (< 3)")
    assert passed


def test_criterion_05b_second_order_rate():
    start = time.perf_counter()
    grid = [4, 8, 16, 32, 64]
    gm = ex.run_rate_study(ex.parse_config(
        {"target": ATOMS_CFG, "schedule": {"T": 3.0}, "order": 2, "n_grid": grid,
         "kernel": {"variant": "gaussian_matched"}, "paths": 3_000_000, "min_paths": 100_000, "seed": SEED},
        "rate_study"))
    mo = ex.run_rate_study(ex.parse_config(
        {"target": ATOMS_CFG, "schedule": {"T": 3.0}, "order": 1, "n_grid": grid, "estimator": {"variant": "exact"}},
        "rate_study"))
    elapsed = time.perf_counter() - start
    s_gm, s_mo = gm.summary["slope"], mo.summary["slope"]
    paths_max = gm.rows[-1][3]
    passed = record("5b", -2.3 <= s_gm <= -1.7 and -1.2 <= s_mo <= -0.8 and paths_max >= 1_000_000 and elapsed < 900,
                    f"gaussian_matched slope={s_gm:.3f} (se {gm.summary['slope_se']:.3f}) in [-2.3, -1.7]; "
                    f"mean_only slope={s_mo:.3f} in [-1.2, -0.8]; paths@64={paths_max}; time={elapsed:.0f}s")
    assert passed


def test_criterion_06_conditional_representation_in_law():
    sched = uniform_schedule(2.0, 8)
    a = pr.simulate_comparison(ATOMS, sched, 100_000, SEED, keep="all")
    b = pr.simulate_conditional_representation(ATOMS, sched, 100_000, SEED, keep="all")
    res = energy_distance_block_test(a.states[:, 1:, 0], b.states[:, 1:, 0], block_size=1000)
    passed = record("6", not res.rejects(1e-3),
                    f"block energy test z={res.z:.2f} p={res.p_value:.3f} over {res.blocks} blocks (reject if p < 1e-3)")
    assert passed


def test_criterion_07_reverse_structure():
    sched = uniform_schedule(1.0, 8)
    diag = pr.reverse_diagnostics(GAUSS, sched, 100_000, SEED)
    zf = np.abs(diag.z_scores[diag.future_mask()])
    zv = np.abs(diag.var_B - diag.expected_var_B) / diag.var_B_se
    passed = record("7", bool(np.all(zf < 4) and np.all(zv < 4)),
                    f"max |z| cov(B_k, W_m), m > k = {zf.max():.2f}; max |Var(B_k) - delta|/se = {zv.max():.2f}")
    assert passed


def test_criterion_08_immse_checks():
    worst_sandwich = 0.0
    violated = 0
    worst_fd = 0.0
    h = 1e-3
    for model in (GAUSS, ATOMS, MIX):
        for sched in (uniform_schedule(10.0, 20), geometric_schedule(5.0, 16, 1.3)):
            for row in dv.sandwich_check(model, sched, slack=1e-6):
                violated += row.violated
                worst_sandwich = max(worst_sandwich, row.lower - row.mid, row.mid - row.upper)
        for s in (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0):
            fd = (tg.mutual_information(model, s + h, 1e-12) - tg.mutual_information(model, s - h, 1e-12)) / (2 * h)
            worst_fd = max(worst_fd, abs(fd - tg.mmse(model, s) / 2))
    passed = record("8", violated == 0 and worst_fd < 1e-4,
                    f"sandwich violations={violated} (worst excess {worst_sandwich:.2e}); "
                    f"max |dI/ds - M/2|={worst_fd:.2e} (< 1e-4)")
    assert passed


def test_criterion_09_tweedie():
    res = ex.run_tweedie_check(ex.parse_config({"target": ATOMS_CFG}, "tweedie_check"))
    dev = res.summary["max_abs_dev"]
    passed = record("9", dev < 1e-4 and not res.violations, f"max |score - finite difference| = {dev:.2e} on y in [-5, 5]")
    assert passed


def test_criterion_10_determinism(tmp_path):
    docs = {
        "gauss": {"target": GAUSS_CFG, "schedule": {"family": "uniform", "T": 1.0, "n": 4}, "paths": 100_000},
        "atoms": {"target": ATOMS_CFG, "schedule": {"family": "uniform", "T": 1.0, "n": 16}, "paths": 100_000},
    }
    identical = True
    worst = 0.0
    for name, doc in docs.items():
        outs = []
        for tag, seed, workers in (("a", SEED, 1), ("b", SEED, 3), ("c", SEED + 1, 1)):
            cfg = ex.parse_config(dict(doc, seed=seed, workers=workers, out=str(tmp_path / f"{name}_{tag}")), "divergence")
            ex.execute(cfg)
            outs.append(tmp_path / f"{name}_{tag}")
        identical &= (outs[0] / "results.csv").read_bytes() == (outs[1] / "results.csv").read_bytes()
        r1 = json.loads((outs[0] / "manifest.json").read_text())["summary"]["reports"][0]
        r2 = json.loads((outs[2] / "manifest.json").read_text())["summary"]["reports"][0]
        combined = math.hypot(r1["mc_stderr"], r2["mc_stderr"])
        worst = max(worst, abs(r1["mc_estimate"] - r2["mc_estimate"]) / combined)
    passed = record("10", identical and worst < 3,
                    f"same-seed CSVs byte-identical={identical}; new-seed shift = {worst:.2f} combined se (< 3)")
    assert passed


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` or
``python3 tests/test_acceptance.py``.  Defaults are ``N = 512`` steps and
``M = 2e4`` paths unless a criterion states otherwise.
"""

import os
import subprocess
import sys

import numpy as np
import pytest

from smpv.adjoint import solve_adjoint_scalar_chain, solve_adjoints_convex
from smpv.conditions import (check_classical_singular, check_corollary_degenerate, check_integral_condition,
                             check_maximum_principle, check_pointwise_convex, check_pointwise_nonconvex,
                             check_pontryagin_singular, check_variational_equality)
from smpv.problem import PerturbationSpec
from smpv.scenarios import (batched_theta_probe, builtin_scenarios, clark_ocone_w2_study, convergence_study,
                            get_scenario, y1_consistency)
from smpv.sde import make_context, simulate_state
from smpv.stats import VIOLATED

N, M = 512, 20000
EPS = [0.2, 0.1, 0.05, 0.025]


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _setup(name, steps=N, paths=M, seed=0, backend="auto"):
    sc = get_scenario(name)
    ctx = make_context(sc.spec.horizon, steps, paths, seed)
    state = simulate_state(sc.spec, sc.control, ctx)
    return sc, state, solve_adjoints_convex(sc.spec, state, backend)


def test_criterion_01_closed_form_adjoint(report):
    sc, state, (_, P2) = _setup("SING-DET", seed=1)
    exact = -2.0 * (sc.spec.horizon - state.times)
    err_a = float(np.abs(P2.P[..., 0, 0] - exact).max())
    _, _, (_, R2) = _setup("SING-DET", seed=1, backend="regression")
    vals = R2.P[..., 0, 0]
    se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0])
    gap = np.abs(vals.mean(axis=0) - exact)
    ok = err_a <= 1e-10 and bool(np.all(gap <= np.maximum(2 * se, 0.02)))
    report(1, ok, f"analytic max error {err_a:.2e} (<= 1e-10); regression max gap {gap.max():.2e} "
                  f"(<= max(2se, 0.02)); backends {P2.backend}/{R2.backend}")


def test_criterion_02_duality_order(report):
    steps = [128, 256, 512]
    sd = convergence_study(get_scenario("SING-DET"), steps, [200], quantity="duality2")
    gbm = convergence_study(get_scenario("GBM"), steps, [M], quantity="duality1")
    dec = all(np.all(np.diff(s.errors) < 0) for s in (sd, gbm))
    ok = sd.order >= 0.8 and gbm.order >= 0.8 and dec
    report(2, ok, f"SING-DET order {sd.order:.3f}, GBM order {gbm.order:.3f} +- {gbm.order_stderr:.3f} "
                  f"(>= 0.8, decreasing {dec}); GBM residuals {np.round(gbm.errors, 6).tolist()}")


def test_criterion_03_integral_condition(report):
    sc, state, adj = _setup("SING-DET")
    rep = check_integral_condition(sc.spec, state, adj, PerturbationSpec.convex(1.0, 0.5))
    gap = abs(rep.value + 1 / 3)
    ok = gap <= 3 * rep.value_stderr + 0.01
    report(3, ok, f"estimate {rep.value:.6f} vs -1/3, gap {gap:.2e} (<= 3se + 0.01), verdict {rep.verdict}")


def _singular_verdicts(sc):
    ctx = make_context(sc.spec.horizon, N, 2000, 0)
    state = simulate_state(sc.spec, sc.control, ctx)
    adj = solve_adjoints_convex(sc.spec, state)
    chain = solve_adjoint_scalar_chain(sc.spec, state)
    V = sc.singular_region
    reps = [check_maximum_principle(sc.spec, state, adj), check_classical_singular(sc.spec, state, adj),
            check_pontryagin_singular(sc.spec, state, adj, V=V), check_integral_condition(sc.spec, state, adj),
            check_pointwise_convex(sc.spec, state, adj), check_pointwise_nonconvex(sc.spec, state, chain, V=V),
            check_corollary_degenerate(sc.spec, state, chain, V=V)]
    return {r.name: r.verdict for r in reps}


def test_criterion_04_pointwise_convex(report):
    sc, state, adj = _setup("SING-DET", paths=200)
    lhs = check_pointwise_convex(sc.spec, state, adj, v_list=[1.0], thetas=[0.5]).value
    null, st0, adj0 = _setup("NULL", paths=200)
    zero = check_pointwise_convex(null.spec, st0, adj0)
    singular = [s for s in builtin_scenarios() if s.classical_singular or s.pontryagin_singular]
    verdicts = {s.name: _singular_verdicts(s) for s in singular}
    violated = [(n, c) for n, vs in verdicts.items() for c, v in vs.items() if v == VIOLATED]
    ok = abs(lhs + 1.0) <= 0.02 and zero.value == 0.0 and bool(np.all(zero.mean == 0.0)) and not violated
    report(4, ok, f"SING-DET LHS(0.5, v=1) = {lhs:.6f}; NULL value {zero.value}; "
                  f"singular built-ins {sorted(verdicts)} VIOLATED verdicts {violated}")


def test_criterion_05_variational_equality(report):
    sc = get_scenario("SING-DET")
    rep = check_variational_equality(sc.spec, sc.control, 0.5, EPS, 1.0, make_context(1.0, N, 10, 0))
    lr, rr = rep.lhs_ratio[-1], rep.rhs_ratio[-1]
    ok = abs(lr / 0.5 - 1) <= 0.05 and abs(rr / 0.5 - 1) <= 0.05 and rep.exponent >= 2.5
    report(5, ok, f"dJ/eps^2 {np.round(rep.lhs_ratio, 4).tolist()}, expansion/eps^2 "
                  f"{np.round(rep.rhs_ratio, 4).tolist()} (within 5% of 0.5 at eps=0.025); "
                  f"remainder exponent {rep.exponent} (>= 2.5)")


def test_criterion_06_theta_obstruction(report):
    probe = batched_theta_probe(get_scenario("RANDOM-ADJ"), 0.5, 1.0, EPS, N, 100000, seed=0)
    ok = abs(probe.rms_slope - 1.5) <= 0.15
    report(6, ok, f"RMS slope {probe.rms_slope:.3f} +- {probe.rms_slope_stderr:.3f} (1.5 +- 0.15) at M=1e5; "
                  f"mean slope {probe.mean_slope:.3f}")


def test_criterion_07_max_principle_detection(report):
    sc, state, adj = _setup("VIOLATOR")
    mp = check_maximum_principle(sc.spec, state, adj, v_list=[0.0])
    h0, se0 = float(mp.extras["by_probe"][0]["mean"]), float(mp.extras["by_probe"][0]["stderr"])
    ns, st2, adj2 = _setup("NONSING-DIFF")
    cs = check_classical_singular(ns.spec, st2, adj2)
    lam = cs.extras["Lambda_mean"][0][0]
    ok = (mp.verdict == VIOLATED and abs(h0 - 1.0) <= 3 * se0 + 1e-12 and not cs.extras["singular"]
          and abs(lam + 2.0) <= 0.05)
    report(7, ok, f"VIOLATOR {mp.verdict}, curly H(v=0) = {h0:.6f} +- {se0:.1e}; "
                  f"NONSING-DIFF singular={cs.extras['singular']}, Lambda = {lam:.4f}")


def test_criterion_08_clark_ocone(report):
    res = clark_ocone_w2_study([500, 2000, 8000], N=64, replicates=100, seed=0)
    T, dt = res["T"], res["T"] / res["N"]
    bound = [5 * m ** -0.5 * 2 * T * T + 4 * T * dt for m in res["M"]]
    within = all(e <= b for e, b in zip(res["mse"], bound))
    ratios = np.array(res["mc_rms"][1:]) / np.array(res["mc_rms"][:-1])
    halving = bool(np.all(np.abs(ratios - 0.5) <= 0.15))
    report(8, within and halving, f"mse {np.round(res['mse'], 4).tolist()} vs bound {np.round(bound, 4).tolist()}; "
                                  f"Monte Carlo error ratios per 4x paths {np.round(ratios, 3).tolist()} (0.5 +- 0.15)")


def test_criterion_09_y1_consistency(report):
    sc = get_scenario("MIXED")
    rel = [y1_consistency(sc, n, M, seed=0) for n in (128, 256, 512)]
    ok = rel[-1] <= 0.05 and rel[0] > rel[1] > rel[2]
    report(9, ok, f"relative RMS {np.round(rel, 5).tolist()} at N = 128/256/512 (<= 5%, decreasing)")


def _cli(out, threads):
    env = dict(os.environ, SMPV_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "smpv.cli", "check", "--scenario", "MIXED", "--seed", "11",
                    "--steps", str(N), "--paths", "5000", "--conditions",
                    "maximum_principle,classical_singular,pontryagin_singular,integral_condition",
                    "--out", str(out)], env=env, check=False, capture_output=True)
    return (out / "summary.json").read_bytes()


def test_criterion_10_determinism(report, tmp_path):
    runs = [_cli(tmp_path / "a", 1), _cli(tmp_path / "b", 1), _cli(tmp_path / "c", 4)]
    ok = runs[0] == runs[1] == runs[2] and len(runs[0]) > 1000
    report(10, ok, f"{len(runs)} runs (1, 1, 4 threads) byte-identical: {ok} ({len(runs[0])} bytes)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))

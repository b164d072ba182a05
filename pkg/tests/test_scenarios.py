import json

import numpy as np
import pytest

from smpv.adjoint import solve_adjoints_convex
from smpv.conditions import check_classical_singular, check_pontryagin_singular
from smpv.errors import SchemaMismatch
from smpv.problem import PerturbationSpec
from smpv.scenarios import (brute_force_cost_delta, builtin_scenarios, clark_ocone_w2_study, convergence_study,
                            get_scenario, load_problem, pathwise_cost, problem_from_dict, problem_to_dict,
                            save_problem, y1_consistency)
from smpv.sde import make_context, simulate_state

NAMES = ["NULL", "SING-DET", "NONSING-DIFF", "VIOLATOR", "RANDOM-ADJ", "GBM", "MIXED"]


def test_builtin_names():
    assert [s.name for s in builtin_scenarios()] == NAMES
    assert get_scenario("sing-det").name == "SING-DET"
    with pytest.raises(KeyError):
        get_scenario("nope")


@pytest.mark.parametrize("name", NAMES)
def test_self_consistency(name):
    res = get_scenario(name).self_check()
    assert res["terminal"] <= 1e-10
    assert res["analytic"] is None or res["analytic"] <= 1e-10


@pytest.mark.parametrize("name", [n for n in NAMES if n != "MIXED"])
def test_declared_singularity_matches_verdicts(name):
    sc = get_scenario(name)
    ctx = make_context(1.0, 128, 4000, 1)
    st = simulate_state(sc.spec, sc.control, ctx)
    adj = solve_adjoints_convex(sc.spec, st)
    assert check_classical_singular(sc.spec, st, adj).extras["singular"] == sc.classical_singular
    assert check_pontryagin_singular(sc.spec, st, adj, sc.singular_region).extras["singular"] == sc.pontryagin_singular


def test_random_adj_closed_forms_solve_the_backward_pde():
    # p1 = -u_x for u(t, x) = E[x(T)^4 | x(t) = x]: check u_t + u_xx / 2 = 0 by finite differences
    sc = get_scenario("RANDOM-ADJ")
    t, x, h = 0.4, np.array([[0.7]]), 1e-4
    p1 = lambda t, x: sc.closed("p1", t, x)
    dt = (p1(t + h, x) - p1(t - h, x)) / (2 * h)
    dxx = (p1(t, x + h) - 2 * p1(t, x) + p1(t, x - h)) / h ** 2
    assert abs(dt + 0.5 * dxx) < 1e-5
    dp1 = (p1(t, x + h) - p1(t, x - h)) / (2 * h)
    np.testing.assert_allclose(dp1, sc.closed("p2", t, x), rtol=1e-7)
    np.testing.assert_allclose(sc.closed("q1", t, x), sc.closed("p2", t, x))


def test_brute_force_identity_perturbation_is_exactly_zero():
    sc = get_scenario("MIXED")
    ctx = make_context(1.0, 64, 300, 2)
    d = brute_force_cost_delta(sc.spec, sc.control, PerturbationSpec.convex(0.0, 0.5), ctx)
    assert np.all(d.samples == 0) and d.mean == 0 and d.stderr == 0
    sd = get_scenario("SING-DET")
    d = brute_force_cost_delta(sd.spec, sd.control, PerturbationSpec.needle(0.0, 0.5, 0.1), ctx)
    assert np.all(d.samples == 0)


def test_brute_force_sing_det_spike_value():
    sc = get_scenario("SING-DET")
    ctx = make_context(1.0, 2000, 100, 0)
    d = brute_force_cost_delta(sc.spec, sc.control, PerturbationSpec.needle(1.0, 0.5, 0.1), ctx)
    eps, tb = 0.1, 0.5
    assert d.stderr == 0
    assert d.mean == pytest.approx(eps ** 2 * (1 - tb - eps) + eps ** 3 / 3, rel=2e-3)


def test_brute_force_null_is_zero():
    sc = get_scenario("NULL")
    d = brute_force_cost_delta(sc.spec, sc.control, PerturbationSpec.needle(1.0, 0.2, 0.3), make_context(1.0, 32, 200, 0))
    assert d.mean == 0 and np.all(d.samples == 0)


def test_pathwise_cost_left_rule():
    sc = get_scenario("SING-DET")
    st = simulate_state(sc.spec, sc.control, make_context(1.0, 4, 2, 0))
    assert np.all(pathwise_cost(st) == 0)


def test_convergence_orders():
    gbm = convergence_study(get_scenario("GBM"), [128, 256, 512], 2000, seed=0, quantity="strong")
    assert gbm.order == pytest.approx(0.5, abs=0.1)
    sd = convergence_study(get_scenario("SING-DET"), [64, 128, 256], 10, quantity="duality2")
    assert sd.order == pytest.approx(1.0, abs=0.2)
    null = convergence_study(get_scenario("NULL"), [32, 64], 100, quantity="duality2")
    assert null.exact and np.all(null.errors == 0) and null.to_dict()["order"] == "inf"
    with pytest.raises(ValueError):
        convergence_study(get_scenario("MIXED"), [32, 64], 100, quantity="strong")


def test_clark_ocone_study_shape():
    res = clark_ocone_w2_study([200, 800], N=32, replicates=20, seed=1)
    assert res["floor"] == pytest.approx(2 / 32)
    assert res["mse"][1] < res["mse"][0]
    assert res["mc_rms"][1] < res["mc_rms"][0]


def test_y1_consistency_decreases():
    sc = get_scenario("MIXED")
    a, b = y1_consistency(sc, 64, 1000), y1_consistency(sc, 256, 1000)
    assert b < a < 0.1


@pytest.mark.parametrize("name", NAMES)
def test_problem_file_round_trip(tmp_path, name):
    sc = get_scenario(name)
    path = tmp_path / "p.json"
    save_problem(path, sc.spec, sc.control)
    spec, control = load_problem(path)
    assert spec == sc.spec and control.polys == sc.control.polys
    ctx = make_context(1.0, 16, 100, 3)
    assert np.array_equal(simulate_state(spec, control, ctx).x, simulate_state(sc.spec, sc.control, ctx).x)
    assert json.loads(path.read_text())["schema"] == "smpv-1"


def test_problem_schema_guard():
    d = problem_to_dict(get_scenario("NULL").spec)
    d["schema"] = "smpv-0"
    with pytest.raises(SchemaMismatch):
        problem_from_dict(d)

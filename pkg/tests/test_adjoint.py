import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpv.adjoint import duality_residual, solve_adjoint_convex, solve_adjoint_scalar_chain, solve_adjoints_convex
from smpv.errors import BackendUnsupported
from smpv.polynomial import Polynomial
from smpv.problem import ControlLaw, ControlRegion, PerturbationSpec, ProblemSpec
from smpv.scenarios import get_scenario
from smpv.sde import make_context, simulate_state, simulate_variational_convex


def run(name, N=64, M=200, seed=0):
    sc = get_scenario(name)
    ctx = make_context(sc.spec.horizon, N, M, seed)
    return sc, ctx, simulate_state(sc.spec, sc.control, ctx)


def test_sing_det_analytic_second_adjoint():
    sc, ctx, st = run("SING-DET")
    first, second = solve_adjoints_convex(sc.spec, st, "analytic")
    assert first.backend == second.backend == "analytic"
    np.testing.assert_allclose(second.P[0, :, 0, 0], -2 * (1 - ctx.times), atol=1e-12)
    assert np.all(first.P == 0) and np.all(second.Q == 0)
    np.testing.assert_allclose(second.P_next[0, :-1, 0, 0], second.P[0, 1:, 0, 0])


def test_sing_det_p2_at_half():
    sc, ctx, st = run("SING-DET")
    _, second = solve_adjoints_convex(sc.spec, st)
    assert second.P[0, 32, 0, 0] == pytest.approx(-1.0, abs=1e-12)


def test_gbm_first_adjoint_closed_form():
    sc, ctx, st = run("GBM")
    first, second = solve_adjoints_convex(sc.spec, st)
    np.testing.assert_allclose(first.P[0, :, 0], -np.exp(0.1 * (1 - ctx.times)), atol=1e-12)
    assert np.all(second.P == 0)


def test_regression_agrees_on_deterministic_problem():
    sc, ctx, st = run("SING-DET", M=400)
    _, second = solve_adjoints_convex(sc.spec, st, "regression")
    assert second.backend == "regression"
    np.testing.assert_allclose(second.P[:, :, 0, 0].mean(axis=0), -2 * (1 - ctx.times), atol=1e-12)


def test_analytic_rejected_for_random_adjoints():
    sc, ctx, st = run("RANDOM-ADJ")
    with pytest.raises(BackendUnsupported):
        solve_adjoint_convex(sc.spec, st, 1, "analytic")
    assert solve_adjoint_convex(sc.spec, st, 1, "auto").backend == "regression"


def test_random_adj_regression_matches_closed_forms():
    sc, ctx, st = run("RANDOM-ADJ", N=64, M=20000, seed=2)
    first, second = solve_adjoints_convex(sc.spec, st)
    t = ctx.times[None, :-1]
    x = st.x[:, :-1]

    def rel(est, key):
        ref = sc.closed(key, t, x).reshape(est.shape)
        return np.sqrt(np.mean((est - ref) ** 2) / np.mean(ref ** 2))

    assert rel(first.P[:, :-1], "P1") < 0.05
    assert rel(first.Q[:, :-1], "Q1") < 0.1
    assert rel(second.P[:, :-1], "P2") < 0.05
    assert rel(second.Q[:, :-1], "Q2") < 0.1


def test_scalar_chain_sing_det():
    sc, ctx, st = run("SING-DET")
    chain = solve_adjoint_scalar_chain(sc.spec, st)
    assert [a.order for a in chain] == [1, 2, 3, 4]
    np.testing.assert_allclose(chain[1].P[0], -2 * (1 - ctx.times), atol=1e-12)
    for i in (0, 2, 3):
        assert np.all(chain[i].P == 0)


def test_scalar_chain_random_adj():
    sc, ctx, st = run("RANDOM-ADJ", N=64, M=20000, seed=3)
    chain = solve_adjoint_scalar_chain(sc.spec, st)
    t, x = ctx.times[None, :-1], st.x[:, :-1]
    for i, key in enumerate(("p1", "p2", "p3")):
        ref = sc.closed(key, t, x)
        est = chain[i].P[:, :-1]
        assert np.sqrt(np.mean((est - ref) ** 2) / np.mean(ref ** 2)) < 0.05, key
    np.testing.assert_allclose(chain[3].P, -24.0, atol=1e-8)


def test_chain_agrees_with_vector_layout():
    sc, ctx, st = run("MIXED", N=32, M=3000, seed=1)
    first, second = solve_adjoints_convex(sc.spec, st)
    chain = solve_adjoint_scalar_chain(sc.spec, st)
    np.testing.assert_allclose(chain[0].P, first.P[..., 0], atol=1e-10)
    np.testing.assert_allclose(chain[1].P, second.P[..., 0, 0], rtol=1e-8, atol=1e-8)


def test_duality_second_order_sing_det_exact_value():
    # y1 = t, P2 = -2(T-t): the discrete residual is dt - dt^2
    sc, ctx, st = run("SING-DET", N=64, M=10)
    first, second = solve_adjoints_convex(sc.spec, st)
    bundle = simulate_variational_convex(sc.spec, st, PerturbationSpec.convex(1.0, 0.5))
    r = duality_residual(second, bundle, sc.spec, first=first)
    dt = 1 / 64
    assert r.abs_residual == pytest.approx(dt - dt ** 2, rel=1e-9)
    assert duality_residual(first, bundle, sc.spec).abs_residual < 1e-14


def test_duality_first_order_gbm_is_first_order():
    sc, _, _ = run("GBM")
    res = []
    for N in (64, 128):
        ctx = make_context(1.0, N, 2000, 4)
        st = simulate_state(sc.spec, sc.control, ctx)
        first = solve_adjoint_convex(sc.spec, st, 1)
        bundle = simulate_variational_convex(sc.spec, st, PerturbationSpec.convex(1.0, 0.5))
        res.append(duality_residual(first, bundle, sc.spec).abs_residual)
    assert 1.7 < res[0] / res[1] < 2.3


@settings(max_examples=15, deadline=None)
@given(st.floats(-1, 1), st.floats(-0.8, 0.8), st.floats(-2, 2), st.floats(0.5, 2))
def test_linear_problem_adjoints(a, s, d, T):
    # b = a x + u, sigma = s x, h = d x: P1 = -d exp(a (T - t)), P2 = 0 (RK4 accuracy at 32 steps)
    x, u = Polynomial.state(1, 1), Polynomial.control(1, 1)
    spec = ProblemSpec(1, 1, T, (1.0,), (x * a + u,), (x * s,), x * 0.0, x * d, ControlRegion.box(-1, 1))
    ctx = make_context(T, 32, 100, 0)
    st_ = simulate_state(spec, ControlLaw.constant(0.0, 1), ctx)
    first, second = solve_adjoints_convex(spec, st_)
    np.testing.assert_allclose(first.P[0, :, 0], -d * np.exp(a * (T - ctx.times)), rtol=1e-6, atol=1e-12)
    assert np.all(second.P == 0)

import numpy as np
import pytest

from smpv.adjoint import solve_adjoints_convex
from smpv.conditions import S_process
from smpv.errors import InsufficientGridResolution, Unavailable
from smpv.malliavin import (brownian_slice, clark_ocone_residual, nabla_estimate, nabla_S, nabla_ubar, state_slice,
                            tangent_state_derivative)
from smpv.polynomial import Polynomial
from smpv.problem import ControlLaw
from smpv.scenarios import get_scenario
from smpv.sde import make_context, simulate_state, simulate_transition


def run(name, N=64, M=200, seed=0, control=None):
    sc = get_scenario(name)
    ctx = make_context(sc.spec.horizon, N, M, seed)
    st = simulate_state(sc.spec, control or sc.control, ctx)
    return sc, ctx, st


def test_gbm_tangent_derivative_is_nu_x():
    sc, ctx, st = run("GBM")
    tr = simulate_transition(sc.spec, st)
    D = tangent_state_derivative(st, tr, sc.spec, 20)
    np.testing.assert_allclose(D[:, 20:, 0], 0.3 * st.x[:, 20:, 0], rtol=1e-12)
    assert np.all(D[:, :20] == 0)
    with pytest.raises(ValueError):
        tangent_state_derivative(st, tr, sc.spec, 65)


def test_slices_vanish_below_diagonal():
    sc, ctx, st = run("GBM")
    slc = state_slice(st, simulate_transition(sc.spec, st), sc.spec, [10, 30], [5, 10, 40])
    assert slc.D.shape == (2, 200, 3, 1)
    assert np.all(slc.D[0, :, 0] == 0) and np.all(slc.D[1, :, :2] == 0)
    b = brownian_slice(ctx, [3], [1, 3, 9])
    np.testing.assert_array_equal(b.D[0, 0], [0, 1, 1])
    sq = b.chain("W^2", 2 * ctx.W[:, [1, 3, 9], None])
    np.testing.assert_allclose(sq.row(3)[:, 2], 2 * ctx.W[:, 9])


def test_nabla_estimate_of_gbm_state():
    sc, ctx, st = run("GBM", N=256, M=500)
    s_idx = np.arange(0, 200, 20)
    slc = state_slice(st, simulate_transition(sc.spec, st), sc.spec, s_idx)
    nab = nabla_estimate(slc, ctx)
    ref = 0.3 * st.x[:, s_idx]
    assert np.max(np.abs(nab.values - ref)) < 0.05
    assert set(nab.f_eps) == {4 * ctx.dt, 8 * ctx.dt, 16 * ctx.dt}
    assert all(v < 1e-2 for v in nab.f_eps.values())
    with pytest.raises(InsufficientGridResolution):
        nabla_estimate(slc, ctx, eps_min=ctx.dt)


def test_nabla_ubar_variants():
    sc, ctx, st = run("MIXED", N=32, M=300)
    nab = nabla_ubar(sc.control, st, sc.spec)
    x, u = st.x[..., 0], st.u[..., 0]
    sigma = 0.3 * x + 0.5 * u + 0.2
    free = np.abs(0.5 * x) < 1
    np.testing.assert_allclose(nab.values[..., 0], np.where(free, -0.5 * sigma, 0.0), atol=1e-14)
    sc0, _, st0 = run("SING-DET")
    assert nabla_ubar(sc0.control, st0, sc0.spec).is_zero
    ol = ControlLaw.open_loop(np.zeros(65))
    with pytest.raises(Unavailable):
        nabla_ubar(ol, st0, sc0.spec)
    supplied = ControlLaw.open_loop(np.zeros(65), nabla=(Polynomial.constant(1, 1, 0.7),))
    np.testing.assert_allclose(nabla_ubar(supplied, st0, sc0.spec).values, 0.7)


def test_nabla_S_sources():
    sc, ctx, st = run("RANDOM-ADJ", N=32, M=2000)
    adj = solve_adjoints_convex(sc.spec, st)
    S = S_process(sc.spec, st, adj)
    with pytest.raises(Unavailable):
        nabla_S(S, adj, st)
    g = nabla_S(S, adj, st, closed_form=sc.nabla_S)
    assert g.method == "supplied" and np.all(g.values == -24.0)
    sc0, _, st0 = run("SING-DET")
    adj0 = solve_adjoints_convex(sc0.spec, st0)
    assert nabla_S(S_process(sc0.spec, st0, adj0), adj0, st0).is_zero


def test_clark_ocone_exact_for_brownian_endpoint():
    ctx = make_context(1.0, 32, 1000, 5)
    slc = brownian_slice(ctx, np.arange(32), [32])
    res = clark_ocone_residual(ctx.W[:, -1], slc, ctx)
    m = ctx.W[:, -1].mean()
    assert res.mse == pytest.approx(m ** 2, rel=1e-9)
    assert res.mean_error == pytest.approx(-m, rel=1e-9)


def test_clark_ocone_square_reaches_discrete_floor():
    N = 64
    ctx = make_context(1.0, N, 8000, 6)
    W = ctx.W
    slc = brownian_slice(ctx, np.arange(N), [N]).chain("W^2", 2 * W[:, [N], None])
    res = clark_ocone_residual(W[:, N] ** 2, slc, ctx)
    floor = 2.0 / N
    assert floor * 0.9 < res.mse < floor + 5 * 2.0 / np.sqrt(8000)

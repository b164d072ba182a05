import numpy as np
import pytest

from smpv.errors import DerivativeInconsistency, DimensionMismatch, EmptyControlRegion, InadmissibleControl, OrderTooHigh
from smpv.polynomial import Polynomial
from smpv.problem import (ControlLaw, ControlRegion, PerturbationSpec, ProblemSpec, delta_coefficients,
                          eval_coefficient, validate_spec)


def x_u():
    return Polynomial.state(1, 1), Polynomial.control(1, 1)


def basic(**kw):
    x, u = x_u()
    args = dict(state_dim=1, control_dim=1, horizon=1.0, initial_state=(0.0,), drift=(u,),
                diffusion=(x * 0.0 + 1.0,), running_cost=x ** 2, terminal_cost=x * 0.0,
                control_region=ControlRegion.box(-1, 1))
    args.update(kw)
    return ProblemSpec(**args)


def test_validate_accepts_builtin_shape():
    rep = validate_spec(basic())
    assert rep.valid and rep.worst_derivative_error < 1e-6


def test_validate_rejects_bad_inputs():
    x, u = x_u()
    with pytest.raises(DimensionMismatch):
        validate_spec(basic(initial_state=(0.0, 1.0)))
    with pytest.raises(EmptyControlRegion):
        validate_spec(basic(control_region=ControlRegion.box(1, -1)))
    with pytest.raises(EmptyControlRegion):
        validate_spec(basic(control_region=ControlRegion.box(-np.inf, 1)))
    with pytest.raises(DimensionMismatch):
        validate_spec(basic(terminal_cost=u))
    with pytest.raises(DimensionMismatch):
        validate_spec(basic(control_region=ControlRegion.finite([0.0, 1.0])))
    with pytest.raises(DimensionMismatch):
        validate_spec(basic(drift=(x ** 5,)))


def test_validate_catches_derivative_fault():
    # a tolerance below the central-difference truncation error must be flagged
    x, _ = x_u()
    with pytest.raises(DerivativeInconsistency):
        validate_spec(basic(running_cost=x ** 4 * 50.0), rtol=1e-14)


def test_eval_coefficient_and_order_limit():
    spec = basic()
    X, U = np.array([[0.5]]), np.array([[0.2]])
    np.testing.assert_allclose(eval_coefficient(spec, "f", (2, 0), 0.0, X, U), [2.0])
    np.testing.assert_allclose(eval_coefficient(spec, "b", (0, 1), 0.0, X, U), [[1.0]])
    with pytest.raises(OrderTooHigh):
        eval_coefficient(spec, "f", (4, 0), 0.0, X, U)
    assert eval_coefficient(spec.with_mode("needle"), "f", (4, 0), 0.0, X, U)[0] == 0.0


def test_delta_coefficients():
    x, u = x_u()
    spec = basic(diffusion=(x * u + u ** 2,), running_cost=u ** 2)
    d = delta_coefficients(spec, 0.0, 2.0, 0.0, 1.0)
    assert d["db"] == pytest.approx(1.0)
    assert d["dsigma"] == pytest.approx(3.0)
    assert d["dsigma_x"] == pytest.approx(1.0)
    assert d["df"] == pytest.approx(1.0)


def test_control_region_ops():
    box = ControlRegion.box([-1, 0], [1, 2])
    assert box.dim == 2 and box.is_convex
    np.testing.assert_allclose(box.project([5.0, -3.0]), [1.0, 0.0])
    assert box.contains([0.0, 1.0]) and not box.contains([0.0, 3.0])
    assert len(box.probe_points(9)) == 9
    pts = ControlRegion.finite([0.0, 1.0])
    np.testing.assert_allclose(pts.project([0.8]), [1.0])
    assert ControlRegion.from_dict(pts.to_dict()) == pts
    assert ControlRegion.from_dict(box.to_dict()) == box


def test_control_laws():
    x, _ = x_u()
    region = ControlRegion.box(-1, 1)
    law = ControlLaw.feedback([x * -2.0])
    np.testing.assert_allclose(law.evaluate(0, 0.0, np.array([[0.25], [3.0]]), region), [[-0.5], [-1.0]])
    assert not law.is_deterministic and ControlLaw.constant(0.5, 1).is_deterministic
    ol = ControlLaw.open_loop(np.full(5, 2.0))
    with pytest.raises(InadmissibleControl):
        ol.evaluate(0, 0.0, np.zeros((2, 1)), region)
    back = ControlLaw.from_dict(law.to_dict(), 1, 1)
    assert back.polys == law.polys
    with pytest.raises(ValueError):
        ControlLaw.feedback([Polynomial.control(1, 1)])


def test_perturbation_masks_snap_to_grid():
    times = np.linspace(0, 1, 11)
    p = PerturbationSpec.needle(1.0, 0.5, 0.2)
    assert list(np.flatnonzero(p.mask(times))) == [5, 6]
    assert p.effective_measure(times) == pytest.approx(0.2)
    q = PerturbationSpec.needle(1.0, 0.5, 0.14)
    assert q.effective_measure(times) == pytest.approx(0.1)
    union = PerturbationSpec.needle_union(1.0, [(0.0, 0.1), (0.8, 1.0)])
    assert union.eps == pytest.approx(0.3) and union.mask(times).sum() == 3
    with pytest.raises(ValueError):
        PerturbationSpec.needle(1.0, 0.95, 0.2).mask(times)
    with pytest.raises(ValueError):
        PerturbationSpec.convex(1.0, 1.5)


def test_direction_values():
    times = np.linspace(0, 1, 5)
    ubar = np.full((2, 5, 1), 0.25)
    spike = PerturbationSpec.spike_direction(1.0, 0.25, 0.5)
    d = spike.direction_values(ubar, times)
    np.testing.assert_allclose(d[0, :, 0], [0, 0.75, 0.75, 0, 0])
    const = PerturbationSpec.convex(0.5).direction_values(ubar, times)
    assert const.shape == (2, 5, 1) and np.all(const == 0.5)

"""Second-order conditions on a control that the first-order test cannot rank.

The problem is dx = u dt with running cost x^2 and candidate u = 0 on
U = [-1, 1].  Every first-order quantity vanishes, so the maximum principle
holds trivially.  The second-order adjoint P2(t) = -2 (T - t) then decides:
the integral and pointwise conditions are negative, and spike variations
cost eps^2 / 2 to leading order, in agreement with the expansion.
"""

import numpy as np

from smpv.adjoint import solve_adjoints_convex
from smpv.conditions import (check_classical_singular, check_integral_condition, check_maximum_principle,
                             check_pointwise_convex, check_variational_equality)
from smpv.problem import PerturbationSpec
from smpv.scenarios import get_scenario
from smpv.sde import make_context, simulate_state

sc = get_scenario("SING-DET")
ctx = make_context(sc.spec.horizon, 512, 100, seed=0)
state = simulate_state(sc.spec, sc.control, ctx)
first, second = solve_adjoints_convex(sc.spec, state)

print("first-order adjoint is zero:", np.abs(first.P).max() == 0.0)
print("P2 at t = 0, 0.5, 1:", second.P[0, [0, 256, 512], 0, 0])

print("maximum principle:", check_maximum_principle(sc.spec, state, [first, second]).verdict)
cs = check_classical_singular(sc.spec, state, [first, second])
print("singular in the classical sense:", cs.extras["singular"])

integ = check_integral_condition(sc.spec, state, [first, second], PerturbationSpec.convex(1.0, 0.5))
print(f"integral condition with v = 1: {integ.value:.5f} (exact -1/3), {integ.verdict}")
pw = check_pointwise_convex(sc.spec, state, [first, second], v_list=[1.0], thetas=[0.5])
print(f"pointwise condition at t = 0.5, v = 1: {pw.value:.5f}, {pw.verdict}")

rep = check_variational_equality(sc.spec, sc.control, 0.5, [0.2, 0.1, 0.05, 0.025], 1.0,
                                  make_context(1.0, 512, 10, 0))
print("spike widths:", np.round(rep.eps_effective, 5))
print("dJ / eps^2:       ", np.round(rep.lhs_ratio, 5))
print("expansion / eps^2:", np.round(rep.rhs_ratio, 5))
print("remainder exponent:", rep.exponent, rep.verdict)

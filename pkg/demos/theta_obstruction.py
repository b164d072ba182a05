"""Why the pointwise condition needs the Malliavin term when sigma depends on u.

With dx = (1 + u) dW and terminal cost x^4 the process S is random.  The
cross term S(t) y1(t) over a window of width theta shrinks like theta^(3/2)
in mean square, while its expectation shrinks like theta^2 because the
near-diagonal Malliavin derivative of S supplies the missing half order.
Dropping that derivative leaves the pointwise check undecidable.
"""

import numpy as np

from smpv.adjoint import solve_adjoints_convex
from smpv.conditions import check_pointwise_convex
from smpv.scenarios import batched_theta_probe, get_scenario
from smpv.sde import make_context, simulate_state

sc = get_scenario("RANDOM-ADJ")
probe = batched_theta_probe(sc, 0.5, 1.0, [0.2, 0.1, 0.05, 0.025], N=256, M=20000, seed=0)
print("theta:", np.round(probe.thetas, 4))
print("RMS of cross term: ", np.round(probe.rms, 5))
print("mean of cross term:", np.round(probe.mean, 5))
print(f"RMS slope {probe.rms_slope:.3f} (about 1.5), mean slope {probe.mean_slope:.3f} (about 2)")

state = simulate_state(sc.spec, sc.control, make_context(1.0, 128, 4000, seed=1))
adj = solve_adjoints_convex(sc.spec, state)
with_term = check_pointwise_convex(sc.spec, state, adj, v_list=[1.0], nabla_S_closed_form=sc.nabla_S)
without = check_pointwise_convex(sc.spec, state, adj, v_list=[1.0])
print(f"pointwise with closed-form nabla S: {with_term.verdict}, value {with_term.value:.4f}")
print(f"pointwise without it: {without.verdict} ({without.notes[-1]})")

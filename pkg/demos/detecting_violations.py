"""Two candidates that fail in different ways.

VIOLATOR (dx = u dt + dW, cost u^2, candidate u = 1) breaks the maximum
principle: the functional curly-H(v) = 1 - v^2 is positive away from v = +-1.
NONSING-DIFF (dx = u dW, terminal cost x^2, candidate u = 0) satisfies it,
but is not singular: H_uu + sigma_u^T P2 sigma_u equals -2, so the
second-order theory for singular controls does not apply.
"""

from smpv.adjoint import solve_adjoints_convex
from smpv.conditions import check_classical_singular, check_maximum_principle
from smpv.scenarios import get_scenario
from smpv.sde import make_context, simulate_state

for name in ("VIOLATOR", "NONSING-DIFF"):
    sc = get_scenario(name)
    state = simulate_state(sc.spec, sc.control, make_context(sc.spec.horizon, 256, 5000, seed=3))
    adj = solve_adjoints_convex(sc.spec, state)
    mp = check_maximum_principle(sc.spec, state, adj, v_list=[-1.0, -0.5, 0.0, 0.5, 1.0])
    print(f"{name}: maximum principle {mp.verdict}, worst value {mp.value:.4f}")
    for row in mp.extras["by_probe"]:
        print(f"   v = {row['v'][0]:+.2f}  curly H = {row['mean']:+.4f}")
    cs = check_classical_singular(sc.spec, state, adj)
    print(f"   singular: {cs.extras['singular']}, mean Lambda {cs.extras['Lambda_mean'][0][0]:+.4f}")

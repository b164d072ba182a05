"""Built-in scenarios with closed-form ground truth, brute-force oracles and problem files.

Each :class:`Scenario` stores a problem, a candidate control and whatever is
known about it in closed form.  Closed forms are callables ``(t, x) -> array``
on state arrays with a trailing component axis, so they can be compared node
by node with the numerical engines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adjoint import AdjointSolution, duality_residual, solve_adjoint_scalar_chain, solve_adjoints_convex
from .errors import SchemaMismatch
from .polynomial import Polynomial
from .problem import ControlLaw, ControlRegion, PerturbationSpec, ProblemSpec
from .sde import SimulationContext, StateEnsemble, make_context, simulate_state, simulate_variational_convex
from .stats import fit_loglog, mean_se

PROBLEM_SCHEMA = "smpv-1"


@dataclass
class Scenario:
    """A problem, a candidate control and its known properties.

    ``closed_forms`` keys: ``P1, Q1, P2, Q2`` (vector layout), ``p1..p4``,
    ``q1..q4`` (scalar chain), ``S``, ``Lambda``.  ``SS(t, x, v)`` and
    ``TT(t, x, v)`` are the needle functionals, ``nabla_S(t, x)`` and
    ``nabla_SS(t, x, v)`` closed-form Malliavin limits.
    """

    name: str
    spec: ProblemSpec
    control: ControlLaw
    closed_forms: dict = field(default_factory=dict)
    optimal: bool | None = None
    classical_singular: bool | None = None
    pontryagin_singular: bool | None = None
    singular_region: np.ndarray | None = None
    nabla_S: Callable | None = None
    nabla_SS: Callable | None = None
    exact_state: Callable | None = None
    direction: tuple = (1.0,)
    description: str = ""

    def closed(self, key: str, t, x) -> np.ndarray:
        return self.closed_forms[key](t, x)

    def self_check(self, N: int = 64, M: int = 16, seed: int = 0) -> dict:
        """Terminal conditions of the closed-form adjoints and, where the analytic
        backend applies, node-wise agreement with it.  Returns the worst errors."""
        spec = self.spec
        T = spec.horizon
        rng = np.random.default_rng(seed)
        xs = rng.uniform(-1.5, 1.5, (8, spec.state_dim))
        h = spec.terminal_cost
        out = {}
        n = spec.state_dim
        terminal = {
            "P1": lambda x: -np.stack([h.partial("x", i).evaluate(0.0, x) for i in range(n)], axis=-1),
            "p1": lambda x: -h.derivative((1, 0)).evaluate(0.0, x),
            "p2": lambda x: -h.derivative((2, 0)).evaluate(0.0, x),
            "p3": lambda x: -h.derivative((3, 0)).evaluate(0.0, x),
            "p4": lambda x: -h.derivative((4, 0)).evaluate(0.0, x),
        }
        if n == 1:
            terminal["P2"] = lambda x: -h.derivative((2, 0)).evaluate(0.0, x)[..., None, None]
        worst = 0.0
        for key, fn in terminal.items():
            if key in self.closed_forms:
                got = np.asarray(self.closed(key, T, xs))
                worst = max(worst, float(np.abs(got.reshape(fn(xs).shape) - fn(xs)).max()))
        out["terminal"] = worst
        ctx = make_context(T, N, M, seed)
        state = simulate_state(spec, self.control, ctx)
        try:
            first, second = solve_adjoints_convex(spec, state, "analytic")
        except Exception:
            out["analytic"] = None
            return out
        worst = 0.0
        t = ctx.times[None, :]
        for key, sol in (("P1", first), ("P2", second)):
            if key in self.closed_forms:
                ref = np.asarray(self.closed(key, t, state.x))
                worst = max(worst, float(np.abs(sol.P - ref.reshape(sol.P.shape)).max()))
        out["analytic"] = worst
        return out


# ---------------------------------------------------------------------------
# builtins


def _vars():
    x = Polynomial.state(1, 1, 0)
    u = Polynomial.control(1, 1, 0)
    return x, u, Polynomial.constant(1, 1, 0.0), Polynomial.constant(1, 1, 1.0)


def _full(val, x):
    return np.full(np.shape(x)[:-1], float(val)) if np.ndim(x) else float(val)


def _zeros_like_state(t, x):
    return np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x)[:-1]))


def _box():
    return ControlRegion.box(-1.0, 1.0)


def null_scenario(T: float = 1.0) -> Scenario:
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (0.0,), (u,), (one,), zero, zero, _box(), name="NULL")
    z = lambda t, x: _zeros_like_state(t, x)
    forms = {k: z for k in ("p1", "p2", "p3", "p4", "q1", "q2", "q3", "q4", "S", "Lambda")}
    forms.update({"P1": lambda t, x: z(t, x)[..., None], "Q1": lambda t, x: z(t, x)[..., None],
                  "P2": lambda t, x: z(t, x)[..., None, None], "Q2": lambda t, x: z(t, x)[..., None, None],
                  "SS": lambda t, x, v: z(t, x), "TT": lambda t, x, v: z(t, x)})
    return Scenario("NULL", spec, ControlLaw.constant(0.0, 1), forms, optimal=True, classical_singular=True,
                    pontryagin_singular=True, singular_region=_box().probe_points(9),
                    nabla_S=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
                    nabla_SS=lambda t, x, v: np.zeros(np.shape(x)[:-1]),
                    description="zero costs: every control is optimal and every adjoint vanishes")


def sing_det_scenario(T: float = 1.0) -> Scenario:
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (0.0,), (u,), (zero,), x ** 2, zero, _box(), name="SING-DET")
    z = lambda t, x: _zeros_like_state(t, x)
    p2 = lambda t, x: -2.0 * (T - t) + z(t, x)
    forms = {"p1": z, "q1": z, "p2": p2, "q2": z, "p3": z, "q3": z, "p4": z, "q4": z,
             "P1": lambda t, x: z(t, x)[..., None], "Q1": lambda t, x: z(t, x)[..., None],
             "P2": lambda t, x: p2(t, x)[..., None, None], "Q2": lambda t, x: z(t, x)[..., None, None],
             "S": p2, "Lambda": z,
             "SS": lambda t, x, v: p2(t, x) * v, "TT": lambda t, x, v: z(t, x)}
    return Scenario("SING-DET", spec, ControlLaw.constant(0.0, 1), forms, optimal=True, classical_singular=True,
                    pontryagin_singular=True, singular_region=_box().probe_points(9),
                    nabla_S=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
                    nabla_SS=lambda t, x, v: np.zeros(np.shape(x)[:-1]),
                    exact_state=lambda t, W: np.zeros(np.shape(W)),
                    description="deterministic singular arc: b = u, sigma = 0, f = x^2")


def nonsing_diff_scenario(T: float = 1.0, x0: float = 0.5) -> Scenario:
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (x0,), (zero,), (u,), zero, x ** 2, _box(), name="NONSING-DIFF")
    z = lambda t, x: _zeros_like_state(t, x)
    p1 = lambda t, x: -2.0 * np.asarray(x)[..., 0] + z(t, x)
    forms = {"P1": lambda t, x: p1(t, x)[..., None], "Q1": lambda t, x: z(t, x)[..., None],
             "P2": lambda t, x: (-2.0 + z(t, x))[..., None, None], "Q2": lambda t, x: z(t, x)[..., None, None],
             "p1": p1, "q1": z, "p2": lambda t, x: -2.0 + z(t, x), "q2": z,
             "p3": z, "q3": z, "p4": z, "q4": z, "S": z, "Lambda": lambda t, x: -2.0 + z(t, x)}
    return Scenario("NONSING-DIFF", spec, ControlLaw.constant(0.0, 1), forms, optimal=True,
                    classical_singular=False, pontryagin_singular=False,
                    nabla_S=lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)),
                    description="control in the diffusion only; Lambda = -2 so not singular")


def violator_scenario(T: float = 1.0) -> Scenario:
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (0.0,), (u,), (one,), u ** 2, zero, _box(), name="VIOLATOR")
    z = lambda t, x: _zeros_like_state(t, x)
    forms = {"P1": lambda t, x: z(t, x)[..., None], "Q1": lambda t, x: z(t, x)[..., None],
             "P2": lambda t, x: z(t, x)[..., None, None], "Q2": lambda t, x: z(t, x)[..., None, None],
             "p1": z, "q1": z, "p2": z, "q2": z, "p3": z, "q3": z, "p4": z, "q4": z}
    return Scenario("VIOLATOR", spec, ControlLaw.constant(1.0, 1), forms, optimal=False,
                    classical_singular=False, pontryagin_singular=False,
                    description="candidate u = 1 for running cost u^2; curly_H(v) = 1 - v^2")


def random_adj_scenario(T: float = 1.0, x0: float = 1.0) -> Scenario:
    """Quartic terminal cost under additive-plus-controlled noise.

    With ``ubar = 0`` the state is ``x0 + W`` and every adjoint is an explicit
    polynomial in ``(t, x)``; ``S = Q2 = -24 x`` is random with ``nabla S = -24``.
    """
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (x0,), (zero,), (one + u,), zero, x ** 4, ControlRegion.box(0.0, 1.0),
                       name="RANDOM-ADJ")
    X = lambda x: np.asarray(x)[..., 0]
    p1 = lambda t, x: -4.0 * (X(x) ** 3 + 3.0 * X(x) * (T - t))
    q1 = lambda t, x: -12.0 * (X(x) ** 2 + (T - t))
    p2 = q1
    q2 = lambda t, x: -24.0 * X(x) + 0.0 * t
    p3 = lambda t, x: -24.0 * X(x) + 0.0 * t
    q3 = lambda t, x: -24.0 + 0.0 * X(x) + 0.0 * t
    p4 = q3
    q4 = lambda t, x: 0.0 * X(x) + 0.0 * t
    forms = {"p1": p1, "q1": q1, "p2": p2, "q2": q2, "p3": p3, "q3": q3, "p4": p4, "q4": q4,
             "P1": lambda t, x: p1(t, x)[..., None], "Q1": lambda t, x: q1(t, x)[..., None],
             "P2": lambda t, x: p2(t, x)[..., None, None], "Q2": lambda t, x: q2(t, x)[..., None, None],
             "S": q2, "Lambda": lambda t, x: p2(t, x)}
    return Scenario("RANDOM-ADJ", spec, ControlLaw.constant(0.0, 1), forms, optimal=True,
                    classical_singular=False, pontryagin_singular=False,
                    nabla_S=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), -24.0),
                    exact_state=lambda t, W: x0 + W,
                    description="random adjoints with sigma_u = 1: theta-scaling and regression tests")


def gbm_scenario(T: float = 1.0, mu: float = 0.1, nu: float = 0.3, x0: float = 1.0) -> Scenario:
    """Geometric Brownian motion with an additive control in the drift and linear terminal cost."""
    x, u, zero, one = _vars()
    spec = ProblemSpec(1, 1, T, (x0,), (x * mu + u,), (x * nu,), zero, x, _box(), name="GBM")
    z = lambda t, x: _zeros_like_state(t, x)
    p1 = lambda t, x: -np.exp(mu * (T - t)) + z(t, x)
    forms = {"p1": p1, "q1": z, "p2": z, "q2": z, "p3": z, "q3": z, "p4": z, "q4": z,
             "P1": lambda t, x: p1(t, x)[..., None], "Q1": lambda t, x: z(t, x)[..., None],
             "P2": lambda t, x: z(t, x)[..., None, None], "Q2": lambda t, x: z(t, x)[..., None, None]}
    return Scenario("GBM", spec, ControlLaw.constant(0.0, 1), forms, optimal=False, classical_singular=False,
                    pontryagin_singular=False,
                    exact_state=lambda t, W: x0 * np.exp((mu - 0.5 * nu ** 2) * t + nu * W),
                    description="convergence tests; u = 0 is not optimal (u = -1 lowers E x(T))")


def mixed_scenario(T: float = 1.0) -> Scenario:
    """All of ``b_x, sigma_x, sigma_u`` nonzero, with a clamped linear feedback candidate."""
    x, u, zero, one = _vars()
    b = x * -0.5 + u + x * u * 0.1
    s = x * 0.3 + u * 0.5 + 0.2
    spec = ProblemSpec(1, 1, T, (1.0,), (b,), (s,), x ** 2 + u ** 2 * 0.5, x ** 2, _box(), name="MIXED")
    law = ControlLaw.feedback([x * -0.5])
    return Scenario("MIXED", spec, law, {}, description="generic random problem for consistency tests")


def builtin_scenarios() -> list[Scenario]:
    return [null_scenario(), sing_det_scenario(), nonsing_diff_scenario(), violator_scenario(),
            random_adj_scenario(), gbm_scenario(), mixed_scenario()]


def get_scenario(name: str) -> Scenario:
    for sc in builtin_scenarios():
        if sc.name.lower() == name.lower():
            return sc
    raise KeyError(f"unknown scenario {name!r}; choose from {[s.name for s in builtin_scenarios()]}")


# ---------------------------------------------------------------------------
# brute-force cost differences


def pathwise_cost(state: StateEnsemble) -> np.ndarray:
    """``sum_k f(t_k, x_k, u_k) dt + h(x_N)`` on every path (left-point rule)."""
    spec, ctx = state.spec, state.ctx
    N = ctx.steps
    run = spec.f(ctx.times[None, :N], state.x[:, :N], state.u[:, :N]).sum(axis=1) * ctx.dt
    return run + spec.h(state.x[:, N])


@dataclass
class CostDelta:
    mean: float
    stderr: float
    samples: np.ndarray


def perturbed_control_values(ubar_values: np.ndarray, perturbation: PerturbationSpec, times: np.ndarray) -> np.ndarray:
    """Control process ``u_eps`` built from the candidate's grid values."""
    if perturbation.kind == "needle":
        mask = np.zeros(len(times), dtype=bool)
        mask[:-1] = perturbation.mask(times)
        out = ubar_values.copy()
        out[:, mask] = np.array(perturbation.spike_value)
        return out
    return ubar_values + perturbation.eps * perturbation.direction_values(ubar_values, times)


def brute_force_cost_delta(spec: ProblemSpec, control: ControlLaw, perturbation: PerturbationSpec,
                           ctx: SimulationContext, state: StateEnsemble | None = None) -> CostDelta:
    """``J(u_eps) - J(ubar)`` with common random numbers.

    The perturbed control is ``v`` on the spike set and the candidate's own
    control process elsewhere (needle), or ``ubar + eps v`` (convex).
    """
    base = simulate_state(spec, control, ctx) if state is None else state
    values = perturbed_control_values(base.u, perturbation, ctx.times)
    pert = simulate_state(spec, control, ctx, control_values=values)
    d = pathwise_cost(pert) - pathwise_cost(base)
    m, s = mean_se(d)
    return CostDelta(float(m), float(s), d)


# ---------------------------------------------------------------------------
# convergence studies


@dataclass
class ConvergenceStudy:
    quantity: str
    steps: list
    errors: np.ndarray
    stderr: np.ndarray
    order: float
    order_stderr: float
    exact: bool

    def to_dict(self) -> dict:
        order = self.order if np.isfinite(self.order) else ("inf" if self.order > 0 else "nan")
        return {"quantity": self.quantity, "steps": list(map(int, self.steps)), "errors": self.errors.tolist(),
                "stderr": self.stderr.tolist(), "order": order, "order_stderr": _f(self.order_stderr),
                "exact": self.exact}


def _f(x):
    x = float(x)
    return x if np.isfinite(x) else str(x)


def _fit(quantity, N_list, errs, ses, T) -> ConvergenceStudy:
    errs, ses = np.abs(np.asarray(errs, dtype=float)), np.asarray(ses, dtype=float)
    if np.all(errs <= 1e-14):
        return ConvergenceStudy(quantity, list(N_list), errs, ses, float("inf"), 0.0, True)
    dts = T / np.asarray(N_list, dtype=float)
    fit = fit_loglog(dts, np.maximum(errs, 1e-300))
    return ConvergenceStudy(quantity, list(N_list), errs, ses, fit["slope"], fit["slope_stderr"], False)


def convergence_study(scenario: Scenario, N_list, M_list=None, seed: int = 0, quantity: str = "strong",
                      backend: str = "auto") -> ConvergenceStudy:
    """Error against step count with a fitted order in ``dt``.

    ``quantity``:

    * ``"strong"``: RMS terminal error against ``scenario.exact_state`` on the
      same Brownian path;
    * ``"duality1"`` / ``"duality2"``: first- and second-order duality residual
      for the scenario's constant direction.
    """
    N_list = list(N_list)
    M_list = [1000] * len(N_list) if M_list is None else list(np.broadcast_to(M_list, (len(N_list),)))
    spec = scenario.spec
    T = spec.horizon
    errs, ses = [], []
    for N, M in zip(N_list, M_list):
        ctx = make_context(T, N, int(M), seed)
        state = simulate_state(spec, scenario.control, ctx)
        if quantity == "strong":
            if scenario.exact_state is None:
                raise ValueError(f"scenario {scenario.name} has no exact state")
            exact = scenario.exact_state(T, ctx.W[:, -1])
            sq = (state.x[:, -1, 0] - exact) ** 2
            m, s = mean_se(sq)
            errs.append(np.sqrt(m))
            ses.append(0.5 * s / max(np.sqrt(m), 1e-300))
        elif quantity in ("duality1", "duality2"):
            first, second = solve_adjoints_convex(spec, state, backend)
            bundle = simulate_variational_convex(spec, state, PerturbationSpec.convex(scenario.direction, 0.5))
            r = (duality_residual(first, bundle, spec) if quantity == "duality1"
                 else duality_residual(second, bundle, spec, first=first))
            errs.append(r.abs_residual)
            ses.append(r.residual_stderr)
        else:
            raise ValueError(f"unknown quantity {quantity!r}")
    return _fit(quantity, N_list, errs, ses, T)


def clark_ocone_w2_study(M_list, N: int = 64, replicates: int = 100, seed: int = 0, T: float = 1.0) -> dict:
    """Clark-Ocone reconstruction of ``W(T)^2`` over independent replicates.

    For each ``M`` returns the mean squared error (its discretization floor is
    ``2 T dt``) and the RMS across replicates of the mean reconstruction
    error, which is the Monte Carlo part and scales like ``M^-1/2``.
    """
    from .malliavin import brownian_slice, clark_ocone_residual

    out = {"N": N, "T": T, "floor": 2 * T * T / N, "M": [], "mse": [], "mse_stderr": [], "mc_rms": []}
    for M in M_list:
        mses, means = [], []
        for r in range(replicates):
            ctx = make_context(T, N, int(M), seed, offset=r * int(M))
            W = ctx.W
            slc = brownian_slice(ctx, np.arange(N), [N]).chain("W(T)^2", 2.0 * W[:, [N], None])
            res = clark_ocone_residual(W[:, N] ** 2, slc, ctx)
            mses.append(res.mse)
            means.append(res.mean_error)
        m, s = mean_se(np.array(mses))
        out["M"].append(int(M))
        out["mse"].append(float(m))
        out["mse_stderr"].append(float(s))
        out["mc_rms"].append(float(np.sqrt(np.mean(np.square(means)))))
    return out


def y1_consistency(scenario: Scenario, N: int, M: int, seed: int = 0, target=None) -> float:
    """Relative RMS gap at ``T`` between the direct and transition-matrix first variations.

    The direction is ``target - ubar(t)`` on the whole horizon (``target``
    defaults to a far corner of the control region), so it is admissible for
    any candidate.
    """
    from .sde import simulate_transition, y1_explicit

    ctx = make_context(scenario.spec.horizon, N, M, seed)
    state = simulate_state(scenario.spec, scenario.control, ctx)
    region = scenario.spec.control_region
    target = (region.hi if region.kind == "box" else region.points[-1]) if target is None else target
    pert = PerturbationSpec.spike_direction(target, 0.0, scenario.spec.horizon)
    direct = simulate_variational_convex(scenario.spec, state, pert).y["y1"][:, -1]
    explicit = y1_explicit(scenario.spec, state, simulate_transition(scenario.spec, state), pert)[:, -1]
    return float(np.sqrt(np.mean((direct - explicit) ** 2) / np.mean(direct ** 2)))


def batched_theta_probe(scenario: Scenario, t_bar: float, v, theta_list, N: int, M: int, seed: int = 0,
                        batch: int = 25000, backend: str = "auto"):
    """Theta-scaling probe over ``M`` paths simulated in independent batches of ``batch`` paths.

    Batches use disjoint path counters of one ensemble, so the result equals a
    single large run apart from the adjoint regressions being fitted per batch.
    """
    from .conditions import S_process, effective_thetas, fit_theta_probe, theta_cross_term
    from .sde import simulate_transition

    spec = scenario.spec
    parts = [[] for _ in theta_list]
    for start in range(0, M, batch):
        ctx = make_context(spec.horizon, N, min(batch, M - start), seed, offset=start)
        state = simulate_state(spec, scenario.control, ctx)
        adj = solve_adjoints_convex(spec, state, backend)
        S = S_process(spec, state, adj)
        tr = simulate_transition(spec, state)
        for j, th in enumerate(theta_list):
            parts[j].append(theta_cross_term(spec, state, tr, S, t_bar, v, th))
        del state, adj, S, tr
    return fit_theta_probe(effective_thetas(t_bar, theta_list, spec.horizon / N), [np.concatenate(p) for p in parts])


# ---------------------------------------------------------------------------
# problem files


def _poly_dict(p: Polynomial) -> list:
    return p.to_term_list()


def problem_to_dict(spec: ProblemSpec, control: ControlLaw | None = None) -> dict:
    d = {
        "schema": PROBLEM_SCHEMA,
        "name": spec.name,
        "state_dim": spec.state_dim,
        "control_dim": spec.control_dim,
        "horizon": spec.horizon,
        "initial_state": list(spec.initial_state),
        "mode": spec.mode,
        "drift": [_poly_dict(p) for p in spec.drift],
        "diffusion": [_poly_dict(p) for p in spec.diffusion],
        "running_cost": _poly_dict(spec.running_cost),
        "terminal_cost": _poly_dict(spec.terminal_cost),
        "control_region": spec.control_region.to_dict(),
    }
    if control is not None:
        d["control"] = control.to_dict()
    return d


def problem_from_dict(d: dict) -> tuple[ProblemSpec, ControlLaw | None]:
    if d.get("schema") != PROBLEM_SCHEMA:
        raise SchemaMismatch(f"problem schema {d.get('schema')!r} is not {PROBLEM_SCHEMA!r}")
    n, m = int(d["state_dim"]), int(d["control_dim"])
    poly = lambda terms: Polynomial.from_term_list(n, m, terms)
    spec = ProblemSpec(n, m, float(d["horizon"]), tuple(d["initial_state"]),
                       tuple(poly(t) for t in d["drift"]), tuple(poly(t) for t in d["diffusion"]),
                       poly(d["running_cost"]), poly(d["terminal_cost"]),
                       ControlRegion.from_dict(d["control_region"]), d.get("mode", "convex"), d.get("name", ""))
    control = ControlLaw.from_dict(d["control"], n, m) if "control" in d else None
    return spec, control


def save_problem(path, spec: ProblemSpec, control: ControlLaw | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(spec, control), fh, sort_keys=True, indent=1)


def load_problem(path) -> tuple[ProblemSpec, ControlLaw | None]:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))

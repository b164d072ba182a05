"""Necessary-condition functionals and their statistical verdicts.

Every check evaluates its functional on all grid nodes but the terminal one,
on every path and on every probe value ``v``, and condenses the result into a
:class:`ConditionReport` (per-node means, standard errors, positive parts and a
three-way verdict, see :func:`smpv.stats.verdict`).

Adjoints are passed as a sequence: ``(first, second)`` from the vector solver
or the four scalar-chain solutions.  Only the first two enter the convex
checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import DegenerateProbe, InsufficientPoints, Unavailable
from .malliavin import nabla_S as _nabla_S
from .malliavin import nabla_ubar as _nabla_ubar
from .problem import ControlLaw, PerturbationSpec, ProblemSpec, delta_coefficients, hess, jac
from .sde import SimulationContext, StateEnsemble, TransitionEnsemble, simulate_state, simulate_variational_convex
from .sde import simulate_variational_needle
from .stats import HOLDS, INCONCLUSIVE, VIOLATED, default_tol, fit_loglog, mean_se, verdict

REPORT_SCHEMA = "smpv-report-1"


# ---------------------------------------------------------------------------
# report


@dataclass
class ConditionReport:
    """Outcome of one condition check.

    ``mean``/``stderr``/``max_positive`` are ``(nodes, probes)`` arrays over the
    tested grid nodes and probe values; ``value`` is the headline statistic.
    """

    name: str
    verdict: str
    tol: float
    times: np.ndarray
    probes: list
    mean: np.ndarray
    stderr: np.ndarray
    max_positive: np.ndarray
    value: float
    value_stderr: float
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self, series: bool = True) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "condition": self.name,
            "verdict": self.verdict,
            "tol": float(self.tol),
            "value": _num(self.value),
            "value_stderr": _num(self.value_stderr),
            "provenance": self.provenance,
            "notes": list(self.notes),
            "extras": _jsonable(self.extras),
            "probes": _jsonable(self.probes),
        }
        if series:
            d["series"] = {"t": _jsonable(self.times), "mean": _jsonable(self.mean),
                           "stderr": _jsonable(self.stderr), "max_positive": _jsonable(self.max_positive)}
        return d

    def to_json(self, series: bool = True) -> str:
        return json.dumps(self.to_dict(series), sort_keys=True, indent=1)

    def write_csv(self, path) -> None:
        """Per-(t, v) rows: ``t, probe, mean, stderr, max_positive, tol``."""
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "probe", "mean", "stderr", "max_positive", "tol"])
            for i, t in enumerate(self.times):
                for j, p in enumerate(self.probes):
                    w.writerow([repr(float(t)), json.dumps(_jsonable(p)), repr(float(self.mean[i, j])),
                                repr(float(self.stderr[i, j])), repr(float(self.max_positive[i, j])),
                                repr(float(self.tol))])


def _num(x):
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def provenance(state: StateEnsemble, adjoints=()) -> dict:
    p = state.ctx.provenance()
    p["backend"] = sorted({a.backend for a in adjoints}) if adjoints else []
    p["version"] = __version__
    return p


def _resolve_tol(state: StateEnsemble, tol, tol_scale):
    if tol is not None:
        return float(tol)
    return default_tol(state.ctx.dt, state.ctx.paths, tol_scale)


def _report(name, samples, state, adjoints, tol, probes, headline=None, notes=(), extras=None,
            times=None) -> ConditionReport:
    """Build a report from pathwise samples ``(M, nodes, probes)``."""
    mean, se = mean_se(samples, axis=0)
    maxpos = np.maximum(samples, 0.0).max(axis=0)
    v = verdict(mean, se, tol)
    if headline is None:
        flat = int(np.argmax(mean))
        value, value_se = float(mean.flat[flat]), float(se.flat[flat])
    else:
        value, value_se = headline
    times = state.times[:state.ctx.steps] if times is None else times
    return ConditionReport(name, v, tol, np.asarray(times), list(probes), mean, se, maxpos, value, value_se,
                           provenance(state, adjoints), list(notes), dict(extras or {}))


# ---------------------------------------------------------------------------
# shapes


def _vec(a: np.ndarray, n: int) -> np.ndarray:
    """Adjoint values as ``(..., n)`` vectors (scalar chain has no component axis)."""
    return a if a.shape[-1:] == (n,) and a.ndim >= 3 else a[..., None]


def _mat(a: np.ndarray, n: int) -> np.ndarray:
    return a if a.ndim >= 4 else a.reshape(a.shape[:2] + (n, n))


def _first_second(spec: ProblemSpec, adjoints, nodes=slice(None), ahead: bool = False):
    """``P1, Q1, P2, Q2`` as vectors/matrices on the selected nodes."""
    n = spec.state_dim
    a1, a2 = adjoints[0], adjoints[1]
    P1 = _vec((a1.P_next if ahead else a1.P)[:, nodes], n)
    Q1 = _vec(a1.Q[:, nodes], n)
    P2 = _mat((a2.P_next if ahead else a2.P)[:, nodes], n)
    Q2 = _mat(a2.Q[:, nodes], n)
    return P1, Q1, P2, Q2


def _grid(state: StateEnsemble):
    """Time, state and control on nodes ``0..N-1`` with shapes ``(1, N)``, ``(M, N, n)``, ``(M, N, m)``."""
    N = state.ctx.steps
    return state.times[None, :N], state.x[:, :N], state.u[:, :N]


def default_probes(spec: ProblemSpec, count: int = 9) -> np.ndarray:
    return spec.control_region.probe_points(count)


def _probe_list(spec, v_list):
    v = default_probes(spec) if v_list is None else np.asarray(v_list, dtype=float)
    if v.ndim == 1:
        v = v[:, None] if spec.control_dim == 1 else v[None, :]
    return v


# ---------------------------------------------------------------------------
# Hamiltonians


def hamiltonian(t, x, u, P, Q, spec: ProblemSpec) -> np.ndarray:
    """``<P, b> + <Q, sigma> - f`` with trailing component axes on ``x, u, P, Q``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return (np.sum(np.asarray(P) * spec.b(t, x, u), axis=-1) + np.sum(np.asarray(Q) * spec.sigma(t, x, u), axis=-1)
            - spec.f(t, x, u))


def curly_H(t, x, v, P1, Q1, P2, ubar_val, spec: ProblemSpec) -> np.ndarray:
    """``H(v) - H(ubar) + 1/2 <P2 (sigma(v) - sigma(ubar)), sigma(v) - sigma(ubar)>``."""
    x = np.asarray(x, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), np.broadcast_shapes(np.shape(v), np.shape(ubar_val)))
    ub = np.asarray(ubar_val, dtype=float)
    n = spec.state_dim
    P2 = np.asarray(P2, dtype=float)
    if P2.shape[-2:] != (n, n):
        P2 = P2[..., None, None] if n == 1 else P2
    ds = spec.sigma(t, x, v) - spec.sigma(t, x, ub)
    quad = np.einsum("...i,...ij,...j->...", ds, P2, ds)
    return hamiltonian(t, x, v, P1, Q1, spec) - hamiltonian(t, x, ub, P1, Q1, spec) + 0.5 * quad


def _curly_H_grid(spec, state, adjoints, v):
    t, x, u = _grid(state)
    P1, Q1, P2, _ = _first_second(spec, adjoints, slice(0, state.ctx.steps))
    vv = np.broadcast_to(np.asarray(v, dtype=float), u.shape)
    return curly_H(t, x, vv, P1, Q1, P2, u, spec)


# ---------------------------------------------------------------------------
# first-order and singularity checks


def check_maximum_principle(spec: ProblemSpec, state: StateEnsemble, adjoints, v_list=None, tol=None,
                            tol_scale: float = 5.0) -> ConditionReport:
    """``curly_H(t, xbar(t), v) <= 0`` for every probe ``v``.

    ``extras["by_probe"]`` holds the time-averaged value per probe with the
    standard error of the pathwise time average.
    """
    probes = _probe_list(spec, v_list)
    tol = _resolve_tol(state, tol, tol_scale)
    samples = np.stack([_curly_H_grid(spec, state, adjoints, v) for v in probes], axis=-1)
    by_probe = []
    for j, v in enumerate(probes):
        m, s = mean_se(samples[:, :, j].mean(axis=1))
        by_probe.append({"v": v.tolist(), "mean": float(m), "stderr": float(s)})
    return _report("maximum_principle", samples, state, adjoints, tol, probes.tolist(),
                   extras={"by_probe": by_probe})


def _H_u(spec, state, adjoints):
    t, x, u = _grid(state)
    P1, Q1, P2, _ = _first_second(spec, adjoints, slice(0, state.ctx.steps))
    b, s, f = spec.drift, spec.diffusion, (spec.running_cost,)
    bu, su = jac(b, t, x, u, "u"), jac(s, t, x, u, "u")
    Hu = np.einsum("...i,...ij->...j", P1, bu) + np.einsum("...i,...ij->...j", Q1, su) - jac(f, t, x, u, "u")[..., 0, :]
    Huu = (np.einsum("...i,...ijk->...jk", P1, hess(b, t, x, u, "u", "u"))
           + np.einsum("...i,...ijk->...jk", Q1, hess(s, t, x, u, "u", "u"))
           - hess(f, t, x, u, "u", "u")[..., 0, :, :])
    Lam = Huu + np.einsum("...ia,...ij,...jb->...ab", su, P2, su)
    return Hu, Lam


def check_classical_singular(spec: ProblemSpec, state: StateEnsemble, adjoints, tol=None,
                             tol_scale: float = 5.0) -> ConditionReport:
    """Singularity in the classical sense: ``H_u = 0`` and ``H_uu + sigma_u^T P2 sigma_u = 0``.

    Statistics are ``E|H_u|`` and ``E||Lambda||`` per node (probes ``H_u`` and
    ``Lambda``); HOLDS means singular.  ``extras`` carries the signed means.
    """
    tol = _resolve_tol(state, tol, tol_scale)
    Hu, Lam = _H_u(spec, state, adjoints)
    samples = np.stack([np.linalg.norm(Hu, axis=-1), np.linalg.norm(Lam, axis=(-2, -1))], axis=-1)
    lam_mean = Lam.mean(axis=(0, 1))
    extras = {
        "max_abs_H_u": float(np.abs(Hu).max(initial=0.0)),
        "max_abs_Lambda": float(np.abs(Lam).max(initial=0.0)),
        "Lambda_mean": lam_mean.tolist(),
        "H_u_mean": Hu.mean(axis=(0, 1)).tolist(),
    }
    rep = _report("classical_singular", samples, state, adjoints, tol, ["H_u", "Lambda"], extras=extras)
    rep.extras["singular"] = rep.verdict == HOLDS
    return rep


def check_pontryagin_singular(spec: ProblemSpec, state: StateEnsemble, adjoints, V=None, tol=None,
                              tol_scale: float = 5.0) -> ConditionReport:
    """Singularity in the Pontryagin sense on ``V``: ``curly_H(t, xbar, v) = 0`` for ``v`` in ``V``."""
    probes = _probe_list(spec, V)
    tol = _resolve_tol(state, tol, tol_scale)
    samples = np.stack([np.abs(_curly_H_grid(spec, state, adjoints, v)) for v in probes], axis=-1)
    rep = _report("pontryagin_singular", samples, state, adjoints, tol, probes.tolist())
    rep.extras["singular"] = rep.verdict == HOLDS
    return rep


# ---------------------------------------------------------------------------
# convex second-order conditions


def S_process(spec: ProblemSpec, state: StateEnsemble, adjoints) -> np.ndarray:
    """``H_xu + b_u^T P2 + sigma_u^T Q2 + sigma_u^T P2 sigma_x`` on all nodes, ``(M, N+1, m, n)``."""
    t, x, u = state.times[None, :], state.x, state.u
    P1, Q1, P2, Q2 = _first_second(spec, adjoints)
    b, s, f = spec.drift, spec.diffusion, (spec.running_cost,)
    Hux = (np.einsum("...l,...lij->...ij", P1, hess(b, t, x, u, "u", "x"))
           + np.einsum("...l,...lij->...ij", Q1, hess(s, t, x, u, "u", "x"))
           - hess(f, t, x, u, "u", "x")[..., 0, :, :])
    bu, su, sx = jac(b, t, x, u, "u"), jac(s, t, x, u, "u"), jac(s, t, x, u, "x")
    suT = np.swapaxes(su, -1, -2)
    return Hux + np.swapaxes(bu, -1, -2) @ P2 + suT @ Q2 + suT @ P2 @ sx


def _singular_note(spec, state, adjoints, tol):
    rep = check_classical_singular(spec, state, adjoints, tol=tol)
    ok = rep.verdict == HOLDS
    note = [] if ok else [f"precondition not met: candidate is not singular in the classical sense "
                          f"(classical_singular verdict {rep.verdict})"]
    return ok, note


def check_integral_condition(spec: ProblemSpec, state: StateEnsemble, adjoints,
                             perturbation: PerturbationSpec | None = None, ctx: SimulationContext | None = None,
                             tol=None, tol_scale: float = 5.0, S: np.ndarray | None = None,
                             v_list=None) -> ConditionReport:
    """``E int_0^T <S(t) y1(t), v(t)> dt <= 0`` as a left-point sum over the grid.

    Without ``perturbation`` every probe ``w`` in ``v_list`` defines the
    direction ``v(t) = w - ubar(t)`` on the whole horizon.
    """
    tol = _resolve_tol(state, tol, tol_scale)
    if perturbation is not None:
        perts, probes = [perturbation], ["integral"]
    else:
        vs = _probe_list(spec, v_list)
        perts = [PerturbationSpec.spike_direction(w, 0.0, spec.horizon) for w in vs]
        probes = vs.tolist()
    S = S_process(spec, state, adjoints) if S is None else S
    N, dt = state.ctx.steps, state.ctx.dt
    totals = []
    for pert in perts:
        bundle = simulate_variational_convex(spec, state, pert, ctx)
        y1, v = bundle.y["y1"][:, :N], bundle.direction[:, :N]
        integrand = np.einsum("pkij,pkj,pki->pk", S[:, :N], y1, v)
        totals.append(integrand.sum(axis=1) * dt)
    totals = np.stack(totals, axis=-1)
    ok, notes = _singular_note(spec, state, adjoints, tol)
    m, s = mean_se(totals)
    j = int(np.argmax(m))
    rep = _report("integral_condition", totals[:, None, :], state, adjoints, tol, probes,
                  headline=(float(m[j]), float(s[j])), notes=notes, times=state.times[:1])
    rep.extras["precondition_singular"] = ok
    return rep


def _sigma_u_vanishes(spec, state) -> bool:
    t, x, u = _grid(state)
    return bool(np.abs(jac(spec.diffusion, t, x, u, "u")).max(initial=0.0) == 0.0)


def check_pointwise_convex(spec: ProblemSpec, state: StateEnsemble, adjoints, nabla_S=None, nabla_u=None,
                           v_list=None, tol=None, tol_scale: float = 5.0, nabla_S_closed_form=None,
                           thetas=None) -> ConditionReport:
    """Pointwise convex condition at every node (or at the nodes nearest ``thetas``).

    ``<S b_u w, w> + <nabla S sigma_u w, w> - <S sigma_u w, nabla ubar> <= 0``
    with ``w = v - ubar``.  When ``sigma_u`` vanishes along the trajectory the
    two Malliavin terms drop out.  Otherwise ``nabla S`` and ``nabla ubar`` are
    taken from the arguments, derived where that is possible, and the verdict
    is INCONCLUSIVE when either is unavailable.
    """
    probes = _probe_list(spec, v_list)
    tol = _resolve_tol(state, tol, tol_scale)
    S = S_process(spec, state, adjoints)
    ok, notes = _singular_note(spec, state, adjoints, tol)
    N = state.ctx.steps
    nodes = np.arange(N) if thetas is None else np.unique(np.clip(np.rint(np.asarray(thetas) / state.ctx.dt), 0, N - 1).astype(int))
    t, x, u = state.times[None, nodes], state.x[:, nodes], state.u[:, nodes]
    Sk = S[:, nodes]
    bu, su = jac(spec.drift, t, x, u, "u"), jac(spec.diffusion, t, x, u, "u")
    drop = _sigma_u_vanishes(spec, state)
    gS = gu = None
    if not drop:
        try:
            gS = (nabla_S.values if nabla_S is not None else
                  _nabla_S(S, adjoints, state, closed_form=nabla_S_closed_form).values)[:, nodes]
            gu = (nabla_u.values if nabla_u is not None else _nabla_ubar(state.control, state, spec).values)[:, nodes]
        except Unavailable as exc:
            notes = notes + [f"Malliavin term unavailable: {exc}"]
    samples = []
    for v in probes:
        w = v - u
        term = np.einsum("pkij,pkjl,pkl,pki->pk", Sk, bu, w, w)
        if not drop and gS is not None:
            term = term + np.einsum("pkij,pkjl,pkl,pki->pk", gS, su, w, w)
            term = term - np.einsum("pkij,pkjl,pkl,pki->pk", Sk, su, w, gu)
        samples.append(term)
    samples = np.stack(samples, axis=-1)
    rep = _report("pointwise_convex", samples, state, adjoints, tol, probes.tolist(), notes=notes,
                  times=state.times[nodes])
    if not drop and gS is None:
        rep.verdict = INCONCLUSIVE
    rep.extras.update({"precondition_singular": ok, "malliavin_terms": "dropped" if drop else
                       ("unavailable" if gS is None else "included")})
    return rep


@dataclass
class ThetaProbe:
    """Cross-term estimates per ``theta`` and their log-log slopes.

    ``rms_slope`` (L2 size of the term) is expected near 3/2; ``mean_slope``
    (its expectation) near 2 when ``S`` has a near-diagonal Malliavin limit.
    """

    thetas: np.ndarray
    samples: list
    mean: np.ndarray
    mean_stderr: np.ndarray
    rms: np.ndarray
    rms_stderr: np.ndarray
    rms_slope: float
    rms_slope_stderr: float
    mean_slope: float
    mean_slope_stderr: float

    def to_dict(self) -> dict:
        return _jsonable({"theta": self.thetas, "mean": self.mean, "mean_stderr": self.mean_stderr,
                          "rms": self.rms, "rms_stderr": self.rms_stderr, "slope": self.rms_slope,
                          "slope_stderr": self.rms_slope_stderr, "mean_slope": self.mean_slope,
                          "mean_slope_stderr": self.mean_slope_stderr})


def _theta_window(t_bar: float, theta: float, dt: float) -> tuple[int, int]:
    return int(np.floor(t_bar / dt + 0.5)), int(np.floor((t_bar + theta) / dt + 0.5))


def effective_thetas(t_bar: float, theta_list, dt: float) -> np.ndarray:
    """Window lengths after snapping ``[t_bar, t_bar + theta)`` to the grid."""
    return np.array([np.subtract(*_theta_window(t_bar, th, dt)[::-1]) * dt for th in theta_list])


def theta_cross_term(spec: ProblemSpec, state: StateEnsemble, transition: TransitionEnsemble, S: np.ndarray,
                     t_bar: float, v, theta: float) -> np.ndarray:
    """Pathwise ``int_tbar^{tbar+theta} <S Phi int_tbar^t Phi^-1 sigma_u (v - ubar) dW, v - ubar> dt``."""
    ctx = state.ctx
    dt, dW, N = ctx.dt, ctx.dW, ctx.steps
    k0, k1 = _theta_window(t_bar, theta, dt)
    if k1 > N:
        raise ValueError("t_bar + theta exceeds the horizon")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    M, n = state.x.shape[0], spec.state_dim
    I = np.zeros((M, n))
    total = np.zeros(M)
    for k in range(k0, k1):
        t, xk, uk = state.at(k)
        w = v - uk
        total += np.einsum("pij,pjl,pl,pi->p", S[:, k], transition.phi[:, k], I, w) * dt
        su = jac(spec.diffusion, t, xk, uk, "u")
        I = I + np.einsum("pij,pj->pi", transition.phi_inv[:, k], np.einsum("pij,pj->pi", su, w)) * dW[:, k, None]
    return total


def fit_theta_probe(thetas, samples) -> ThetaProbe:
    """Slopes from pathwise samples (one array per ``theta``)."""
    thetas = np.asarray(thetas, dtype=float)
    if len(thetas) < 2:
        raise InsufficientPoints("the theta-scaling fit needs at least two theta values")
    mean, mse, rms, rse = [], [], [], []
    for smp in samples:
        m, s = mean_se(smp)
        m2, s2 = mean_se(smp ** 2)
        mean.append(m)
        mse.append(s)
        r = np.sqrt(m2)
        rms.append(r)
        rse.append(0.5 * s2 / r if r > 0 else 0.0)
    mean, mse, rms, rse = map(np.array, (mean, mse, rms, rse))
    scale = max(float(np.max(rms)), 1e-300)
    if np.all(rms <= 1e-12 * max(1.0, scale)) or np.any(rms == 0):
        raise DegenerateProbe("cross term vanishes within numerical noise for every theta")
    rfit = fit_loglog(thetas, rms, rse)
    if np.all(np.abs(mean) > 0):
        mfit = fit_loglog(thetas, np.abs(mean), mse)
    else:
        mfit = {"slope": float("nan"), "slope_stderr": float("nan")}
    return ThetaProbe(thetas, list(samples), mean, mse, rms, rse, rfit["slope"], rfit["slope_stderr"],
                      mfit["slope"], mfit["slope_stderr"])


def theta_scaling_probe(spec: ProblemSpec, state: StateEnsemble, adjoints, transition: TransitionEnsemble,
                        t_bar: float, v, theta_list, ctx: SimulationContext | None = None) -> ThetaProbe:
    """Size of the cross term as ``theta`` shrinks and its fitted power law (on grid-snapped widths)."""
    if len(theta_list) < 2:
        raise InsufficientPoints("the theta-scaling fit needs at least two theta values")
    k0 = int(np.floor(t_bar / state.ctx.dt + 0.5))
    kmax = int(np.floor((t_bar + max(theta_list)) / state.ctx.dt + 0.5))
    t, x, u = state.times[None, k0:kmax], state.x[:, k0:kmax], state.u[:, k0:kmax]
    if np.abs(jac(spec.diffusion, t, x, u, "u")).max(initial=0.0) == 0.0:
        raise DegenerateProbe("sigma_u vanishes on the probe window; the cross term is identically zero")
    S = S_process(spec, state, adjoints)
    samples = [theta_cross_term(spec, state, transition, S, t_bar, v, th) for th in theta_list]
    return fit_theta_probe(effective_thetas(t_bar, theta_list, state.ctx.dt), samples)


# ---------------------------------------------------------------------------
# needle (one-dimensional) functionals


def _chain_values(chain, nodes, ahead=False):
    p = [(a.P_next if ahead else a.P)[:, nodes] for a in chain]
    q = [a.Q[:, nodes] for a in chain]
    return p, q


def nonconvex_functionals(spec: ProblemSpec, t, x, ubar, v, p, q) -> dict:
    """``curly_H``, the two S- and T-differences, ``SS`` and ``TT`` for scalar problems.

    ``p``/``q`` are the four adjoint values (broadcastable arrays).  Keys:
    ``H, S_diff, T_diff, SS, TT`` plus ``H_x``, ``SS_x``.
    """
    p1, p2, p3, p4 = p
    q1, q2, q3, q4 = q
    d = delta_coefficients(spec, t, x, ubar, v)
    xa = np.asarray(x, dtype=float)[..., None]
    ub = np.asarray(ubar, dtype=float)[..., None]
    s = spec.diffusion[0]
    sb1 = s.derivative((1, 0)).evaluate(t, xa, ub)
    sb2 = s.derivative((2, 0)).evaluate(t, xa, ub)
    f = spec.running_cost
    vv = np.asarray(v, dtype=float)[..., None]
    df2 = f.derivative((2, 0)).evaluate(t, xa, vv) - f.derivative((2, 0)).evaluate(t, xa, ub)
    db2 = d["db_xx"]
    ds, ds1, ds2 = d["dsigma"], d["dsigma_x"], d["dsigma_xx"]
    db, db1 = d["db"], d["db_x"]
    H = p1 * db + q1 * ds - d["df"] + 0.5 * p2 * ds ** 2
    H_x = p1 * db1 + q1 * ds1 - d["df_x"] + p2 * ds * ds1
    H_xx = p1 * db2 + q1 * ds2 - df2 + p2 * (ds1 ** 2 + ds * ds2)
    S_diff = p2 * db + q2 * ds
    S_x_diff = p2 * db1 + q2 * ds1
    T_diff = p3 * db + q3 * ds
    SS = H_x + S_diff + p2 * sb1 * ds + 0.5 * p3 * ds ** 2
    SS_x = H_xx + S_x_diff + p2 * (sb2 * ds + sb1 * ds1) + p3 * ds * ds1
    TT = (SS_x + S_x_diff + T_diff + p2 * sb1 * ds1 + p3 * ds * ds1 + 2 * p3 * sb1 * ds
          + 0.5 * p4 * ds ** 2)
    return {"H": H, "H_x": H_x, "S_diff": S_diff, "S_x_diff": S_x_diff, "T_diff": T_diff, "SS": SS,
            "SS_x": SS_x, "TT": TT}


def functionals_along(spec: ProblemSpec, state: StateEnsemble, chain, v: float, nodes=None,
                      ahead: bool = False) -> dict:
    """:func:`nonconvex_functionals` on ``(M, len(nodes))`` along the candidate trajectory."""
    nodes = np.arange(state.ctx.steps) if nodes is None else np.asarray(nodes)
    p, q = _chain_values(chain, nodes, ahead)
    x = state.x[:, nodes, 0]
    u = state.u[:, nodes, 0]
    return nonconvex_functionals(spec, state.times[None, nodes], x, u, np.full_like(u, float(v)), p, q)


def _check_needle(spec):
    if spec.state_dim != 1 or spec.control_dim != 1:
        raise ValueError("needle-mode conditions are one-dimensional (n = m = 1)")


def _nabla_SS(SS: np.ndarray, chain, closed_form, state, v):
    """Near-diagonal Malliavin derivative of ``SS(., xbar, v)`` on ``(M, N)`` or ``None``."""
    if closed_form is not None:
        N = state.ctx.steps
        return np.stack([np.broadcast_to(closed_form(state.times[k], state.x[:, k, 0], v), (state.x.shape[0],))
                         for k in range(N)], axis=1)
    scale = 1.0 + np.abs(SS).max(initial=0.0)
    if all(a.backend == "analytic" for a in chain) and np.abs(SS - SS[:1]).max(initial=0.0) <= 1e-12 * scale:
        return np.zeros_like(SS)
    return None


def check_pointwise_nonconvex(spec: ProblemSpec, state: StateEnsemble, chain, nabla_SS=None, V=None, tol=None,
                              tol_scale: float = 5.0) -> ConditionReport:
    """Pointwise needle condition ``SS db + nabla SS dsigma + 1/2 TT dsigma <= 0`` on ``V``.

    The verdict uses the single ``dsigma`` factor in the last term;
    ``extras["squared_variant"]`` repeats the check with ``dsigma^2`` there.
    ``nabla_SS(t, x, v)`` is an optional closed form; without it the term is
    zero by determinism, dropped when ``dsigma`` vanishes, or unavailable.
    """
    _check_needle(spec)
    probes = _probe_list(spec, V)
    tol = _resolve_tol(state, tol, tol_scale)
    pre = check_pontryagin_singular(spec, state, chain, probes, tol=tol)
    notes = [] if pre.verdict == HOLDS else [
        f"precondition not met: not singular in the Pontryagin sense on V (verdict {pre.verdict})"]
    N = state.ctx.steps
    xs, us = state.x[:, :N, 0], state.u[:, :N, 0]
    printed, squared = [], []
    unavailable = False
    for v in probes[:, 0]:
        F = functionals_along(spec, state, chain, v)
        d = delta_coefficients(spec, state.times[None, :N], xs, us, np.full_like(us, v))
        ds = d["dsigma"]
        db = d["db"]
        SS, TT = F["SS"], F["TT"]
        if np.all(ds == 0):
            grad_term = np.zeros_like(SS)
        else:
            g = _nabla_SS(SS, chain, nabla_SS, state, v)
            if g is None:
                unavailable = True
                g = np.zeros_like(SS)
            grad_term = g * ds
        printed.append(SS * db + grad_term + 0.5 * TT * ds)
        squared.append(SS * db + grad_term + 0.5 * TT * ds ** 2)
    printed = np.stack(printed, axis=-1)
    squared = np.stack(squared, axis=-1)
    rep = _report("pointwise_nonconvex", printed, state, chain, tol, probes.tolist(), notes=notes)
    m2, s2 = mean_se(squared, axis=0)
    rep.extras["squared_variant"] = {"verdict": verdict(m2, s2, tol), "max_mean": float(m2.max(initial=-np.inf))}
    rep.extras["precondition_singular"] = pre.verdict == HOLDS
    if rep.extras["squared_variant"]["verdict"] != rep.verdict:
        rep.notes.append("the single-factor and squared sigma-difference forms of the last term disagree: "
                         f"{rep.verdict} vs {rep.extras['squared_variant']['verdict']}")
    if unavailable:
        rep.verdict = INCONCLUSIVE
        rep.notes.append("Malliavin derivative of SS is unavailable for a random SS without a closed form")
    return rep


def check_corollary_degenerate(spec: ProblemSpec, state: StateEnsemble, chain, V=None, tol=None,
                               tol_scale: float = 5.0) -> ConditionReport:
    """``TT dsigma^2 <= 0`` on ``V``, provided ``SS = 0`` there (else INCONCLUSIVE)."""
    _check_needle(spec)
    probes = _probe_list(spec, V)
    tol = _resolve_tol(state, tol, tol_scale)
    N = state.ctx.steps
    xs, us = state.x[:, :N, 0], state.u[:, :N, 0]
    vals, ss_abs = [], []
    for v in probes[:, 0]:
        F = functionals_along(spec, state, chain, v)
        ds = delta_coefficients(spec, state.times[None, :N], xs, us, np.full_like(us, v))["dsigma"]
        vals.append(F["TT"] * ds ** 2)
        ss_abs.append(np.abs(F["SS"]))
    vals = np.stack(vals, axis=-1)
    ss_abs = np.stack(ss_abs, axis=-1)
    m, s = mean_se(ss_abs, axis=0)
    ss_zero = verdict(m, s, tol) == HOLDS
    rep = _report("corollary_degenerate", vals, state, chain, tol, probes.tolist())
    rep.extras["SS_zero"] = ss_zero
    rep.extras["max_mean_abs_SS"] = float(m.max(initial=0.0))
    if not ss_zero:
        rep.verdict = INCONCLUSIVE
        rep.notes.append("precondition not met: SS does not vanish on V")
    return rep


# ---------------------------------------------------------------------------
# variational equality for spike variations


@dataclass
class VariationalEqualityReport:
    """Brute-force cost change versus the second-order expansion for each spike width."""

    eps: np.ndarray
    eps_effective: np.ndarray
    lhs: np.ndarray
    lhs_stderr: np.ndarray
    rhs: np.ndarray
    rhs_stderr: np.ndarray
    remainder: np.ndarray
    remainder_stderr: np.ndarray
    exponent: float
    exponent_stderr: float
    verdict: str
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def lhs_ratio(self) -> np.ndarray:
        return self.lhs / self.eps_effective ** 2

    @property
    def rhs_ratio(self) -> np.ndarray:
        return self.rhs / self.eps_effective ** 2

    def to_dict(self) -> dict:
        return _jsonable({"schema": REPORT_SCHEMA, "condition": "variational_equality", "verdict": self.verdict, "tol": 2.0,
                          "eps": self.eps, "eps_effective": self.eps_effective, "lhs": self.lhs,
                          "lhs_stderr": self.lhs_stderr, "rhs": self.rhs, "rhs_stderr": self.rhs_stderr,
                          "lhs_over_eps2": self.lhs_ratio, "rhs_over_eps2": self.rhs_ratio,
                          "remainder": self.remainder, "remainder_stderr": self.remainder_stderr,
                          "exponent": self.exponent, "exponent_stderr": self.exponent_stderr,
                          "provenance": self.provenance, "notes": self.notes})


def expansion_rhs(spec: ProblemSpec, state: StateEnsemble, chain, perturbation: PerturbationSpec) -> np.ndarray:
    """Pathwise second-order expansion of ``J(u_eps) - J(ubar)``.

    ``-sum_{k in E} [H + SS (y1 + y2)^trap + 1/2 TT (y1^2)^trap] dt`` with the
    functionals at ``(xbar_k, ubar_k)``, adjoints at ``(E[p_{k+1}|F_k], q_k)``
    and trapezoidal averages of the variations over each step; this pairing
    reproduces the discrete Ito product rule behind the expansion.
    """
    bundle = simulate_variational_needle(spec, state, perturbation)
    mask = bundle.mask
    nodes = np.flatnonzero(mask)
    M = state.x.shape[0]
    if len(nodes) == 0:
        return np.zeros(M)
    v = float(perturbation.spike_value[0])
    F = functionals_along(spec, state, chain, v, nodes, ahead=True)
    y1, y2 = bundle.y["y1"], bundle.y["y2"]
    s12 = 0.5 * ((y1 + y2)[:, nodes] + (y1 + y2)[:, nodes + 1])
    sq1 = 0.5 * (y1[:, nodes] ** 2 + y1[:, nodes + 1] ** 2)
    integrand = F["H"] + F["SS"] * s12 + 0.5 * F["TT"] * sq1
    return -integrand.sum(axis=1) * state.ctx.dt


def check_variational_equality(spec: ProblemSpec, control: ControlLaw, t_bar: float, eps_list, v,
                               ctx: SimulationContext, backend: str = "auto") -> VariationalEqualityReport:
    """Spike study: ``J(u_eps) - J(ubar)`` against the expansion for each ``eps``.

    The remainder exponent is the log-log slope of ``|lhs - rhs|`` against the
    effective (grid-snapped) width, fitted on the widths whose remainder exceeds
    two standard errors.  A remainder at rounding level for every width is
    reported as exponent ``inf``.  The verdict is HOLDS when the exponent
    exceeds 2 by two standard errors, VIOLATED when it falls short of 2 by two
    standard errors, and INCONCLUSIVE otherwise or when fewer than two widths
    resolve the remainder.
    """
    from .adjoint import solve_adjoint_scalar_chain
    from .scenarios import brute_force_cost_delta

    _check_needle(spec)
    state = simulate_state(spec, control, ctx)
    chain = solve_adjoint_scalar_chain(spec, state, backend)
    eps_list = np.asarray(eps_list, dtype=float)
    rows = []
    for eps in eps_list:
        pert = PerturbationSpec.needle(v, t_bar, eps)
        eff = pert.effective_measure(ctx.times)
        dj = brute_force_cost_delta(spec, control, pert, ctx, state=state)
        rhs = expansion_rhs(spec, state, chain, pert)
        lm, ls = dj.mean, dj.stderr
        rm, rs = mean_se(rhs)
        dm, ds = mean_se(dj.samples - rhs)
        rows.append((eff, lm, ls, float(rm), float(rs), abs(float(dm)), float(ds), float(np.abs(dj.samples).max())))
    eff, lhs, lse, rhs, rse, rem, remse, scale = map(np.array, zip(*rows))
    notes = []
    rounding = rem <= 1e-12 * np.maximum(1.0, scale)
    resolved = ~rounding & (rem > 2 * remse)
    if np.all(rounding):
        exponent, exp_se = float("inf"), 0.0
        notes.append("remainder is at rounding level for every width")
    elif resolved.sum() < 2:
        fit = fit_loglog(eff, np.maximum(rem, 1e-300))
        exponent, exp_se = fit["slope"], float("nan")
        notes.append("remainder is within two standard errors of zero for all but at most one width; "
                     "the exponent is not resolved by this ensemble")
    else:
        se = remse[resolved] if np.all(remse[resolved] > 0) else None
        fit = fit_loglog(eff[resolved], rem[resolved], se)
        exponent, exp_se = fit["slope"], fit["slope_stderr"]
        if resolved.sum() < len(eff):
            notes.append(f"exponent fitted on the {int(resolved.sum())} widths with a resolved remainder")
    if np.isnan(exp_se):
        vd = INCONCLUSIVE
    elif np.isinf(exponent) or exponent - 2 * exp_se > 2:
        vd = HOLDS
    elif exponent + 2 * exp_se < 2:
        vd = VIOLATED
    else:
        vd = INCONCLUSIVE
    prov = provenance(state, chain)
    return VariationalEqualityReport(eps_list, eff, lhs, lse, rhs, rse, rem, remse, exponent, exp_se, vd,
                                     prov, notes)


CONDITIONS = ("maximum_principle", "classical_singular", "pontryagin_singular", "integral_condition",
              "pointwise_convex", "pointwise_nonconvex", "corollary_degenerate", "variational_equality",
              "theta_scaling")

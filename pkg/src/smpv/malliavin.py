"""Malliavin derivatives through the tangent process, near-diagonal limits and Clark-Ocone checks.

For an Euler-discretized state the derivative with respect to the noise at
time ``s`` is ``D_s x(t) = Phi(t) Phi(s)^-1 sigma(s, x(s), u(s))`` for ``t >= s``
and zero before.  Derivatives of non-state processes are either supplied in
closed form, identically zero by determinism, or reported unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientGridResolution, Unavailable
from .polynomial import evaluate_all
from .problem import ControlLaw, ProblemSpec, jac
from .regression import RegressionBasis, regress_conditional
from .sde import SimulationContext, StateEnsemble, TransitionEnsemble

METHODS = ("tangent", "supplied", "zero")


@dataclass
class MalliavinSlice:
    """``D_s phi(t)`` for selected ``s`` and ``t`` nodes.

    ``D`` has shape ``(len(s_indices), M, len(t_indices), ...)`` and is zero
    wherever ``t < s``.
    """

    name: str
    s_indices: np.ndarray
    t_indices: np.ndarray
    D: np.ndarray
    method: str = "tangent"

    def __post_init__(self):
        self.s_indices = np.asarray(self.s_indices, dtype=int)
        self.t_indices = np.asarray(self.t_indices, dtype=int)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        below = self.t_indices[None, :] < self.s_indices[:, None]
        below = below.reshape(below.shape[0], 1, below.shape[1], *([1] * (self.D.ndim - 3)))
        self.D = np.where(below, 0.0, self.D)

    def row(self, s_index: int) -> np.ndarray:
        return self.D[int(np.flatnonzero(self.s_indices == s_index)[0])]

    def chain(self, name: str, grad: np.ndarray) -> "MalliavinSlice":
        """Slice of ``g(x)`` from a slice of ``x``; ``grad`` is ``dg/dx`` on ``(M, len(t_indices), n)``."""
        D = self.D if self.D.ndim == 4 else self.D[..., None]
        out = np.einsum("smtn,mtn->smt", D, grad)
        return MalliavinSlice(name, self.s_indices, self.t_indices, out, self.method)


@dataclass
class NablaProcess:
    """Near-diagonal limit ``nabla phi(s)`` on ``(M, len(s_indices), ...)`` with ``f_eps`` diagnostics."""

    values: np.ndarray
    s_indices: np.ndarray
    method: str
    f_eps: dict = field(default_factory=dict)

    @property
    def is_zero(self) -> bool:
        return self.method == "zero"


def tangent_state_derivative(state: StateEnsemble, transition: TransitionEnsemble, spec: ProblemSpec,
                             s_index: int) -> np.ndarray:
    """``D_s x(t)`` for all nodes ``t`` as an ``(M, N+1, n)`` array (zero for ``t < s``)."""
    N = state.ctx.steps
    k = int(s_index)
    if not 0 <= k <= N:
        raise ValueError(f"s_index {k} outside 0..{N}")
    t, xs, us = state.at(k)
    sig = spec.sigma(t, xs, us)
    base = np.einsum("mij,mj->mi", transition.phi_inv[:, k], sig)
    out = np.zeros(state.x.shape)
    out[:, k:] = np.einsum("mtij,mj->mti", transition.phi[:, k:], base)
    return out


def state_slice(state: StateEnsemble, transition: TransitionEnsemble, spec: ProblemSpec, s_indices,
                t_indices=None) -> MalliavinSlice:
    """Tangent-process slice of the state over the given ``(s, t)`` nodes."""
    s_indices = np.atleast_1d(np.asarray(s_indices, dtype=int))
    t_indices = np.arange(state.ctx.steps + 1) if t_indices is None else np.atleast_1d(np.asarray(t_indices, dtype=int))
    rows = [tangent_state_derivative(state, transition, spec, s)[:, t_indices] for s in s_indices]
    return MalliavinSlice("x", s_indices, t_indices, np.stack(rows), "tangent")


def brownian_slice(ctx: SimulationContext, s_indices, t_indices=None) -> MalliavinSlice:
    """``D_s W(t) = 1`` for ``t >= s``."""
    s_indices = np.atleast_1d(np.asarray(s_indices, dtype=int))
    t_indices = np.arange(ctx.steps + 1) if t_indices is None else np.atleast_1d(np.asarray(t_indices, dtype=int))
    D = np.ones((len(s_indices), ctx.paths, len(t_indices)))
    return MalliavinSlice("W", s_indices, t_indices, D, "supplied")


def default_window(ctx: SimulationContext) -> float:
    return max(2 * ctx.dt, ctx.horizon / 64)


def nabla_estimate(slc: MalliavinSlice, ctx: SimulationContext, eps_min: float | None = None,
                   eps_list=None) -> NablaProcess:
    """``nabla phi(s)`` as the mean of ``D_s phi(t)`` over ``t`` in ``(s, s + eps_min]``.

    ``f_eps`` maps each ``eps`` (default ``{4, 8, 16} dt``) to an estimate of
    ``int_0^T sup_{s<t<s+eps} E|D_s phi(t) - nabla phi(s)|^2 ds`` over the
    slice's ``s`` nodes.  The slice must contain every ``t`` node it averages.
    """
    dt = ctx.dt
    eps_min = default_window(ctx) if eps_min is None else float(eps_min)
    if eps_min < 2 * dt - 1e-12:
        raise InsufficientGridResolution(f"window {eps_min:g} is shorter than two steps ({2 * dt:g})",
                                         eps_min=eps_min, dt=dt)
    eps_list = [4 * dt, 8 * dt, 16 * dt] if eps_list is None else list(eps_list)
    width = int(round(eps_min / dt))
    t_pos = {int(t): j for j, t in enumerate(slc.t_indices)}
    N = ctx.steps
    trailing = slc.D.shape[3:]
    values = np.empty((slc.D.shape[1], len(slc.s_indices)) + trailing)
    for i, s in enumerate(slc.s_indices):
        ts = [t for t in range(s + 1, min(s + width, N) + 1)] or [min(s, N)]
        missing = [t for t in ts if t not in t_pos]
        if missing:
            raise ValueError(f"slice lacks t nodes {missing[:3]} needed for s={s}")
        values[:, i] = slc.D[i][:, [t_pos[t] for t in ts]].mean(axis=1)
    table = {}
    for eps in eps_list:
        w = max(1, int(round(eps / dt)))
        worst = []
        for i, s in enumerate(slc.s_indices):
            ts = [t for t in range(s + 1, min(s + w, N) + 1) if t in t_pos]
            if not ts:
                continue
            dev = slc.D[i][:, [t_pos[t] for t in ts]] - values[:, i][:, None]
            sq = dev.reshape(dev.shape[0], dev.shape[1], -1) ** 2
            worst.append(sq.sum(axis=-1).mean(axis=0).max())
        table[float(eps)] = float(np.mean(worst) * ctx.horizon) if worst else 0.0
    return NablaProcess(values, slc.s_indices.copy(), slc.method, table)


def _all_nodes(state: StateEnsemble) -> np.ndarray:
    return np.arange(state.ctx.steps + 1)


def nabla_ubar(control: ControlLaw, state: StateEnsemble, spec: ProblemSpec,
               transition: TransitionEnsemble | None = None) -> NablaProcess:
    """``nabla ubar`` on every node, shape ``(M, N+1, m)``.

    Feedback law ``k(t, x)``: chain rule with the tangent identity at ``t = s``,
    ``nabla ubar(s) = k_x(s, x(s)) sigma(s, x(s), u(s))``, set to zero where
    the clamp to the control region is active.
    """
    M, Np1, m = state.u.shape
    nodes = _all_nodes(state)
    nab = control.nabla
    if isinstance(nab, tuple):
        vals = np.stack([evaluate_all(nab, t, state.x[:, k], None) for k, t in enumerate(state.times)], axis=1)
        return NablaProcess(vals, nodes, "supplied")
    if nab == "zero" or (control.kind == "feedback" and control.is_deterministic):
        return NablaProcess(np.zeros((M, Np1, m)), nodes, "zero")
    if control.kind != "feedback" or nab == "unavailable":
        raise Unavailable("no Malliavin derivative supplied for this open-loop control")
    region = spec.control_region
    vals = np.zeros((M, Np1, m))
    for k, t in enumerate(state.times):
        xk, uk = state.x[:, k], state.u[:, k]
        raw = np.stack([np.broadcast_to(p.evaluate(t, xk, None), (M,)) for p in control.polys], axis=-1)
        free = np.isclose(raw, region.project(raw), rtol=0, atol=1e-12)
        kx = jac(control.polys, t, xk, None, "x")
        sig = spec.sigma(t, xk, uk)
        vals[:, k] = np.einsum("pij,pj->pi", kx, sig) * free
    return NablaProcess(vals, nodes, "tangent")


def nabla_S(S: np.ndarray, adjoints, state: StateEnsemble, closed_form=None) -> NablaProcess:
    """``nabla S`` on every node: supplied closed form, zero by determinism, or unavailable.

    ``closed_form(t, x)`` returns ``(M, m, n)`` for a state slice ``x`` ``(M, n)``.
    Zero is returned only when every adjoint came from the analytic backend and
    ``S`` itself is identical across paths.
    """
    nodes = _all_nodes(state)
    if closed_form is not None:
        vals = np.stack([closed_form(t, state.x[:, k]) for k, t in enumerate(state.times)], axis=1)
        return NablaProcess(np.broadcast_to(vals, S.shape).copy(), nodes, "supplied")
    analytic = all(a.backend == "analytic" for a in adjoints)
    scale = 1.0 + np.abs(S).max(initial=0.0)
    same = np.abs(S - S[:1]).max(initial=0.0) <= 1e-12 * scale
    if analytic and same:
        return NablaProcess(np.zeros(S.shape), nodes, "zero")
    raise Unavailable("S is random and no closed-form Malliavin derivative was supplied")


@dataclass
class ClarkOconeResult:
    """Reconstruction error ``phi - (E phi + sum E[D_s phi | F_s] dW_s)``.

    ``mse`` is the path-average squared error; ``mean_error`` its sample mean,
    which is pure Monte Carlo error of order ``M^-1/2``.
    """

    mse: float
    mse_stderr: float
    mean_error: float
    mean_error_stderr: float
    t_index: int


def clark_ocone_residual(phi: np.ndarray, slc: MalliavinSlice, ctx: SimulationContext,
                         regressors: np.ndarray | None = None, basis: RegressionBasis | None = None,
                         t_index: int | None = None) -> ClarkOconeResult:
    """Clark-Ocone reconstruction check for the path values ``phi`` ``(M,)`` of ``phi(t)``.

    The slice must cover every ``s`` node below ``t_index``; conditional
    expectations given ``F_s`` are regressions on ``regressors[:, s]``
    (``(M, N+1, d)``, the Brownian path by default).
    """
    N = ctx.steps
    t_index = N if t_index is None else int(t_index)
    phi = np.asarray(phi, dtype=float)
    M = phi.shape[0]
    regressors = ctx.W[:, :, None] if regressors is None else np.asarray(regressors)
    if regressors.ndim == 2:
        regressors = regressors[:, :, None]
    basis = RegressionBasis() if basis is None else basis
    t_col = int(np.flatnonzero(slc.t_indices == t_index)[0])
    s_pos = {int(s): i for i, s in enumerate(slc.s_indices)}
    missing = [s for s in range(t_index) if s not in s_pos]
    if missing:
        raise ValueError(f"slice lacks s nodes {missing[:3]}")
    dW = ctx.dW
    integral = np.zeros(M)
    for s in range(t_index):
        d = slc.D[s_pos[s]][:, t_col]
        cond = regress_conditional(d, regressors[:, s], basis)
        integral += cond * dW[:, s]
    err = phi - phi.mean() - integral
    sq = err ** 2
    se = lambda a: float(a.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    # the sample mean of phi is shared by all paths, so the mean error is -mean(integral)
    return ClarkOconeResult(float(sq.mean()), se(sq), float(err.mean()), se(integral), t_index)

"""Euler-Maruyama simulation of the state, the transition matrix and the variational systems.

Everything is driven by one :class:`SimulationContext`, so the state, its
perturbations and all linearizations see exactly the same Brownian increments.
Array layout is ``(path, step, component...)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import InadmissibleControl, NonFinite, SingularTransition
from .problem import ControlLaw, PerturbationSpec, ProblemSpec, hess, jac

BLOWUP = 1e8


@dataclass
class SimulationContext:
    """Uniform grid on ``[0, T]`` with ``N`` steps and ``M`` seeded paths.

    Paths are numbered from ``offset``, so disjoint batches of one large
    ensemble can be simulated separately.
    """

    horizon: float
    steps: int
    paths: int
    seed: int
    offset: int = 0
    _dW: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 2 or self.paths < 1:
            raise ValueError("need N >= 2 steps and M >= 1 paths")
        if self._dW is not None and self._dW.shape != (self.paths, self.steps):
            raise ValueError("increment array has the wrong shape")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    @property
    def dW(self) -> np.ndarray:
        if self._dW is None:
            z = rng.normals(self.seed, np.arange(self.offset, self.offset + self.paths), self.steps)
            self._dW = z * np.sqrt(self.dt)
        return self._dW

    @property
    def W(self) -> np.ndarray:
        out = np.zeros((self.paths, self.steps + 1))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def increment(self, path: int, step: int) -> float:
        """Single increment by direct counter access (no bulk generation)."""
        return rng.normal_at(self.seed, self.offset + path, step) * np.sqrt(self.dt)

    def with_increments(self, dW: np.ndarray) -> "SimulationContext":
        return SimulationContext(self.horizon, self.steps, self.paths, self.seed, self.offset, np.array(dW, dtype=float))

    def subset(self, paths: slice) -> "SimulationContext":
        dW = self.dW[paths]
        start = paths.start or 0
        return SimulationContext(self.horizon, self.steps, dW.shape[0], self.seed, self.offset + start, dW)

    def provenance(self) -> dict:
        p = {"seed": int(self.seed), "N": int(self.steps), "M": int(self.paths), "T": float(self.horizon)}
        if self.offset:
            p["path_offset"] = int(self.offset)
        return p


def make_context(T: float, N: int, M: int, seed: int, offset: int = 0) -> SimulationContext:
    return SimulationContext(float(T), int(N), int(M), int(seed), int(offset))


@dataclass
class StateEnsemble:
    """State ``x`` ``(M, N+1, n)`` and the control values ``u`` ``(M, N+1, m)`` that produced it."""

    x: np.ndarray
    u: np.ndarray
    ctx: SimulationContext
    spec: ProblemSpec
    control: ControlLaw | None = None

    @property
    def times(self) -> np.ndarray:
        return self.ctx.times

    def at(self, k: int):
        return self.ctx.times[k], self.x[:, k], self.u[:, k]

    def coef(self, which: str, index, k: int | None = None, u=None) -> np.ndarray:
        """Exact derivative of a coefficient along the trajectory (all nodes or node ``k``)."""
        polys = self.spec.coefficient(which)
        if k is None:
            t, x, uu = self.times[None, :], self.x, self.u
        else:
            t, x, uu = self.times[k], self.x[:, k], self.u[:, k]
        if u is not None:
            uu = u
        if isinstance(polys, tuple):
            return np.stack([p.derivative(index).evaluate(t, x, uu) for p in polys], axis=-1)
        return polys.derivative(index).evaluate(t, x, uu)


def _guard(arr: np.ndarray, what: str, k: int):
    if not np.all(np.isfinite(arr)) or np.abs(arr).max(initial=0.0) > BLOWUP:
        raise NonFinite(f"{what} blew up (|value| > {BLOWUP:g}) at step {k}", step=k)


def simulate_state(spec: ProblemSpec, control: ControlLaw, ctx: SimulationContext,
                   control_values: np.ndarray | None = None) -> StateEnsemble:
    """Euler-Maruyama ``x_{k+1} = x_k + b dt + sigma dW_k``.

    ``control_values`` ``(M, N+1, m)`` overrides the law with a fixed control
    process (used for perturbed controls, which follow ``ubar`` as a process).
    """
    M, N, n, m = ctx.paths, ctx.steps, spec.state_dim, spec.control_dim
    dt, times, dW = ctx.dt, ctx.times, ctx.dW
    region = spec.control_region
    x = np.empty((M, N + 1, n))
    u = np.empty((M, N + 1, m))
    x[:, 0] = spec.x0
    if control_values is not None:
        cv = np.broadcast_to(np.asarray(control_values, dtype=float), (M, N + 1, m))
        if not np.all(region.contains(cv, atol=1e-9)):
            raise InadmissibleControl("control process leaves the control region")
        u[:] = cv
    for k in range(N):
        xk = x[:, k]
        if control_values is None:
            u[:, k] = control.evaluate(k, times[k], xk, region)
        uk = u[:, k]
        x[:, k + 1] = xk + spec.b(times[k], xk, uk) * dt + spec.sigma(times[k], xk, uk) * dW[:, k, None]
        _guard(x[:, k + 1], "state", k + 1)
    if control_values is None:
        u[:, N] = control.evaluate(N, times[N], x[:, N], region)
    return StateEnsemble(x, u, ctx, spec, control)


@dataclass
class TransitionEnsemble:
    phi: np.ndarray
    phi_inv: np.ndarray


def simulate_transition(spec: ProblemSpec, state: StateEnsemble) -> TransitionEnsemble:
    """Euler scheme for ``dPhi = b_x Phi dt + sigma_x Phi dW``, ``Phi(0) = I``."""
    ctx = state.ctx
    M, N, n = ctx.paths, ctx.steps, spec.state_dim
    dt, dW = ctx.dt, ctx.dW
    phi = np.empty((M, N + 1, n, n))
    phi[:, 0] = np.eye(n)
    for k in range(N):
        t, xk, uk = state.at(k)
        A = np.eye(n) + jac(spec.drift, t, xk, uk, "x") * dt + jac(spec.diffusion, t, xk, uk, "x") * dW[:, k, None, None]
        phi[:, k + 1] = A @ phi[:, k]
        _guard(phi[:, k + 1], "transition matrix", k + 1)
    det = np.linalg.det(phi)
    if np.abs(det).min() <= 1e-10:
        p, k = np.unravel_index(np.argmin(np.abs(det)), det.shape)
        raise SingularTransition(f"|det Phi| <= 1e-10 on path {p} at step {k}", path=int(p), step=int(k))
    if n == 1:
        phi_inv = 1.0 / phi
    else:
        phi_inv = np.linalg.inv(phi)
    return TransitionEnsemble(phi, phi_inv)


@dataclass
class VariationalBundle:
    mode: str
    y: dict
    perturbation: PerturbationSpec
    state: StateEnsemble
    direction: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __getitem__(self, key: str) -> np.ndarray:
        return self.y[key]


def _quad(tensor: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # component i of a^T T_i b
    return np.einsum("...ijl,...j,...l->...i", tensor, a, b)


def simulate_variational_convex(spec: ProblemSpec, state: StateEnsemble, perturbation: PerturbationSpec,
                                ctx: SimulationContext | None = None) -> VariationalBundle:
    """First and second variational equations for a convex perturbation direction."""
    if perturbation.kind != "convex":
        raise ValueError("convex variational equations need a convex perturbation")
    ctx = state.ctx if ctx is None else ctx
    M, N, n = ctx.paths, ctx.steps, spec.state_dim
    dt, dW, times = ctx.dt, ctx.dW, ctx.times
    v = perturbation.direction_values(state.u, times)
    if not np.all(spec.control_region.contains(state.u + v, atol=1e-9)):
        raise InadmissibleControl("ubar + direction must be an admissible control")
    y1 = np.zeros((M, N + 1, n))
    y2 = np.zeros((M, N + 1, n))
    b, s = spec.drift, spec.diffusion
    for k in range(N):
        t, xk, uk = state.at(k)
        vk, a1, a2 = v[:, k], y1[:, k], y2[:, k]
        bx, bu = jac(b, t, xk, uk, "x"), jac(b, t, xk, uk, "u")
        sx, su = jac(s, t, xk, uk, "x"), jac(s, t, xk, uk, "u")
        drift1 = np.einsum("...ij,...j->...i", bx, a1) + np.einsum("...ij,...j->...i", bu, vk)
        diff1 = np.einsum("...ij,...j->...i", sx, a1) + np.einsum("...ij,...j->...i", su, vk)
        q_b = (_quad(hess(b, t, xk, uk, "x", "x"), a1, a1) + 2 * _quad(hess(b, t, xk, uk, "x", "u"), a1, vk)
               + _quad(hess(b, t, xk, uk, "u", "u"), vk, vk))
        q_s = (_quad(hess(s, t, xk, uk, "x", "x"), a1, a1) + 2 * _quad(hess(s, t, xk, uk, "x", "u"), a1, vk)
               + _quad(hess(s, t, xk, uk, "u", "u"), vk, vk))
        drift2 = np.einsum("...ij,...j->...i", bx, a2) + q_b
        diff2 = np.einsum("...ij,...j->...i", sx, a2) + q_s
        dw = dW[:, k, None]
        y1[:, k + 1] = a1 + drift1 * dt + diff1 * dw
        y2[:, k + 1] = a2 + drift2 * dt + diff2 * dw
        _guard(y2[:, k + 1], "second variation", k + 1)
    return VariationalBundle("convex", {"y1": y1, "y2": y2}, perturbation, state, direction=v)


def y1_explicit(spec: ProblemSpec, state: StateEnsemble, transition: TransitionEnsemble,
                perturbation: PerturbationSpec) -> np.ndarray:
    """First variation through the transition matrix.

    ``y1(t) = Phi(t) int_0^t Phi(s)^-1 (b_u v - sigma_x sigma_u v) ds
    + Phi(t) int_0^t Phi(s)^-1 sigma_u v dW(s)``, both integrals as left-point
    sums on the grid.
    """
    ctx = state.ctx
    M, N, n = ctx.paths, ctx.steps, spec.state_dim
    dt, dW, times = ctx.dt, ctx.dW, ctx.times
    v = perturbation.direction_values(state.u, times)
    acc = np.zeros((M, n))
    y1 = np.zeros((M, N + 1, n))
    for k in range(N):
        t, xk, uk = state.at(k)
        bu = jac(spec.drift, t, xk, uk, "u")
        sx, su = jac(spec.diffusion, t, xk, uk, "x"), jac(spec.diffusion, t, xk, uk, "u")
        suv = np.einsum("...ij,...j->...i", su, v[:, k])
        src = (np.einsum("...ij,...j->...i", bu, v[:, k]) - np.einsum("...ij,...j->...i", sx, suv)) * dt \
            + suv * dW[:, k, None]
        acc = acc + np.einsum("...ij,...j->...i", transition.phi_inv[:, k], src)
        y1[:, k + 1] = np.einsum("...ij,...j->...i", transition.phi[:, k + 1], acc)
    return y1


def simulate_variational_needle(spec: ProblemSpec, state: StateEnsemble, perturbation: PerturbationSpec,
                                ctx: SimulationContext | None = None) -> VariationalBundle:
    """Four variational equations of a spike variation (one-dimensional)."""
    if spec.state_dim != 1 or spec.control_dim != 1:
        raise ValueError("needle variational equations require n = m = 1")
    if perturbation.kind != "needle":
        raise ValueError("needle variational equations need a needle perturbation")
    ctx = state.ctx if ctx is None else ctx
    M, N = ctx.paths, ctx.steps
    dt, dW, times = ctx.dt, ctx.dW, ctx.times
    chi = perturbation.mask(times)
    v = float(perturbation.spike_value[0])
    if not spec.control_region.contains(np.array([v])):
        raise InadmissibleControl(f"spike value {v} is not in the control region")
    b, s = spec.drift[0], spec.diffusion[0]
    y1, y2, y3, y4 = (np.zeros((M, N + 1)) for _ in range(4))
    vcol = np.full((M, 1), v)
    for k in range(N):
        t, xk, uk = state.at(k)
        bd = [b.derivative((r, 0)).evaluate(t, xk, uk) for r in range(5)]
        sd = [s.derivative((r, 0)).evaluate(t, xk, uk) for r in range(5)]
        if chi[k]:
            db = [b.derivative((r, 0)).evaluate(t, xk, vcol) - bd[r] for r in range(4)]
            ds = [s.derivative((r, 0)).evaluate(t, xk, vcol) - sd[r] for r in range(4)]
        else:
            db = ds = [0.0] * 4
        a1, a2, a3, a4 = y1[:, k], y2[:, k], y3[:, k], y4[:, k]
        s12 = 2 * a1 * a2 + a2 ** 2
        s123 = 2 * a1 * a3 + 2 * a2 * a3 + a3 ** 2
        c12 = 3 * a1 ** 2 * a2 + 3 * a1 * a2 ** 2 + a2 ** 3
        dr1 = bd[1] * a1
        df1 = sd[1] * a1 + ds[0]
        dr2 = bd[1] * a2 + 0.5 * bd[2] * a1 ** 2 + db[0]
        df2 = sd[1] * a2 + 0.5 * sd[2] * a1 ** 2 + ds[1] * a1
        dr3 = bd[1] * a3 + 0.5 * bd[2] * s12 + bd[3] * a1 ** 3 / 6 + db[1] * a1
        df3 = (sd[1] * a3 + 0.5 * sd[2] * s12 + sd[3] * a1 ** 3 / 6
               + ds[1] * a2 + 0.5 * ds[2] * a1 ** 2)
        dr4 = (bd[1] * a4 + 0.5 * bd[2] * s123 + bd[3] * c12 / 6 + bd[4] * a1 ** 4 / 24
               + db[1] * a2 + 0.5 * db[2] * a1 ** 2)
        df4 = (sd[1] * a4 + 0.5 * sd[2] * s123 + sd[3] * c12 / 6 + sd[4] * a1 ** 4 / 24
               + ds[1] * a3 + 0.5 * ds[2] * s12 + ds[3] * a1 ** 3 / 6)
        dw = dW[:, k]
        y1[:, k + 1] = a1 + dr1 * dt + df1 * dw
        y2[:, k + 1] = a2 + dr2 * dt + df2 * dw
        y3[:, k + 1] = a3 + dr3 * dt + df3 * dw
        y4[:, k + 1] = a4 + dr4 * dt + df4 * dw
        _guard(y4[:, k + 1], "fourth variation", k + 1)
    return VariationalBundle("needle", {"y1": y1, "y2": y2, "y3": y3, "y4": y4}, perturbation, state, mask=chi)


def write_ensemble_csv(path, times: np.ndarray, values: np.ndarray, max_paths: int | None = None) -> None:
    """CSV with columns ``path, step, t, value_0, ...``."""
    vals = np.asarray(values)
    if vals.ndim == 2:
        vals = vals[..., None]
    vals = vals.reshape(vals.shape[0], vals.shape[1], -1)
    M = vals.shape[0] if max_paths is None else min(max_paths, vals.shape[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t"] + [f"value_{i}" for i in range(vals.shape[2])])
        for p in range(M):
            for k in range(vals.shape[1]):
                w.writerow([p, k, repr(float(times[k]))] + [repr(float(c)) for c in vals[p, k]])

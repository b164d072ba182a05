"""Backward adjoint equations and duality checks.

Discrete scheme (both backends share it): for ``k = N-1, ..., 0``

    Q_k = E[(P_{k+1} - E[P_{k+1} | F_k]) dW_k | F_k] / dt
    P_k = E[P_{k+1} | F_k] + g_k(E[P_{k+1} | F_k], Q_k) dt

where ``g`` is the bracketed driver of ``dP = -g dt + Q dW``.  Conditional
expectations come from state regressions (``backend="regression"``).  When
every coefficient entering the driver and the terminal data is the same on all
paths the solution is deterministic with ``Q = 0``; ``backend="analytic"``
then integrates the resulting ODE system with classical RK4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BackendUnsupported
from .polynomial import Polynomial
from .problem import ProblemSpec, hess, jac
from .regression import RegressionBasis, regress_conditional
from .sde import StateEnsemble, VariationalBundle

BACKENDS = ("analytic", "regression", "auto")


@dataclass
class AdjointSolution:
    """Adjoint pair on the grid.

    ``P``/``Q`` are ``(M, N+1, ...)``: vectors for order 1 and matrices for order
    2 in the vector setting, scalars in the one-dimensional chain.
    ``P_next[k]`` is the estimate of ``E[P_{k+1} | F_k]``.
    """

    order: int
    P: np.ndarray
    Q: np.ndarray
    P_next: np.ndarray
    backend: str
    terminal: np.ndarray
    basis: RegressionBasis | None = None

    @property
    def deterministic(self) -> bool:
        return self.backend == "analytic"

    def summary(self, times: np.ndarray) -> dict:
        """Pathwise means and standard errors per node (plot-ready)."""
        M = self.P.shape[0]
        P = self.P.reshape(M, self.P.shape[1], -1)
        Q = self.Q.reshape(M, self.Q.shape[1], -1)
        se = P.std(axis=0) / np.sqrt(M) if M > 1 else np.zeros(P.shape[1:])
        return {"t": times.tolist(), "mean_P": P.mean(axis=0).tolist(), "mean_Q": Q.mean(axis=0).tolist(),
                "stderr_P": se.tolist()}


def _is_path_independent(arr: np.ndarray) -> bool:
    arr = np.asarray(arr)
    scale = 1.0 + np.abs(arr).max(initial=0.0)
    return bool(np.abs(arr - arr[:1]).max(initial=0.0) <= 1e-12 * scale)


def _noise_free(spec: ProblemSpec, state: StateEnsemble) -> bool:
    times = state.times
    for k in range(state.ctx.steps):
        if np.abs(spec.sigma(times[k], state.x[:, k], state.u[:, k])).max(initial=0.0) > 0:
            return False
    return True


def _collect(spec: ProblemSpec, state: StateEnsemble, kind: str):
    """Driver coefficients along the trajectory, path 0, plus a path-independence verdict."""
    N = state.ctx.steps
    times = state.times
    b, s, f = spec.drift, spec.diffusion, (spec.running_cost,)
    series: dict[str, list] = {}
    det = True

    def add(name, arr):
        nonlocal det
        det = det and _is_path_independent(arr)
        series.setdefault(name, []).append(np.array(arr[0]))

    for k in range(N + 1):
        t, xk, uk = times[k], state.x[:, k], state.u[:, k]
        if kind == "convex":
            add("b_x", jac(b, t, xk, uk, "x"))
            add("s_x", jac(s, t, xk, uk, "x"))
            add("f_x", jac(f, t, xk, uk, "x")[:, 0])
            add("b_xx", hess(b, t, xk, uk, "x", "x"))
            add("s_xx", hess(s, t, xk, uk, "x", "x"))
            add("f_xx", hess(f, t, xk, uk, "x", "x")[:, 0])
        else:
            for r in range(1, 5):
                add(f"b{r}", b[0].derivative((r, 0)).evaluate(t, xk, uk))
                add(f"s{r}", s[0].derivative((r, 0)).evaluate(t, xk, uk))
                add(f"f{r}", f[0].derivative((r, 0)).evaluate(t, xk, uk))
    xN = state.x[:, N]
    h = spec.terminal_cost
    n = spec.state_dim
    if kind == "convex":
        hx = np.stack([h.partial("x", i).evaluate(0.0, xN) for i in range(n)], axis=-1)
        hxx = hess((h,), 0.0, xN, None, "x", "x")[:, 0]
        add("h_x", hx)
        add("h_xx", hxx)
    else:
        for r in range(1, 5):
            add(f"h{r}", h.derivative((r, 0)).evaluate(0.0, xN))
    if state.ctx.paths < 2 and not _noise_free(spec, state):
        det = False
    return det, {k: np.stack(v) for k, v in series.items()}


def _interp(arr: np.ndarray, k: int, frac: float) -> np.ndarray:
    if frac == 0.0:
        return arr[k]
    if frac == 1.0:
        return arr[k + 1]
    return (1 - frac) * arr[k] + frac * arr[k + 1]


def _rk4_backward(rhs, y_end: np.ndarray, N: int, dt: float) -> np.ndarray:
    """Integrate ``y' = rhs(k, frac, y)`` from node N down to 0 on the grid."""
    out = np.empty((N + 1,) + y_end.shape)
    out[N] = y_end
    y = y_end
    for k in range(N - 1, -1, -1):
        h = -dt
        k1 = rhs(k, 1.0, y)
        k2 = rhs(k, 0.5, y + 0.5 * h * k1)
        k3 = rhs(k, 0.5, y + 0.5 * h * k2)
        k4 = rhs(k, 0.0, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        out[k] = y
    return out


def _resolve_backend(backend: str, det: bool) -> str:
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "auto":
        return "analytic" if det else "regression"
    if backend == "analytic" and not det:
        raise BackendUnsupported("analytic backend needs path-independent drivers and terminal data; "
                                 "this problem has state-dependent random coefficients")
    return backend


def _broadcast(arr: np.ndarray, M: int) -> np.ndarray:
    return np.broadcast_to(arr[None], (M,) + arr.shape)


def _step_design(state: StateEnsemble, k: int, basis: RegressionBasis):
    return basis.design(state.x[:, k])


# ---------------------------------------------------------------------------
# vector (convex) adjoints


def solve_adjoint_convex(spec: ProblemSpec, state: StateEnsemble, order: int = 1, backend: str = "auto",
                         first: AdjointSolution | None = None, basis: RegressionBasis | None = None) -> AdjointSolution:
    """First (``order=1``) or second (``order=2``) adjoint pair of the vector problem."""
    if order not in (1, 2):
        raise ValueError("convex adjoints have order 1 or 2")
    det, co = _collect(spec, state, "convex")
    backend = _resolve_backend(backend, det)
    if order == 2 and first is None:
        first = solve_adjoint_convex(spec, state, 1, backend, basis=basis)
    if backend == "analytic":
        return _analytic_convex(spec, state, order, co)
    return _regression_convex(spec, state, order, first, basis or RegressionBasis())


def solve_adjoints_convex(spec: ProblemSpec, state: StateEnsemble, backend: str = "auto",
                          basis: RegressionBasis | None = None) -> tuple[AdjointSolution, AdjointSolution]:
    first = solve_adjoint_convex(spec, state, 1, backend, basis=basis)
    second = solve_adjoint_convex(spec, state, 2, first.backend, first=first, basis=basis)
    return first, second


def _analytic_convex(spec, state, order, co) -> AdjointSolution:
    ctx = state.ctx
    N, M, n, dt = ctx.steps, ctx.paths, spec.state_dim, ctx.dt
    bx, sx, fx, bxx, fxx = co["b_x"], co["s_x"], co["f_x"], co["b_xx"], co["f_xx"]

    def rhs(k, frac, y):
        P1 = y[:n]
        P2 = y[n:].reshape(n, n)
        Bx, Sx = _interp(bx, k, frac), _interp(sx, k, frac)
        d1 = -(Bx.T @ P1 - _interp(fx, k, frac))
        Hxx = np.einsum("i,ijk->jk", P1, _interp(bxx, k, frac)) - _interp(fxx, k, frac)
        d2 = -(Bx.T @ P2 + P2 @ Bx + Sx.T @ P2 @ Sx + Hxx)
        return np.concatenate([d1, d2.ravel()])

    y_end = np.concatenate([-co["h_x"][-1], -co["h_xx"][-1].ravel()])
    traj = _rk4_backward(rhs, y_end, N, dt)
    if order == 1:
        P = traj[:, :n]
        term = -co["h_x"][-1]
    else:
        P = traj[:, n:].reshape(N + 1, n, n)
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        term = -co["h_xx"][-1]
    P_next = np.concatenate([P[1:], P[-1:]], axis=0)
    Pb = _broadcast(P, M)
    return AdjointSolution(order, Pb, np.zeros_like(Pb), _broadcast(P_next, M), "analytic", term)


def _regression_convex(spec, state, order, first, basis) -> AdjointSolution:
    ctx = state.ctx
    N, M, n, dt, dW, times = ctx.steps, ctx.paths, spec.state_dim, ctx.dt, ctx.dW, ctx.times
    b, s, f, h = spec.drift, spec.diffusion, (spec.running_cost,), spec.terminal_cost
    xN = state.x[:, N]
    shape = (n,) if order == 1 else (n, n)
    P = np.empty((M, N + 1) + shape)
    Q = np.zeros((M, N + 1) + shape)
    P_next = np.empty_like(P)
    if order == 1:
        P[:, N] = -np.stack([h.partial("x", i).evaluate(0.0, xN) for i in range(n)], axis=-1)
    else:
        P[:, N] = -hess((h,), 0.0, xN, None, "x", "x")[:, 0]
    P_next[:, N] = P[:, N]
    terminal = P[:, N].copy()
    for k in range(N - 1, -1, -1):
        t, xk, uk = times[k], state.x[:, k], state.u[:, k]
        X = _step_design(state, k, basis)
        fit = regress_conditional(P[:, k + 1], xk, basis, step=k, design=X)
        Qk = regress_conditional((P[:, k + 1] - fit) * (dW[:, k] / dt).reshape((M,) + (1,) * len(shape)),
                                 xk, basis, design=X)
        bx, sx = jac(b, t, xk, uk, "x"), jac(s, t, xk, uk, "x")
        if order == 1:
            fx = jac(f, t, xk, uk, "x")[:, 0]
            g = np.einsum("pji,pj->pi", bx, fit) + np.einsum("pji,pj->pi", sx, Qk) - fx
        else:
            Qk = 0.5 * (Qk + np.swapaxes(Qk, -1, -2))
            P1, Q1 = first.P[:, k], first.Q[:, k]
            Hxx = (np.einsum("pi,pijk->pjk", P1, hess(b, t, xk, uk, "x", "x"))
                   + np.einsum("pi,pijk->pjk", Q1, hess(s, t, xk, uk, "x", "x"))
                   - hess(f, t, xk, uk, "x", "x")[:, 0])
            bxT = np.swapaxes(bx, -1, -2)
            sxT = np.swapaxes(sx, -1, -2)
            g = bxT @ fit + fit @ bx + sxT @ fit @ sx + sxT @ Qk + Qk @ sx + Hxx
        P[:, k] = fit + g * dt
        if order == 2:
            P[:, k] = 0.5 * (P[:, k] + np.swapaxes(P[:, k], -1, -2))
        Q[:, k] = Qk
        P_next[:, k] = fit
    return AdjointSolution(order, P, Q, P_next, "regression", terminal, basis)


# ---------------------------------------------------------------------------
# scalar chain (orders 1-4)


def solve_adjoint_scalar_chain(spec: ProblemSpec, state: StateEnsemble, backend: str = "auto",
                               basis: RegressionBasis | None = None) -> list[AdjointSolution]:
    """Four scalar adjoint pairs ``(p_i, q_i)``, solved jointly in sequence of order."""
    if spec.state_dim != 1 or spec.control_dim != 1:
        raise ValueError("the scalar adjoint chain requires n = m = 1")
    det, co = _collect(spec, state, "scalar")
    backend = _resolve_backend(backend, det)
    if backend == "analytic":
        return _analytic_chain(spec, state, co)
    return _regression_chain(spec, state, basis or RegressionBasis())


def _analytic_chain(spec, state, co) -> list[AdjointSolution]:
    ctx = state.ctx
    N, M, dt = ctx.steps, ctx.paths, ctx.dt

    def rhs(k, frac, y):
        c = {name: _interp(arr, k, frac) for name, arr in co.items() if not name.startswith("h")}
        p1, p2, p3, p4 = y
        b1, b2, b3, s1, s2, s3 = c["b1"], c["b2"], c["b3"], c["s1"], c["s2"], c["s3"]
        H2 = p1 * b2 - c["f2"]
        H3 = p1 * b3 - c["f3"]
        H4 = p1 * c["b4"] - c["f4"]
        g1 = b1 * p1 - c["f1"]
        g2 = 2 * b1 * p2 + s1 ** 2 * p2 + H2
        g3 = 3 * b1 * p3 + 3 * s1 ** 2 * p3 + 3 * b2 * p2 + 3 * s1 * s2 * p2 + H3
        g4 = (4 * b1 * p4 + 6 * s1 ** 2 * p4 + 6 * b2 * p3 + 12 * s1 * s2 * p3 + 4 * b3 * p2
              + 4 * s1 * s3 * p2 + 3 * s2 ** 2 * p2 + H4)
        return -np.array([g1, g2, g3, g4])

    y_end = -np.array([co[f"h{r}"][-1] for r in range(1, 5)])
    traj = _rk4_backward(rhs, y_end, N, dt)
    out = []
    for i in range(4):
        P = traj[:, i]
        P_next = np.concatenate([P[1:], P[-1:]])
        Pb = _broadcast(P, M)
        out.append(AdjointSolution(i + 1, Pb, np.zeros_like(Pb), _broadcast(P_next, M), "analytic", y_end[i]))
    return out


def _regression_chain(spec, state, basis) -> list[AdjointSolution]:
    ctx = state.ctx
    N, M, dt, dW, times = ctx.steps, ctx.paths, ctx.dt, ctx.dW, ctx.times
    b, s, f, h = spec.drift[0], spec.diffusion[0], spec.running_cost, spec.terminal_cost
    P = np.empty((4, M, N + 1))
    Q = np.zeros((4, M, N + 1))
    P_next = np.empty_like(P)
    xN = state.x[:, N]
    for r in range(4):
        P[r, :, N] = -h.derivative((r + 1, 0)).evaluate(0.0, xN)
    P_next[:, :, N] = P[:, :, N]
    terminal = P[:, :, N].copy()
    for k in range(N - 1, -1, -1):
        t, xk, uk = times[k], state.x[:, k], state.u[:, k]
        X = _step_design(state, k, basis)
        fit = regress_conditional(P[:, :, k + 1].T, xk, basis, step=k, design=X).T
        q = regress_conditional(((P[:, :, k + 1] - fit) * (dW[:, k] / dt)).T, xk, basis, design=X).T
        bd = [b.derivative((r, 0)).evaluate(t, xk, uk) for r in range(5)]
        sd = [s.derivative((r, 0)).evaluate(t, xk, uk) for r in range(5)]
        fd = [f.derivative((r, 0)).evaluate(t, xk, uk) for r in range(5)]
        b1, b2, b3, b4 = bd[1:]
        s1, s2, s3, s4 = sd[1:]
        p1 = fit[0] + (b1 * fit[0] + s1 * q[0] - fd[1]) * dt
        H2 = p1 * b2 + q[0] * s2 - fd[2]
        H3 = p1 * b3 + q[0] * s3 - fd[3]
        H4 = p1 * b4 + q[0] * s4 - fd[4]
        p2 = fit[1] + (2 * b1 * fit[1] + s1 ** 2 * fit[1] + 2 * s1 * q[1] + H2) * dt
        p3 = fit[2] + (3 * b1 * fit[2] + 3 * s1 ** 2 * fit[2] + 3 * s1 * q[2] + 3 * b2 * p2 + 3 * s2 * q[1]
                       + 3 * s1 * s2 * p2 + H3) * dt
        p4 = fit[3] + (4 * b1 * fit[3] + 6 * s1 ** 2 * fit[3] + 4 * s1 * q[3] + 6 * b2 * p3 + 6 * s2 * q[2]
                       + 12 * s1 * s2 * p3 + 4 * b3 * p2 + 4 * s1 * s3 * p2 + 3 * s2 ** 2 * p2
                       + 4 * s3 * q[1] + H4) * dt
        P[:, :, k] = np.stack([p1, p2, p3, p4])
        Q[:, :, k] = q
        P_next[:, :, k] = fit
    return [AdjointSolution(r + 1, P[r], Q[r], P_next[r], "regression", terminal[r], basis) for r in range(4)]


# ---------------------------------------------------------------------------
# duality


@dataclass
class DualityResult:
    """Both sides of ``E<P(T), y(T)> = E int (drift of d<P, y>) dt``.

    ``residual`` is the mean of the pathwise difference
    ``<P_N, y_N> - sum(drift dt + martingale coefficient dW)``; the martingale
    sum has zero mean and acts as a control variate.
    """

    order: int
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    residual: float
    residual_stderr: float

    @property
    def abs_residual(self) -> float:
        return abs(self.residual)


def _mean_se(a: np.ndarray) -> tuple[float, float]:
    a = np.asarray(a, dtype=float)
    se = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return float(a.mean()), se


def duality_residual(adjoint: AdjointSolution, variational: VariationalBundle, spec: ProblemSpec,
                     first: AdjointSolution | None = None) -> DualityResult:
    """Discrete Ito-product identity between an adjoint pair and the first variation.

    Order 1 pairs ``(P1, Q1)`` with ``y1``; order 2 pairs ``(P2, Q2)`` with
    ``y1 y1^T`` and needs the first-order pair for ``H_xx``.
    """
    state = variational.state
    ctx = state.ctx
    N, M, dt, dW, times = ctx.steps, ctx.paths, ctx.dt, ctx.dW, ctx.times
    y = variational.y["y1"]
    v = variational.direction
    b, s, f = spec.drift, spec.diffusion, (spec.running_cost,)
    P, Q = adjoint.P, adjoint.Q
    drift_sum = np.zeros(M)
    mart_sum = np.zeros(M)
    if adjoint.order == 2 and first is None:
        raise ValueError("second-order duality needs the first-order adjoint")
    for k in range(N):
        t, xk, uk = times[k], state.x[:, k], state.u[:, k]
        yk, vk = y[:, k], v[:, k]
        bu = jac(b, t, xk, uk, "u")
        sx, su = jac(s, t, xk, uk, "x"), jac(s, t, xk, uk, "u")
        c = np.einsum("pij,pj->pi", sx, yk) + np.einsum("pij,pj->pi", su, vk)
        if adjoint.order == 1:
            fx = jac(f, t, xk, uk, "x")[:, 0]
            drift = (np.einsum("pi,pi->p", fx, yk) + np.einsum("pi,pij,pj->p", P[:, k], bu, vk)
                     + np.einsum("pi,pij,pj->p", Q[:, k], su, vk))
            mart = np.einsum("pi,pi->p", P[:, k], c) + np.einsum("pi,pi->p", Q[:, k], yk)
        else:
            P1, Q1 = first.P[:, k], first.Q[:, k]
            Hxx = (np.einsum("pi,pijk->pjk", P1, hess(b, t, xk, uk, "x", "x"))
                   + np.einsum("pi,pijk->pjk", Q1, hess(s, t, xk, uk, "x", "x"))
                   - hess(f, t, xk, uk, "x", "x")[:, 0])
            P2, Q2 = P[:, k], Q[:, k]
            sxT = np.swapaxes(sx, -1, -2)
            Mx = P2 @ bu + sxT @ P2 @ su + Q2 @ su
            drift = (-np.einsum("pi,pij,pj->p", yk, Hxx, yk) + 2 * np.einsum("pi,pij,pj->p", yk, Mx, vk)
                     + np.einsum("pa,pia,pij,pjb,pb->p", vk, su, P2, su, vk))
            mart = np.einsum("pi,pij,pj->p", yk, Q2, yk) + 2 * np.einsum("pi,pij,pj->p", yk, P2, c)
        drift_sum += drift * dt
        mart_sum += mart * dW[:, k]
    yN = y[:, N]
    if adjoint.order == 1:
        lhs = np.einsum("pi,pi->p", P[:, N], yN)
    else:
        lhs = np.einsum("pi,pij,pj->p", yN, P[:, N], yN)
    lm, ls = _mean_se(lhs)
    rm, rs = _mean_se(drift_sum)
    dm, ds = _mean_se(lhs - drift_sum - mart_sum)
    return DualityResult(adjoint.order, lm, ls, rm, rs, dm, ds)

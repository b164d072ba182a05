"""Problem definitions: coefficients, control regions, candidate controls, perturbations.

A :class:`ProblemSpec` bundles polynomial drift ``b``, diffusion ``sigma``
(one Brownian driver), running cost ``f`` and terminal cost ``h`` together with
the horizon, initial state and control region.  Because all coefficients are
polynomials, every partial derivative needed downstream is exact.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    DerivativeInconsistency,
    DimensionMismatch,
    EmptyControlRegion,
    InadmissibleControl,
    OrderTooHigh,
)
from .polynomial import Polynomial, evaluate_all

MAX_DEGREE = 4
MODES = ("convex", "needle")
_ALIASES = {"b": "b", "drift": "b", "sigma": "sigma", "σ": "sigma", "diffusion": "sigma",
            "f": "f", "running_cost": "f", "h": "h", "terminal_cost": "h"}


# ---------------------------------------------------------------------------
# control region


@dataclass(frozen=True)
class ControlRegion:
    """Either a box ``[lo, hi]^m`` or a finite list of points in R^m."""

    kind: str
    lo: tuple = ()
    hi: tuple = ()
    points: tuple = ()

    @classmethod
    def box(cls, lo, hi) -> "ControlRegion":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def finite(cls, points) -> "ControlRegion":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls("points", points=tuple(tuple(p) for p in pts))

    @property
    def dim(self) -> int:
        if self.kind == "box":
            return len(self.lo)
        return len(self.points[0]) if self.points else 0

    @property
    def is_convex(self) -> bool:
        return self.kind == "box"

    def is_empty(self) -> bool:
        if self.kind == "box":
            return len(self.lo) == 0 or any(a > b for a, b in zip(self.lo, self.hi))
        return len(self.points) == 0

    def is_bounded(self) -> bool:
        vals = np.array(self.lo + self.hi if self.kind == "box" else self.points, dtype=float)
        return bool(np.all(np.isfinite(vals)))

    def contains(self, u, atol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            lo, hi = np.array(self.lo), np.array(self.hi)
            return np.all((u >= lo - atol) & (u <= hi + atol), axis=-1)
        pts = np.array(self.points)
        d = np.abs(u[..., None, :] - pts).max(axis=-1)
        return np.any(d <= atol, axis=-1)

    def project(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, np.array(self.lo), np.array(self.hi))
        pts = np.array(self.points)
        d = ((u[..., None, :] - pts) ** 2).sum(axis=-1)
        return pts[np.argmin(d, axis=-1)]

    def probe_points(self, count: int = 9) -> np.ndarray:
        """Finite probe set: ``count`` points for m=1, a product grid otherwise."""
        if self.kind == "points":
            return np.array(self.points)
        m = self.dim
        per = max(2, int(round(count ** (1.0 / m))))
        axes = [np.linspace(a, b, per) for a, b in zip(self.lo, self.hi)]
        return np.array(list(itertools.product(*axes)))

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"box": {"lo": list(self.lo), "hi": list(self.hi)}}
        return {"points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlRegion":
        if "box" in d:
            return cls.box(d["box"]["lo"], d["box"]["hi"])
        if "points" in d:
            return cls.finite(d["points"])
        raise ValueError(f"unknown control region {d!r}")


# ---------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ProblemSpec:
    """Controlled SDE ``dx = b dt + sigma dW`` with cost ``E[int f dt + h(x(T))]``."""

    state_dim: int
    control_dim: int
    horizon: float
    initial_state: tuple
    drift: tuple
    diffusion: tuple
    running_cost: Polynomial
    terminal_cost: Polynomial
    control_region: ControlRegion
    mode: str = "convex"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "initial_state", tuple(float(v) for v in np.atleast_1d(self.initial_state)))
        object.__setattr__(self, "drift", tuple(self.drift))
        object.__setattr__(self, "diffusion", tuple(self.diffusion))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def n(self) -> int:
        return self.state_dim

    @property
    def m(self) -> int:
        return self.control_dim

    @property
    def x0(self) -> np.ndarray:
        return np.array(self.initial_state)

    def coefficient(self, which: str):
        which = _ALIASES.get(which, which)
        if which == "b":
            return self.drift
        if which == "sigma":
            return self.diffusion
        if which == "f":
            return self.running_cost
        if which == "h":
            return self.terminal_cost
        raise ValueError(f"unknown coefficient {which!r}")

    def with_mode(self, mode: str) -> "ProblemSpec":
        return replace(self, mode=mode)

    def scaled_costs(self, lam: float) -> "ProblemSpec":
        """Same dynamics, costs ``lam * f`` and ``lam * h``."""
        return replace(self, running_cost=self.running_cost * lam, terminal_cost=self.terminal_cost * lam)

    def max_order(self) -> int:
        return 3 if self.mode == "convex" else 4

    # convenience evaluators on trailing-axis arrays

    def b(self, t, x, u) -> np.ndarray:
        return evaluate_all(self.drift, t, x, u)

    def sigma(self, t, x, u) -> np.ndarray:
        return evaluate_all(self.diffusion, t, x, u)

    def f(self, t, x, u) -> np.ndarray:
        return self.running_cost.evaluate(t, x, u)

    def h(self, x) -> np.ndarray:
        return self.terminal_cost.evaluate(0.0, x, None)


@dataclass
class ValidationReport:
    valid: bool
    checks: dict = field(default_factory=dict)
    worst_derivative_error: float = 0.0
    worst_point: tuple | None = None


def _all_polys(spec: ProblemSpec):
    for i, p in enumerate(spec.drift):
        yield f"b[{i}]", p
    for i, p in enumerate(spec.diffusion):
        yield f"sigma[{i}]", p
    yield "f", spec.running_cost
    yield "h", spec.terminal_cost


def _multi_indices(nvars: int, max_order: int):
    for order in range(1, max_order + 1):
        for combo in itertools.combinations_with_replacement(range(nvars), order):
            idx = [0] * nvars
            for c in combo:
                idx[c] += 1
            yield tuple(idx)


def validate_spec(spec: ProblemSpec, n_points: int = 20, seed: int = 0, rtol: float = 1e-6) -> ValidationReport:
    """Check dimensions, the control region and derivative consistency.

    Every exact partial derivative up to the mode's order is compared with a
    central finite difference of its parent at ``n_points`` random points.
    """
    n, m = spec.state_dim, spec.control_dim
    if n < 1 or m < 1:
        raise DimensionMismatch(f"state_dim={n}, control_dim={m} must be positive")
    if len(spec.initial_state) != n:
        raise DimensionMismatch(f"initial_state has length {len(spec.initial_state)}, expected {n}")
    if len(spec.drift) != n or len(spec.diffusion) != n:
        raise DimensionMismatch("drift and diffusion need one polynomial per state component")
    if spec.mode not in MODES:
        raise DimensionMismatch(f"unknown mode {spec.mode!r}")
    if spec.mode == "needle" and (n != 1 or m != 1):
        raise DimensionMismatch("needle mode is one-dimensional: requires n = m = 1", n=n, m=m)
    if not spec.horizon > 0:
        raise DimensionMismatch(f"horizon must be positive, got {spec.horizon}")
    for name, p in _all_polys(spec):
        if (p.n, p.m) != (n, m):
            raise DimensionMismatch(f"{name} is over (n={p.n}, m={p.m}), expected ({n}, {m})")
        if p.degree_xu() > MAX_DEGREE:
            raise DimensionMismatch(f"{name} has degree {p.degree_xu()} > {MAX_DEGREE} in (x, u)")
    if spec.terminal_cost.depends_on("t") or spec.terminal_cost.depends_on("u"):
        raise DimensionMismatch("terminal cost may depend on x only")
    region = spec.control_region
    if region.dim != m and not region.is_empty():
        raise DimensionMismatch(f"control region has dimension {region.dim}, expected {m}")
    if region.is_empty():
        raise EmptyControlRegion(f"control region {region.to_dict()} is empty")
    if not region.is_bounded():
        raise EmptyControlRegion("control region must be bounded")
    if spec.mode == "convex" and not region.is_convex:
        raise DimensionMismatch("convex mode requires a box control region")

    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.0, spec.horizon, n_points)
    xs = rng.uniform(-1.5, 1.5, (n_points, n))
    if region.kind == "box":
        us = rng.uniform(region.lo, region.hi, (n_points, m))
    else:
        pts = np.array(region.points)
        us = pts[rng.integers(0, len(pts), n_points)]
    step = 1e-4
    worst, worst_at = 0.0, None
    for name, p in _all_polys(spec):
        for idx in _multi_indices(n + m, spec.max_order()):
            exact = p.derivative(idx)
            k = next(i for i, e in enumerate(idx) if e)
            parent_idx = list(idx)
            parent_idx[k] -= 1
            parent = p.derivative(parent_idx)
            shift_x = np.zeros(n)
            shift_u = np.zeros(m)
            if k < n:
                shift_x[k] = step
            else:
                shift_u[k - n] = step
            fd = (parent.evaluate(ts, xs + shift_x, us + shift_u)
                  - parent.evaluate(ts, xs - shift_x, us - shift_u)) / (2 * step)
            ex = exact.evaluate(ts, xs, us)
            err = np.abs(fd - ex) / np.maximum(1.0, np.abs(ex))
            j = int(np.argmax(err))
            if err[j] > worst:
                worst = float(err[j])
                worst_at = (name, idx, float(ts[j]), tuple(xs[j]), tuple(us[j]))
    if worst > rtol:
        raise DerivativeInconsistency(f"derivative mismatch {worst:.3g} at {worst_at}",
                                      error=worst, point=worst_at)
    checks = {"dimensions": True, "control_region_bounded": True, "derivatives": True}
    return ValidationReport(True, checks, worst, worst_at)


def eval_coefficient(spec: ProblemSpec, which: str, index: Sequence[int], t, x, u) -> np.ndarray:
    """Exact value of a partial derivative of ``b``, ``sigma``, ``f`` or ``h``.

    ``index`` is a multi-index over ``(x_1..x_n, u_1..u_m)``.  Vector
    coefficients return a trailing axis of length ``n``.
    """
    index = tuple(int(i) for i in index)
    if sum(index) > spec.max_order():
        raise OrderTooHigh(f"order {sum(index)} exceeds {spec.max_order()} allowed in {spec.mode} mode")
    coef = spec.coefficient(which)
    if isinstance(coef, tuple):
        return np.stack([p.derivative(index).evaluate(t, x, u) for p in coef], axis=-1)
    return coef.derivative(index).evaluate(t, x, u)


# ---------------------------------------------------------------------------
# helpers for derivative tensors along trajectories


def jac(polys: Sequence[Polynomial], t, x, u, var: str) -> np.ndarray:
    """``(..., len(polys), dim)`` first derivatives w.r.t. ``x`` or ``u``."""
    p0 = polys[0]
    dim = p0.n if var == "x" else p0.m
    return np.stack([np.stack([p.partial(var, i).evaluate(t, x, u) for i in range(dim)], axis=-1)
                     for p in polys], axis=-2)


def hess(polys: Sequence[Polynomial], t, x, u, v1: str, v2: str) -> np.ndarray:
    """``(..., len(polys), d1, d2)`` mixed second derivatives."""
    p0 = polys[0]
    n, m = p0.n, p0.m
    d1 = n if v1 == "x" else m
    d2 = n if v2 == "x" else m
    rows = []
    for p in polys:
        block = []
        for i in range(d1):
            line = []
            for j in range(d2):
                idx = [0] * (n + m)
                idx[i if v1 == "x" else n + i] += 1
                idx[j if v2 == "x" else n + j] += 1
                line.append(p.derivative(idx).evaluate(t, x, u))
            block.append(np.stack(line, axis=-1))
        rows.append(np.stack(block, axis=-2))
    return np.stack(rows, axis=-3)


def delta_coefficients(spec: ProblemSpec, t, x, ubar_val, v) -> dict:
    """Spike differences ``phi(t, x, v) - phi(t, x, ubar)`` and their x-derivatives.

    One-dimensional problems only; ``x``, ``ubar_val`` and ``v`` are scalars or
    broadcastable arrays without a trailing component axis.  Keys: ``db, dsigma, db_x, dsigma_x,
    dsigma_xx, dsigma_xxx, db_xx`` plus ``df, df_x``.
    """
    if spec.state_dim != 1 or spec.control_dim != 1:
        raise DimensionMismatch("spike differences are defined for n = m = 1")
    xa = np.asarray(x, dtype=float)[..., None]
    ub = np.asarray(ubar_val, dtype=float)[..., None]
    vv = np.asarray(v, dtype=float)[..., None]
    b, s, f = spec.drift[0], spec.diffusion[0], spec.running_cost

    def d(poly, order):
        p = poly.derivative((order, 0))
        return p.evaluate(t, xa, vv) - p.evaluate(t, xa, ub)

    return {"db": d(b, 0), "dsigma": d(s, 0), "db_x": d(b, 1), "dsigma_x": d(s, 1),
            "dsigma_xx": d(s, 2), "dsigma_xxx": d(s, 3), "db_xx": d(b, 2),
            "df": d(f, 0), "df_x": d(f, 1)}


# ---------------------------------------------------------------------------
# controls and perturbations


@dataclass(frozen=True)
class ControlLaw:
    """Candidate control.

    ``kind='feedback'``: ``k(t, x)`` given by ``m`` polynomials (no ``u``
    dependence), clamped to the control region.  ``kind='open_loop'``: grid
    values of shape ``(N+1, m)`` or ``(M, N+1, m)``.

    ``nabla`` is the near-diagonal Malliavin derivative supplier: ``None``
    (derive it for feedback laws), ``"zero"``, ``"unavailable"``, or a tuple of
    ``m`` polynomials in ``(t, x)``.
    """

    kind: str
    polys: tuple = ()
    values: np.ndarray | None = field(default=None, compare=False)
    nabla: object = None

    @classmethod
    def constant(cls, value, n: int, m: int | None = None) -> "ControlLaw":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        m = len(v) if m is None else m
        return cls("feedback", polys=tuple(Polynomial.constant(n, m, c) for c in v))

    @classmethod
    def feedback(cls, polys: Sequence[Polynomial], nabla=None) -> "ControlLaw":
        polys = tuple(polys)
        for p in polys:
            if p.depends_on("u"):
                raise ValueError("feedback law may not depend on the control")
            if p.degree_xu() > MAX_DEGREE:
                raise ValueError(f"feedback law degree exceeds {MAX_DEGREE}")
        return cls("feedback", polys=polys, nabla=nabla)

    @classmethod
    def open_loop(cls, values, nabla="unavailable") -> "ControlLaw":
        vals = np.asarray(values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        return cls("open_loop", values=vals, nabla=nabla)

    @property
    def is_deterministic(self) -> bool:
        if self.kind == "feedback":
            return not any(p.depends_on("x") for p in self.polys)
        return self.values.ndim == 2

    def evaluate(self, k: int, t: float, x: np.ndarray, region: ControlRegion) -> np.ndarray:
        """Control values ``(M, m)`` at grid node ``k`` given states ``x`` of shape ``(M, n)``."""
        M = x.shape[0]
        if self.kind == "feedback":
            raw = np.stack([np.broadcast_to(p.evaluate(t, x, None), (M,)) for p in self.polys], axis=-1)
            return region.project(raw)
        vals = self.values
        out = vals[k] if vals.ndim == 2 else vals[:, k]
        out = np.broadcast_to(out, (M, out.shape[-1]))
        if not np.all(region.contains(out, atol=1e-9)):
            raise InadmissibleControl(f"open-loop control leaves the control region at step {k}")
        return np.array(out, dtype=float)

    def to_dict(self) -> dict:
        if self.kind == "feedback":
            d = {"feedback": [p.to_term_list() for p in self.polys]}
        else:
            d = {"open_loop": np.asarray(self.values).tolist()}
        if isinstance(self.nabla, str):
            d["nabla"] = self.nabla
        elif self.nabla is not None:
            d["nabla"] = [p.to_term_list() for p in self.nabla]
        return d

    @classmethod
    def from_dict(cls, d: dict, n: int, m: int) -> "ControlLaw":
        nabla = d.get("nabla")
        if isinstance(nabla, list):
            nabla = tuple(Polynomial.from_term_list(n, m, t) for t in nabla)
        if "constant" in d:
            law = cls.constant(d["constant"], n, m)
            return replace(law, nabla=nabla)
        if "feedback" in d:
            return cls.feedback([Polynomial.from_term_list(n, m, t) for t in d["feedback"]], nabla=nabla)
        if "open_loop" in d:
            return cls.open_loop(d["open_loop"], nabla=nabla if nabla is not None else "unavailable")
        raise ValueError(f"unknown control law {d!r}")


@dataclass(frozen=True)
class PerturbationSpec:
    """Convex direction ``v(.) = u(.) - ubar(.)`` or needle spike.

    Convex: ``direction`` is a constant vector, an array ``(N+1, m)`` /
    ``(M, N+1, m)``, or ``None`` together with ``spike_value`` and
    ``intervals`` meaning ``(v - ubar(t)) 1_E(t)``.

    Needle: ``intervals`` of total length ``eps`` and ``spike_value`` v in U.
    Interval endpoints are snapped to grid nodes; a step belongs to E when its
    left node lies in ``[a, b)``.
    """

    kind: str
    eps: float = 1.0
    direction: object = None
    intervals: tuple = ()
    spike_value: tuple | None = None

    @classmethod
    def convex(cls, direction, eps: float = 0.1) -> "PerturbationSpec":
        if not 0 < eps < 1:
            raise ValueError("convex perturbation magnitude must lie in (0, 1)")
        d = direction
        if not isinstance(d, np.ndarray):
            d = tuple(np.atleast_1d(np.asarray(d, dtype=float)))
        return cls("convex", eps=eps, direction=d)

    @classmethod
    def spike_direction(cls, v, t_bar: float, theta: float, eps: float = 0.5) -> "PerturbationSpec":
        """Convex direction ``(v - ubar(t)) 1_[t_bar, t_bar+theta)(t)``."""
        return cls("convex", eps=eps, direction=None, intervals=((float(t_bar), float(t_bar + theta)),),
                   spike_value=tuple(np.atleast_1d(np.asarray(v, dtype=float))))

    @classmethod
    def needle(cls, v, t_bar: float, eps: float) -> "PerturbationSpec":
        return cls("needle", eps=float(eps), intervals=((float(t_bar), float(t_bar + eps)),),
                   spike_value=tuple(np.atleast_1d(np.asarray(v, dtype=float))))

    @classmethod
    def needle_union(cls, v, intervals) -> "PerturbationSpec":
        iv = tuple((float(a), float(b)) for a, b in intervals)
        return cls("needle", eps=float(sum(b - a for a, b in iv)), intervals=iv,
                   spike_value=tuple(np.atleast_1d(np.asarray(v, dtype=float))))

    def mask(self, times: np.ndarray, horizon: float | None = None) -> np.ndarray:
        """Boolean step membership ``(N,)`` (left-node rule, snapped endpoints)."""
        N = len(times) - 1
        T = times[-1] if horizon is None else horizon
        dt = T / N
        out = np.zeros(N, dtype=bool)
        for a, b in self.intervals:
            if a < -1e-12 or b > T + 1e-12 or b < a:
                raise ValueError(f"interval [{a}, {b}) is not inside [0, {T}]")
            ka = int(np.floor(a / dt + 0.5))
            kb = int(np.floor(b / dt + 0.5))
            out[ka:kb] = True
        return out

    def effective_measure(self, times: np.ndarray) -> float:
        """Lebesgue measure of the snapped set E."""
        return float(self.mask(times).sum() * (times[1] - times[0]))

    def direction_values(self, ubar: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Direction process ``(M, N+1, m)`` for a convex perturbation."""
        M, Np1, m = ubar.shape
        if self.direction is None:
            mask = np.zeros(Np1, dtype=bool)
            mask[:-1] = self.mask(times)
            v = np.array(self.spike_value)
            return (v - ubar) * mask[None, :, None]
        d = self.direction
        if isinstance(d, tuple):
            return np.broadcast_to(np.array(d), (M, Np1, m)).copy()
        d = np.asarray(d, dtype=float)
        if d.ndim == 2:
            d = d[None]
        return np.broadcast_to(d, (M, Np1, m)).copy()

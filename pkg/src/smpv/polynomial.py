"""Sparse multivariate polynomials in ``(t, x_1..x_n, u_1..u_m)``.

Every coefficient of a problem (drift, diffusion, running and terminal cost,
feedback laws) is one of these. Differentiation is exact, so derivatives of
any order are available without a symbolic-math dependency.

Terms are stored as ``{exponents: coefficient}`` where ``exponents`` is a
tuple ``(t_pow, x_pows..., u_pows...)``.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np


class Polynomial:
    """Polynomial in time, ``n`` state variables and ``m`` control variables."""

    __slots__ = ("n", "m", "terms", "_hash")

    def __init__(self, n: int, m: int, terms: Mapping[tuple, float] | None = None):
        self.n = int(n)
        self.m = int(m)
        clean: dict[tuple, float] = {}
        for exps, coef in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != 1 + self.n + self.m:
                raise ValueError(f"exponent tuple {exps} does not match n={n}, m={m}")
            if any(e < 0 for e in exps):
                raise ValueError(f"negative exponent in {exps}")
            coef = float(coef)
            if coef != 0.0:
                clean[exps] = clean.get(exps, 0.0) + coef
        self.terms = {k: v for k, v in clean.items() if v != 0.0}
        self._hash = None

    # -- construction -----------------------------------------------------

    @classmethod
    def constant(cls, n: int, m: int, c: float) -> "Polynomial":
        return cls(n, m, {(0,) * (1 + n + m): c})

    @classmethod
    def time(cls, n: int, m: int) -> "Polynomial":
        return cls(n, m, {(1,) + (0,) * (n + m): 1.0})

    @classmethod
    def state(cls, n: int, m: int, i: int = 0) -> "Polynomial":
        exps = [0] * (1 + n + m)
        exps[1 + i] = 1
        return cls(n, m, {tuple(exps): 1.0})

    @classmethod
    def control(cls, n: int, m: int, j: int = 0) -> "Polynomial":
        exps = [0] * (1 + n + m)
        exps[1 + n + j] = 1
        return cls(n, m, {tuple(exps): 1.0})

    @classmethod
    def from_term_list(cls, n: int, m: int, terms: Iterable[Sequence]) -> "Polynomial":
        """Build from ``[(coef, t_pow, x_pows, u_pows), ...]`` (problem-file layout)."""
        out: dict[tuple, float] = {}
        for term in terms:
            coef, tp, xp, up = term
            xp = list(xp) if xp is not None else [0] * n
            up = list(up) if up is not None else [0] * m
            if len(xp) != n or len(up) != m:
                raise ValueError(f"term {term!r} has wrong x/u power lengths for n={n}, m={m}")
            key = (int(tp), *map(int, xp), *map(int, up))
            out[key] = out.get(key, 0.0) + float(coef)
        return cls(n, m, out)

    def to_term_list(self) -> list[list]:
        n = self.n
        rows = []
        for exps in sorted(self.terms):
            rows.append([self.terms[exps], exps[0], list(exps[1:1 + n]), list(exps[1 + n:])])
        return rows

    # -- algebra ----------------------------------------------------------

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if (other.n, other.m) != (self.n, self.m):
                raise ValueError("polynomials over different variable sets")
            return other
        return Polynomial.constant(self.n, self.m, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms.get(k, 0.0) + v
        return Polynomial(self.n, self.m, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.n, self.m, {k: -v for k, v in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        terms: dict[tuple, float] = {}
        for ka, va in self.terms.items():
            for kb, vb in other.terms.items():
                key = tuple(a + b for a, b in zip(ka, kb))
                terms[key] = terms.get(key, 0.0) + va * vb
        return Polynomial(self.n, self.m, terms)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if k < 0 or int(k) != k:
            raise ValueError("only non-negative integer powers")
        out = Polynomial.constant(self.n, self.m, 1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return (self.n, self.m) == (other.n, other.m) and self.terms == other.terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.n, self.m, frozenset(self.terms.items())))
        return self._hash

    def __repr__(self):
        if not self.terms:
            return "Polynomial(0)"
        names = ["t"] + [f"x{i}" for i in range(self.n)] + [f"u{j}" for j in range(self.m)]
        parts = []
        for exps in sorted(self.terms):
            mono = "*".join(f"{nm}^{e}" if e > 1 else nm for nm, e in zip(names, exps) if e)
            parts.append(f"{self.terms[exps]:g}" + (f"*{mono}" if mono else ""))
        return "Polynomial(" + " + ".join(parts) + ")"

    # -- inspection -------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.terms

    def degree_xu(self) -> int:
        """Total degree in the state and control variables."""
        return max((sum(k[1:]) for k in self.terms), default=0)

    def degree_in(self, var: str) -> int:
        sl = self._slice(var)
        return max((sum(k[sl]) for k in self.terms), default=0)

    def depends_on(self, var: str) -> bool:
        return self.degree_in(var) > 0

    def _slice(self, var: str) -> slice:
        if var == "t":
            return slice(0, 1)
        if var == "x":
            return slice(1, 1 + self.n)
        if var == "u":
            return slice(1 + self.n, 1 + self.n + self.m)
        raise ValueError(var)

    # -- calculus ---------------------------------------------------------

    def derivative(self, index: Sequence[int]) -> "Polynomial":
        """Exact partial derivative; ``index`` counts orders over ``(x..., u...)``."""
        index = tuple(int(i) for i in index)
        if len(index) != self.n + self.m:
            raise ValueError(f"multi-index {index} must have length n+m={self.n + self.m}")
        return _derivative(self, index)

    def partial(self, var: str, i: int = 0, order: int = 1) -> "Polynomial":
        idx = [0] * (self.n + self.m)
        idx[i if var == "x" else self.n + i] = order
        return self.derivative(idx)

    # -- evaluation -------------------------------------------------------

    def __call__(self, t, x, u=None) -> np.ndarray:
        return self.evaluate(t, x, u)

    def evaluate(self, t, x, u=None) -> np.ndarray:
        """Vectorized evaluation.

        ``x`` has trailing axis ``n`` and ``u`` trailing axis ``m``; leading axes
        broadcast against each other and against ``t``.
        """
        x = np.asarray(x, dtype=float)
        if u is None:
            u = np.zeros(x.shape[:-1] + (self.m,))
        u = np.asarray(u, dtype=float)
        t = np.asarray(t, dtype=float)
        if x.shape[-1] != self.n or u.shape[-1] != self.m:
            raise ValueError(f"x trailing dim {x.shape[-1]} / u trailing dim {u.shape[-1]} "
                             f"do not match n={self.n}, m={self.m}")
        shape = np.broadcast_shapes(t.shape, x.shape[:-1], u.shape[:-1])
        out = np.zeros(shape)
        if not self.terms:
            return out
        cols = [t] + [x[..., i] for i in range(self.n)] + [u[..., j] for j in range(self.m)]
        maxdeg = [0] * len(cols)
        for exps in self.terms:
            for i, e in enumerate(exps):
                maxdeg[i] = max(maxdeg[i], e)
        powers = []
        for c, d in zip(cols, maxdeg):
            pw = [None] * (d + 1)
            if d >= 1:
                pw[1] = c
            for e in range(2, d + 1):
                pw[e] = pw[e - 1] * c
            powers.append(pw)
        for exps, coef in sorted(self.terms.items()):
            term = coef
            for i, e in enumerate(exps):
                if e:
                    term = term * powers[i][e]
            out = out + term
        return out


@lru_cache(maxsize=4096)
def _derivative(poly: Polynomial, index: tuple) -> Polynomial:
    terms: dict[tuple, float] = {}
    for exps, coef in poly.terms.items():
        new = list(exps)
        c = coef
        for k, order in enumerate(index):
            pos = 1 + k
            e = new[pos]
            if order > e:
                c = 0.0
                break
            for j in range(order):
                c *= e - j
            new[pos] = e - order
        if c != 0.0:
            key = tuple(new)
            terms[key] = terms.get(key, 0.0) + c
    return Polynomial(poly.n, poly.m, terms)


def evaluate_all(polys: Sequence[Polynomial], t, x, u=None) -> np.ndarray:
    """Evaluate a vector of polynomials; result has trailing axis ``len(polys)``."""
    return np.stack([p.evaluate(t, x, u) for p in polys], axis=-1)


def multi_index(n: int, m: int, x: Sequence[int] = (), u: Sequence[int] = ()) -> tuple:
    """Multi-index from lists of differentiated variable positions.

    ``multi_index(2, 1, x=[0, 0], u=[0])`` is ``d^3/dx0^2 du0``.
    """
    idx = [0] * (n + m)
    for i in x:
        idx[i] += 1
    for j in u:
        idx[n + j] += 1
    return tuple(idx)

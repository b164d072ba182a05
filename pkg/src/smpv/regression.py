"""Cross-sectional least-squares estimates of conditional expectations.

At a fixed time step the values on each path are regressed on monomials of the
(standardized) state at that step, Longstaff-Schwartz style.  State components
with no cross-sectional spread are dropped, so a deterministic state reduces the
basis to the constant and the fit becomes the sample mean.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import IllConditionedRegression, InsufficientPaths

MAX_CONDITION = 1e10


@dataclass
class RegressionBasis:
    """Monomial basis of total degree ``degree`` in the state.

    ``tables`` collects, per time step, the condition number of the design
    matrix and the number of basis functions actually used.
    """

    degree: int = 3
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("regression degree must be at least 1")

    def design(self, state: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.ndim == 1:
            state = state[:, None]
        mean = state.mean(axis=0)
        std = state.std(axis=0)
        keep = std > 1e-12 * (1.0 + np.abs(mean))
        z = (state[:, keep] - mean[keep]) / std[keep]
        d = z.shape[1]
        cols = [np.ones(state.shape[0])]
        for order in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(d), order):
                col = np.ones(state.shape[0])
                for c in combo:
                    col = col * z[:, c]
                cols.append(col)
        return np.stack(cols, axis=1)


def regress_conditional(values: np.ndarray, state_at_step: np.ndarray, basis: RegressionBasis | None = None,
                        step: int | None = None, design: np.ndarray | None = None) -> np.ndarray:
    """Fitted ``E[values | state]`` on every path.

    ``values`` has leading axis ``M`` and any trailing shape; each trailing
    component gets its own least-squares fit against the same design.
    """
    basis = RegressionBasis() if basis is None else basis
    vals = np.asarray(values, dtype=float)
    M = vals.shape[0]
    X = basis.design(state_at_step) if design is None else design
    nb = X.shape[1]
    if nb > 1 and M < 10 * nb:
        raise InsufficientPaths(f"{M} paths is fewer than 10 per basis function ({nb})")
    flat = vals.reshape(M, -1)
    if nb == 1:
        fit = np.broadcast_to(flat.mean(axis=0), flat.shape)
        cond = 1.0
    else:
        coef, _, _, sv = np.linalg.lstsq(X, flat, rcond=None)
        cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
        if cond > MAX_CONDITION:
            raise IllConditionedRegression(f"design condition number {cond:.3g} exceeds {MAX_CONDITION:g}",
                                           condition=cond, step=step)
        fit = X @ coef
    if step is not None:
        basis.tables[step] = {"condition": cond, "n_functions": nb}
    return np.asarray(fit).reshape(vals.shape)

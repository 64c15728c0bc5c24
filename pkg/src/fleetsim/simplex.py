"""Dense two-phase simplex for small bounded LPs.

    minimize    c @ x
    subject to  A @ x <= b,   lo <= x <= hi

Bounds are handled by shifting to ``x - lo`` and adding one row per finite
upper bound; Bland's rule prevents cycling. Sized for the tens of variables
the capacity planner produces, not for general use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS = 1e-9


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: Optional[np.ndarray] = None
    objective: float = float("nan")


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] /= T[row, col]
    f = T[:, col].copy()
    f[row] = 0.0
    T -= np.outer(f, T[row])


def _run(T: np.ndarray, basis: list, allowed: int) -> str:
    """Minimize the objective in the last row of T over the first ``allowed`` columns."""
    m = T.shape[0] - 1
    basis_arr = np.asarray(basis)
    while True:
        neg = np.flatnonzero(T[-1, :allowed] < -EPS)
        if not len(neg):
            return "optimal"
        entering = int(neg[0])  # Bland: lowest index
        col = T[:m, entering]
        rows = np.flatnonzero(col > EPS)
        if not len(rows):
            return "unbounded"
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        tied = rows[ratios <= best + EPS]
        leave = int(tied[np.argmin(basis_arr[tied])])
        _pivot(T, leave, entering)
        basis[leave] = entering
        basis_arr[leave] = entering


def solve_lp(c, A, b, lo, hi) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, len(c))
    b = np.asarray(b, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = len(c)
    if np.any(hi < lo - EPS):
        return LPResult("infeasible")
    # shift x = lo + y, y >= 0
    rows = [A]
    rhs = [b - A @ lo]
    finite = np.isfinite(hi)
    if finite.any():
        U = np.eye(n)[finite]
        rows.append(U)
        rhs.append((hi - lo)[finite])
    G = np.vstack(rows)
    h = np.concatenate(rhs)
    m = G.shape[0]
    neg = h < 0
    n_art = int(neg.sum())
    # columns: y (n) | slacks (m) | artificials (n_art) | rhs
    T = np.zeros((m + 1, n + m + n_art + 1))
    T[:m, :n] = G
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = h
    basis = list(range(n, n + m))
    art = 0
    for i in np.flatnonzero(neg):
        T[i, :n + m] *= -1
        T[i, -1] *= -1
        T[i, n + m + art] = 1.0
        basis[i] = n + m + art
        art += 1
    if n_art:
        # phase 1: minimize the sum of artificials
        T[-1, :] = 0.0
        for i in range(m):
            if basis[i] >= n + m:
                T[-1, :] -= T[i, :]
        T[-1, n + m:n + m + n_art] = 0.0
        _run(T, basis, n + m + n_art)
        if -T[-1, -1] > 1e-7:
            return LPResult("infeasible")
        # drive any remaining artificial out of the basis
        for i in range(m):
            if basis[i] >= n + m:
                j = next((j for j in range(n + m) if abs(T[i, j]) > EPS), None)
                if j is not None:
                    _pivot(T, i, j)
                    basis[i] = j
    T = T[:, list(range(n + m)) + [T.shape[1] - 1]]
    T[-1, :] = 0.0
    T[-1, :n] = c
    for i in range(m):
        j = basis[i]
        if j < n + m and T[-1, j] != 0.0:
            T[-1, :] -= T[-1, j] * T[i, :]
    status = _run(T, basis, n + m)
    if status != "optimal":
        return LPResult(status)
    y = np.zeros(n + m)
    for i in range(m):
        if basis[i] < n + m:
            y[basis[i]] = T[i, -1]
    x = lo + y[:n]
    return LPResult("optimal", x, float(c @ x))

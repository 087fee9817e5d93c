"""Brute-force reference implementations for the test suite.

Nothing in the library imports this module.  Every oracle here is slow and
written for clarity: active-set enumeration for the bounded clearing
problem, a dense KKT solve for the unbounded one, central finite
differences, and closed-form Gaussian moments.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_ORACLE_H = 12


@dataclass
class OracleReport:
    case: str
    reference: np.ndarray
    candidate: np.ndarray
    max_abs: float
    max_rel: float
    passed: bool


def compare(case: str, reference, candidate, tol: float) -> OracleReport:
    ref = np.asarray(reference, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.float64)
    diff = np.abs(ref - cand)
    max_abs = float(diff.max()) if diff.size else 0.0
    max_rel = float((diff / np.maximum(np.abs(ref), 1.0)).max()) if diff.size else 0.0
    return OracleReport(case, ref, cand, max_abs, max_rel, bool(max_abs <= tol))


def kkt_equality_solve(mu, b_tilde, supply, fixed=()):
    """Stationary point of ``1/2 sum mu (b - bt)^2`` s.t. ``sum mu b = B`` and
    ``b_i = lb_i`` for the ``fixed`` pairs ``(i, lb_i)``.

    Returns ``(b, lam, nu)`` from one dense linear solve over the unknowns
    ``(b, lam, nu_fixed)``; ``nu`` are the bound multipliers.
    """
    mu = np.asarray(mu, dtype=np.float64)
    bt = np.asarray(b_tilde, dtype=np.float64)
    H = len(bt)
    fixed = list(fixed)
    m = len(fixed)
    n = H + 1 + m
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    # stationarity: mu_i b_i - mu_i lam - nu_i = mu_i bt_i
    for i in range(H):
        A[i, i] = mu[i]
        A[i, H] = -mu[i]
        rhs[i] = mu[i] * bt[i]
    for k, (i, _) in enumerate(fixed):
        A[i, H + 1 + k] = -1.0
    # clearing
    A[H, :H] = mu
    rhs[H] = supply
    for k, (i, lb_i) in enumerate(fixed):
        A[H + 1 + k, i] = 1.0
        rhs[H + 1 + k] = lb_i
    sol = np.linalg.solve(A, rhs)
    return sol[:H], sol[H], sol[H + 1:]


def qp_oracle(mu, b_tilde, supply, lb, tol: float = 1e-11) -> np.ndarray:
    """Minimizer of ``1/2 sum mu (b - bt)^2`` s.t. ``sum mu b = B``, ``b >= lb``
    by trying all ``2^H`` active sets."""
    mu = np.asarray(mu, dtype=np.float64)
    bt = np.asarray(b_tilde, dtype=np.float64)
    lb = np.broadcast_to(np.asarray(lb, dtype=np.float64), bt.shape)
    H = len(bt)
    if H > MAX_ORACLE_H:
        raise ValueError(f"oracle limited to H <= {MAX_ORACLE_H}")
    scale = max(1.0, abs(supply), float(np.abs(bt).max()), float(np.abs(lb).max()))
    best, best_obj = None, np.inf
    for r in range(H + 1):
        for active in itertools.combinations(range(H), r):
            if r == H:
                # only the bound point itself; feasible iff it clears
                if abs(float(mu @ lb) - supply) <= tol * scale:
                    cand = lb.copy()
                else:
                    continue
            else:
                b, _, nu = kkt_equality_solve(mu, bt, supply, [(i, lb[i]) for i in active])
                if np.any(b < lb - tol * scale) or np.any(nu < -tol * scale):
                    continue
                cand = b
            obj = 0.5 * float(mu @ (cand - bt) ** 2)
            if obj < best_obj:
                best, best_obj = cand, obj
    if best is None:
        raise ValueError("no feasible active set (is sum(mu*lb) > B?)")
    return best


def simple_oracle(mu, b_tilde, supply) -> np.ndarray:
    """Unbounded clearing problem through the dense KKT system."""
    return kkt_equality_solve(mu, b_tilde, supply)[0]


def fd_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        g[j] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def gaussian_moment(k: int) -> float:
    """``E[eps^k]`` for a standard normal: 0 for odd ``k``, ``(k-1)!!`` otherwise."""
    if k < 0:
        raise ValueError("moment order must be nonnegative")
    if k % 2:
        return 0.0
    out = 1.0
    for j in range(k - 1, 0, -2):
        out *= j
    return out

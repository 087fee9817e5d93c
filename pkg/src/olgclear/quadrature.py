"""Gauss-Hermite rules for expectations over a standard normal innovation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

MAX_ORDER = 64


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray    # standardized innovations
    weights: np.ndarray  # probabilities, sum to one
    order: int

    def expect(self, values: np.ndarray, axis: int = -1) -> np.ndarray:
        return np.moveaxis(np.asarray(values), axis, -1) @ self.weights


def gauss_hermite(order: int) -> QuadratureRule:
    """Nodes and weights integrating against the N(0, 1) density.

    Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
    polynomials (zero diagonal, off-diagonal sqrt(k)).  This is the
    physicists' rule with nodes scaled by sqrt(2) and weights by 1/sqrt(pi).
    Weights come from the Christoffel sum rather than squared eigenvector
    entries, which underflow to zero in the tails of high-order rules.
    """
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_ORDER:
        raise ValueError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    order = int(order)
    if order == 1:
        return QuadratureRule(np.zeros(1), np.ones(1), 1)
    off = np.sqrt(np.arange(1, order, dtype=np.float64))
    nodes = eigh_tridiagonal(np.zeros(order), off, eigvals_only=True)
    weights = _christoffel_weights(nodes, order)
    # exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    if order % 2:
        nodes[order // 2] = 0.0
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights, order)


def _christoffel_weights(nodes: np.ndarray, order: int) -> np.ndarray:
    """``1 / sum_j p_j(x)^2`` with ``p_j`` the orthonormal Hermite polynomials."""
    p_prev = np.zeros_like(nodes)
    p = np.ones_like(nodes)
    total = np.ones_like(nodes)
    for j in range(1, order):
        p_prev, p = p, (nodes * p - np.sqrt(j - 1) * p_prev) / np.sqrt(j)
        total += p * p
    return 1.0 / total


def next_shocks(z, rule: QuadratureRule, rho: float, sigma: float) -> np.ndarray:
    """Next-period productivity at each node: ``exp(rho*log z + sigma*eps_k)``.

    ``z`` may be an array; nodes are appended as a trailing axis.
    """
    z = np.asarray(z, dtype=np.float64)
    return np.exp(rho * np.log(z)[..., None] + sigma * rule.nodes)

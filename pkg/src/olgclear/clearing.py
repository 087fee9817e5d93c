"""Market-clearing output layers.

Both layers solve

    min  1/2 sum_i mu_i (b_i - bt_i)^2
    s.t. sum_i mu_i b_i = B          [and b_i >= lb_i]

row by row over a batch.  Without bounds the solution shifts every demand
by the same amount.  With bounds the solution is ``b_i = max(bt_i + lam, lb_i)``
where ``lam`` is the root of the nondecreasing piecewise-linear map
``lam -> sum_i mu_i max(bt_i + lam, lb_i) - B``.

All arrays carry agents on the last axis; leading axes are batch axes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

LIFTOFF_WIDTH = 1e-5
BISECTION_TOL = 1e-12
BISECTION_MAXITER = 200


class InfeasibleBounds(ValueError):
    def __init__(self, lower_mass, supply):
        self.lower_mass = lower_mass
        self.supply = supply
        super().__init__(f"infeasible clearing problem: sum(mu*lb) = {lower_mass!r} exceeds supply B = {supply!r}")


@dataclass
class ProjectionResult:
    b: np.ndarray
    lam: np.ndarray
    active: np.ndarray  # True where the agent sits on its bound
    mu: np.ndarray

    @property
    def active_set(self) -> np.ndarray:
        """Indices of clamped agents (single-problem results only)."""
        return np.flatnonzero(self.active)


def _prep(mu, b_tilde, supply, lb=None):
    b_tilde = np.asarray(b_tilde, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), b_tilde.shape)
    if np.any(mu <= 0):
        raise ValueError("population weights must be positive")
    supply = np.asarray(supply, dtype=np.float64)
    if lb is not None:
        lb = np.broadcast_to(np.asarray(lb, dtype=np.float64), b_tilde.shape)
    return mu, b_tilde, supply, lb


def simple_adjust(mu, b_tilde, supply) -> np.ndarray:
    """Equal-shift adjustment ``b = bt - (sum mu*bt - B) / sum mu``."""
    mu, b_tilde, supply, _ = _prep(mu, b_tilde, supply)
    excess = np.sum(mu * b_tilde, axis=-1) - supply
    return b_tilde - (excess / np.sum(mu, axis=-1))[..., None]


def _check_feasible(mu, lb, supply):
    lower = np.sum(mu * lb, axis=-1)
    scale = np.maximum(1.0, np.maximum(np.abs(supply), np.sum(np.abs(mu * lb), axis=-1)))
    bad = lower - supply > 1e-12 * scale
    if np.any(bad):
        i = np.flatnonzero(np.ravel(bad))[0]
        raise InfeasibleBounds(float(np.ravel(lower)[i]),
                               float(np.ravel(np.broadcast_to(supply, lower.shape))[i]))


def _sorted_solve(mu, b_tilde, supply, lb):
    t = lb - b_tilde  # breakpoints: agent i is free iff lam > t_i
    order = np.argsort(t, axis=-1, kind="stable")
    ts = np.take_along_axis(t, order, -1)
    ms = np.take_along_axis(mu, order, -1)
    bs = np.take_along_axis(b_tilde, order, -1)
    ls = np.take_along_axis(lb, order, -1)
    cum_mb = np.cumsum(ms * bs, axis=-1)
    cum_m = np.cumsum(ms, axis=-1)
    tail = np.cumsum((ms * ls)[..., ::-1], axis=-1)[..., ::-1]
    zero = np.zeros(ts.shape[:-1] + (1,))
    free_mb = np.concatenate([zero, cum_mb[..., :-1]], -1)  # agents before k
    free_m = np.concatenate([zero, cum_m[..., :-1]], -1)
    phi = free_mb + ts * free_m + tail - supply[..., None]
    k = np.sum(phi <= 0.0, axis=-1) - 1
    k = np.maximum(k, 0)
    tail_after = np.concatenate([tail[..., 1:], zero], -1)
    kk = k[..., None]
    lam = ((supply[..., None] - np.take_along_axis(tail_after, kk, -1)
            - np.take_along_axis(cum_mb, kk, -1)) / np.take_along_axis(cum_m, kk, -1))[..., 0]
    pos = np.arange(t.shape[-1])
    active_sorted = pos > kk
    active = np.empty_like(active_sorted)
    np.put_along_axis(active, order, active_sorted, -1)
    return lam, active


def _bisect_solve(mu, b_tilde, supply, lb):
    t = lb - b_tilde
    total = np.sum(mu, axis=-1)
    excess = np.sum(mu * b_tilde, axis=-1) - supply
    lo = np.min(t, axis=-1)
    # phi(min t) = sum(mu*lb) - B <= 0; beyond max t everyone is free and the
    # root of the linear piece is -excess/total.
    hi = np.maximum(np.max(t, axis=-1), -excess / total)

    def phi(lam):
        return np.sum(mu * np.maximum(b_tilde + lam[..., None], lb), axis=-1) - supply

    for _ in range(BISECTION_MAXITER):
        width = hi - lo
        if np.all(width <= BISECTION_TOL * np.maximum(1.0, np.abs(lo))):
            break
        mid = 0.5 * (lo + hi)
        up = phi(mid) > 0.0
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
    mid = 0.5 * (lo + hi)
    # polish: closed form on the identified free set gives exact clearing
    active = t >= mid[..., None]
    free = ~active
    m_free = np.sum(np.where(free, mu, 0.0), axis=-1)
    rhs = supply - np.sum(np.where(active, mu * lb, 0.0), axis=-1) - np.sum(np.where(free, mu * b_tilde, 0.0), axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        lam = np.where(m_free > 0, rhs / np.where(m_free > 0, m_free, 1.0), lo)
    return lam, active


def project_with_bounds(mu, b_tilde, supply, lb, method: str = "sorted") -> ProjectionResult:
    """Exact projection onto ``{sum mu*b = B, b >= lb}``.

    ``method`` is ``"sorted"`` (exact, O(H log H) per row) or ``"bisection"``.
    """
    mu, b_tilde, supply, lb = _prep(mu, b_tilde, supply, lb)
    supply = np.broadcast_to(supply, b_tilde.shape[:-1])
    _check_feasible(mu, lb, supply)
    if method == "sorted":
        lam, active = _sorted_solve(mu, b_tilde, supply, lb)
    elif method == "bisection":
        lam, active = _bisect_solve(mu, b_tilde, supply, lb)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    b = np.where(active, lb, b_tilde + lam[..., None])
    return ProjectionResult(b, lam, active, np.array(mu))


def project_backward(result: ProjectionResult, g) -> np.ndarray:
    """Vector-Jacobian product of the projection with its active set held fixed."""
    g = np.asarray(g, dtype=np.float64)
    free = ~result.active
    mu = result.mu
    m_free = np.sum(np.where(free, mu, 0.0), axis=-1, keepdims=True)
    s = np.sum(np.where(free, g, 0.0), axis=-1, keepdims=True)
    empty = m_free == 0.0
    if np.any(empty):
        log.debug("clearing backward: %d rows with every agent clamped; gradient set to zero",
                  int(np.sum(empty)))
    safe = np.where(empty, 1.0, m_free)
    return np.where(free & ~empty, g - mu * s / safe, 0.0)


def simple_backward(mu, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), g.shape)
    return g - mu * np.sum(g, axis=-1, keepdims=True) / np.sum(mu, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# differentiable layers

def clear_simple(b_tilde, mu, supply):
    """Equal-shift clearing usable on tape variables."""
    def fwd(bt):
        return simple_adjust(mu, bt, supply), None

    def bwd(_, g):
        return (simple_backward(mu, g),)

    return ad.custom_vjp(fwd, bwd, b_tilde, name="clear_simple")


def clear_project(b_tilde, mu, supply, lb, method: str = "sorted"):
    """Bound-respecting clearing usable on tape variables.

    Returns ``(b, result)``; ``result`` carries the multiplier and active set.
    """
    holder = {}

    def fwd(bt):
        res = project_with_bounds(mu, bt, supply, lb, method)
        holder["result"] = res
        return res.b, res

    def bwd(res, g):
        return (project_backward(res, g),)

    b = ad.custom_vjp(fwd, bwd, b_tilde, name="clear_project")
    return b, holder["result"]


def liftoff_residual(b_tilde, b, lb, euler_ratio):
    """Feedback term for agents the projection may have clamped wrongly.

    ``euler_ratio`` is the inverse-marginal-utility Euler expression divided by
    current consumption; values below one mean the agent wants to save more.
    The leading factor is ``1/(1+bt)`` for ``bt >= 0`` and continues as
    ``1 - bt`` below zero so it stays positive and decreasing everywhere.
    """
    pos = ad.maximum(b_tilde, 0.0)
    neg = ad.maximum(ad.neg(b_tilde), 0.0)
    lead = ad.reciprocal(1.0 + pos) + neg
    gap = b - lb
    gate = ad.exp(-1.0 * (gap * gap) / LIFTOFF_WIDTH)
    want = ad.maximum(1.0 - euler_ratio, 0.0)
    return lead * gate * want

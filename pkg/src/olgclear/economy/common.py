"""Pieces shared by the single- and multi-asset household blocks."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad

PENALTY_WEIGHT = 10.0
# floor for arguments of inverse marginal utilities and rent-weight divisions
TINY = 1e-12


def default_income(H: int) -> np.ndarray:
    """Hump-shaped income shares, ``sin(pi h / (H+1))`` normalized to sum to one."""
    h = np.arange(1, H + 1)
    y = np.sin(np.pi * h / (H + 1))
    return y / y.sum()


def default_housing_weights(H: int) -> np.ndarray:
    """Housing-utility weights rising linearly from 0.05 to 0.25."""
    return np.linspace(0.05, 0.25, H)


def fischer_burmeister(x, y):
    """``x + y - sqrt(x^2 + y^2)``; zero iff x >= 0, y >= 0, xy = 0."""
    return x + y - ad.sqrt(x * x + y * y)


def marginal_utility(c, gamma, floor):
    return ad.power(ad.maximum(c, floor), -gamma)


def inverse_marginal_utility(x, gamma):
    # x^(-1/gamma); gamma == 1 is the log-utility case 1/x
    return ad.power(ad.maximum(x, TINY), -1.0 / gamma)


def expect(values, weights, axis: int):
    """Quadrature expectation of ``values`` along ``axis``."""
    nd = values.ndim
    shape = [1] * nd
    shape[axis] = len(weights)
    return ad.sum(values * np.reshape(weights, shape), axis=axis)


def euler_ratio(c_now, c_next, payoff_next, cost_now, weights, beta, gamma, floor, node_axis,
                gamma_next=None):
    """Relative consumption implied by an Euler equation.

    ``(u')^{-1}(beta E[u'(c') payoff'] / cost) / c``; equals one when the
    first-order condition holds with equality.  ``gamma`` broadcasts against
    today's arrays, ``gamma_next`` (default: ``gamma``) against the per-node ones.
    """
    if gamma_next is None:
        gamma_next = gamma
    rhs = beta * expect(marginal_utility(c_next, gamma_next, floor) * payoff_next, weights, node_axis)
    return inverse_marginal_utility(rhs / cost_now, gamma) / ad.maximum(c_now, floor)


def asset_fb_residual(ratio, holding_next, lower, c_now, floor):
    return fischer_burmeister(ratio - 1.0, (holding_next - lower) / ad.maximum(c_now, floor))


def rent_residual(c, h_rent, p_rent, psi, gamma, h_floor, floor):
    """``(u')^{-1}(psi v'(h) / p_r) / c - 1``.

    With ``v'(h) = (h_floor + h)^(-gamma)`` the inverse marginal utility is
    ``(p_r / psi)^(1/gamma) (h_floor + h)``, which is evaluated directly: it
    stays linear (and keeps its gradient) when a demand falls below
    ``-h_floor``.  A zero weight ``psi`` gives a large finite residual.
    """
    scale = ad.power(p_rent / np.maximum(psi, TINY), 1.0 / gamma)
    return scale * (h_floor + h_rent) / ad.maximum(c, floor) - 1.0


def consumption_penalty(c, floor):
    short = ad.maximum(floor - c, 0.0)
    return PENALTY_WEIGHT * short * short


def fb_residual_bond(c_t, c_next, b_prev, b_now, b_next, p_b, p_b_next, weights, *,
                     beta, gamma, zeta_b, b_lb=0.0, c_floor=1e-8, adjust_next=True):
    """Bond Euler/borrowing-limit residual for one agent, nodes on the last axis.

    ``b_prev`` is the agent's current holding, ``b_now`` its choice for next
    period and ``b_next`` (per node) the choice it will make next period.
    ``adjust_next=False`` drops the next-period adjustment-cost term (the
    agent's final period, when no further choice is made).
    """
    c_next = np.asarray(c_next, dtype=np.float64)
    payoff = 1.0 + (p_b_next * zeta_b * (np.asarray(b_next) - b_now) if adjust_next else 0.0)
    cost = p_b * (1.0 + zeta_b * (b_now - b_prev))
    ratio = euler_ratio(np.float64(c_t), c_next, payoff, cost, np.asarray(weights), beta,
                        np.float64(gamma), c_floor, -1)
    return asset_fb_residual(ratio, b_now, b_lb, np.float64(c_t), c_floor)


def fb_residual_rent(c_t, h_rent, p_r, psi_h, *, gamma, h_floor, c_floor=1e-8):
    return rent_residual(np.float64(c_t), np.float64(h_rent), p_r, psi_h, np.float64(gamma), h_floor, c_floor)

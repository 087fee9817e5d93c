"""Single-asset OLG economy: bond savings and rental housing.

State rows are ``[z, b^{1,1..H}, ..., b^{T,1..H}]`` for ``T`` preference
types (one in the baseline calibration, giving ``H + 1`` inputs).  Network
heads are the pre-clearing bond choices of ages 1..H-1, rental demands of
all ages, and the bond and rent prices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..clearing import clear_project, clear_simple, liftoff_residual
from ..quadrature import QuadratureRule, next_shocks
from . import common

MODES = ("simple", "solver")


@dataclass(frozen=True)
class SingleAssetConfig:
    H: int = 20
    beta: float = 0.867
    gamma: tuple[float, ...] = (3.0,)     # one entry per preference type
    masses: tuple[float, ...] = (1.0,)    # per-age population weight of each type
    y: tuple[float, ...] | None = None
    psi: tuple[float, ...] | None = None
    h_floor: float = 5e-5
    b_lb: float = 0.0
    B: float = 0.56
    Hr: float = 1.0
    zeta_b: float = 0.5
    rho: float = 0.458
    sigma: float = 0.043
    c_floor: float = 1e-8
    mode: str = "simple"
    projection: str = "sorted"
    policy_head: str = "identity"

    def __post_init__(self):
        if np.ndim(self.gamma) == 0:
            object.__setattr__(self, "gamma", (float(self.gamma),))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "masses", tuple(float(m) for m in self.masses))
        if self.y is not None:
            object.__setattr__(self, "y", tuple(float(v) for v in self.y))
        if self.psi is not None:
            object.__setattr__(self, "psi", tuple(float(v) for v in self.psi))
        validate_single(self)

    @property
    def n_types(self) -> int:
        return len(self.gamma)

    @property
    def income(self) -> np.ndarray:
        return np.asarray(self.y) if self.y is not None else common.default_income(self.H)

    @property
    def housing_weights(self) -> np.ndarray:
        return np.asarray(self.psi) if self.psi is not None else common.default_housing_weights(self.H)

    @property
    def input_dim(self) -> int:
        return 1 + self.n_types * self.H

    @property
    def output_dim(self) -> int:
        T, H = self.n_types, self.H
        return T * (H - 1) + T * H + 2

    def heads(self) -> list[nn.Head]:
        T, H = self.n_types, self.H
        return [nn.Head("bond", T * (H - 1), self.policy_head),
                nn.Head("rent", T * H, "identity"),
                nn.Head("p_b", 1, "softplus"),
                nn.Head("p_r", 1, "softplus")]


class ConfigError(ValueError):
    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


def validate_single(cfg: SingleAssetConfig) -> None:
    if cfg.H < 2:
        raise ConfigError("H", "need at least two age groups")
    if not 0.0 < cfg.beta < 1.0:
        raise ConfigError("beta", "must lie in (0, 1)")
    if any(g <= 0 for g in cfg.gamma):
        raise ConfigError("gamma", "risk aversion must be positive")
    if len(cfg.masses) != len(cfg.gamma):
        raise ConfigError("masses", f"need one mass per type ({len(cfg.gamma)})")
    if any(m <= 0 for m in cfg.masses):
        raise ConfigError("masses", "type masses must be positive")
    if cfg.zeta_b < 0:
        raise ConfigError("zeta_b", "must be nonnegative")
    if cfg.sigma < 0:
        raise ConfigError("sigma", "must be nonnegative")
    for name in ("y", "psi"):
        v = getattr(cfg, name)
        if v is not None:
            if len(v) != cfg.H:
                raise ConfigError(name, f"length {len(v)} does not match H = {cfg.H}")
            if any(x < 0 for x in v):
                raise ConfigError(name, "entries must be nonnegative")
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {MODES}")
    if cfg.projection not in ("sorted", "bisection"):
        raise ConfigError("projection", "must be 'sorted' or 'bisection'")
    if cfg.policy_head not in nn.HEAD_ACTIVATIONS:
        raise ConfigError("policy_head", f"must be one of {nn.HEAD_ACTIVATIONS}")
    if cfg.mode == "solver" and sum(cfg.masses) * (cfg.H - 1) * cfg.b_lb > cfg.B:
        raise ConfigError("b_lb", "borrowing limits exceed bond supply; clearing set is empty")


# ---------------------------------------------------------------------------
# state layout

def split_state(cfg: SingleAssetConfig, X):
    n = X.shape[0]
    return X[:, 0], np.reshape(X[:, 1:], (n, cfg.n_types, cfg.H))


def pack_state(z, b) -> np.ndarray:
    n = b.shape[0]
    return np.concatenate([np.reshape(z, (n, 1)), np.reshape(b, (n, -1))], axis=1)


def initial_states(cfg: SingleAssetConfig, n: int) -> np.ndarray:
    """``n`` copies of a feasible, clearing state: z = 1, newborns hold nothing,
    every other age holds an equal share of the bond supply."""
    T, H = cfg.n_types, cfg.H
    b = np.zeros((n, T, H))
    b[:, :, 1:] = cfg.B / (sum(cfg.masses) * (H - 1))
    return pack_state(np.ones(n), b)


def _agent_weights(cfg, width):
    return np.repeat(np.asarray(cfg.masses), width)


# ---------------------------------------------------------------------------
# model blocks

def decode_outputs(cfg: SingleAssetConfig, out: dict[str, Any]) -> dict[str, Any]:
    """Clear the bond and rental markets from raw head outputs."""
    T, H = cfg.n_types, cfg.H
    bt = out["bond"]
    n = bt.shape[0]
    mu_b = _agent_weights(cfg, H - 1)
    result = None
    if cfg.mode == "solver":
        b_next, result = clear_project(bt, mu_b, cfg.B, cfg.b_lb, cfg.projection)
    else:
        b_next = clear_simple(bt, mu_b, cfg.B)
    h_rent = clear_simple(out["rent"], _agent_weights(cfg, H), cfg.Hr)
    return {
        "b_tilde": ad.reshape(bt, (n, T, H - 1)),
        "b_next": ad.reshape(b_next, (n, T, H - 1)),
        "h_rent": ad.reshape(h_rent, (n, T, H)),
        "p_b": ad.reshape(out["p_b"], (n, 1, 1)),
        "p_r": ad.reshape(out["p_r"], (n, 1, 1)),
        "projection": result,
    }


def pad_last_age(x):
    """Append the oldest age's (zero) savings choice."""
    zeros = np.zeros(tuple(x.shape[:-1]) + (1,))
    return ad.concat([x, zeros], axis=-1)


def newborn_holdings(x):
    """Beginning-of-next-period holdings: newborns enter with nothing."""
    zeros = np.zeros(tuple(x.shape[:-1]) + (1,))
    return ad.concat([zeros, x], axis=-1)


def consumption(cfg: SingleAssetConfig, z, b, b_next, h_rent, p_b, p_r):
    """Budget identity; shapes ``z (n,)``, holdings ``(n, T, H)``, prices ``(n, 1, 1)``.

    The oldest age saves nothing and pays no adjustment cost.
    """
    n = b.shape[0]
    zz = ad.reshape(z, (n, 1, 1))
    delta = b_next - b[..., :-1]
    adj = pad_last_age(0.5 * cfg.zeta_b * delta * delta)
    return zz * cfg.income + b - p_b * pad_last_age(b_next) - p_b * adj - p_r * h_rent


def transition(cfg: SingleAssetConfig, X, b_next, z_next) -> np.ndarray:
    """Next state: fresh shock, holdings shifted one age, newborns at zero."""
    n = X.shape[0]
    b_new = newborn_holdings(np.reshape(b_next, (n, cfg.n_types, cfg.H - 1)))
    return pack_state(z_next, b_new)


def _gammas(cfg):
    return np.asarray(cfg.gamma).reshape(-1, 1)


def _sum_agents(x):
    return ad.sum(ad.sum(x, axis=2), axis=1)


def residual_loss(err_b, err_r):
    """Per-state loss from residuals shaped ``(n, T, H-1)`` and ``(n, T, H)``.

    Squared bond errors are averaged over the ``H-1`` saving ages, squared
    rent errors over all ``H`` ages, and the sum is averaged over types.
    """
    T, H = err_r.shape[1], err_r.shape[2]
    return (_sum_agents(err_b * err_b) / (H - 1) + _sum_agents(err_r * err_r) / H) / T


def equilibrium_graph(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig,
                      rule: QuadratureRule, arrays=None) -> dict[str, Any]:
    """Residuals and loss for a batch of states.

    Runs the network today and at every quadrature node tomorrow; with tape
    variables in ``arrays`` every returned quantity is differentiable.
    """
    T, H, K = cfg.n_types, cfg.H, rule.order
    n = X.shape[0]
    z, b = split_state(cfg, X)
    today = decode_outputs(cfg, nn.forward(params, X, arrays))
    b_next, h_rent, p_b, p_r = today["b_next"], today["h_rent"], today["p_b"], today["p_r"]
    c = consumption(cfg, z, b, b_next, h_rent, p_b, p_r)

    # tomorrow, one row per (state, node)
    zn = next_shocks(z, rule, cfg.rho, cfg.sigma)                      # (n, K)
    hold = newborn_holdings(b_next)                                      # (n, T, H)
    hold_k = ad.broadcast_to(ad.reshape(hold, (n, 1, T * H)), (n, K, T * H))
    Xn = ad.concat([np.reshape(zn, (n, K, 1)), hold_k], axis=-1)
    Xn = ad.reshape(Xn, (n * K, 1 + T * H))
    tom = decode_outputs(cfg, nn.forward(params, Xn, arrays))
    hold_flat = ad.reshape(hold_k, (n * K, T, H))
    cn = consumption(cfg, zn.reshape(-1), hold_flat, tom["b_next"], tom["h_rent"], tom["p_b"], tom["p_r"])

    cn = ad.reshape(cn, (n, K, T, H))
    bnn = ad.reshape(pad_last_age(tom["b_next"]), (n, K, T, H))
    pbn = ad.reshape(tom["p_b"], (n, K, 1, 1))

    gam = _gammas(cfg)
    c_now = ad.getitem(c, (Ellipsis, slice(0, H - 1)))
    b_ch = ad.reshape(b_next, (n, 1, T, H - 1))
    adj_next = np.ones(H - 1)
    adj_next[-1] = 0.0
    payoff = 1.0 + adj_next * pbn * cfg.zeta_b * (ad.getitem(bnn, (Ellipsis, slice(1, H))) - b_ch)
    cost = p_b * (1.0 + cfg.zeta_b * (b_next - b[..., :H - 1]))
    ratio = common.euler_ratio(c_now, ad.getitem(cn, (Ellipsis, slice(1, H))), payoff, cost,
                               rule.weights, cfg.beta, gam, cfg.c_floor, node_axis=1,
                               gamma_next=gam[None, None])
    err_b = common.asset_fb_residual(ratio, b_next, cfg.b_lb, c_now, cfg.c_floor)
    err_r = common.rent_residual(c, h_rent, p_r, cfg.housing_weights, gam, cfg.h_floor, cfg.c_floor)

    per_state = residual_loss(err_b, err_r)
    lift = None
    if cfg.mode == "solver":
        lift = liftoff_residual(today["b_tilde"], b_next, cfg.b_lb, ratio)
        per_state = per_state + _sum_agents(lift * lift) / ((H - 1) * T)
    pen = common.consumption_penalty(c, cfg.c_floor)
    per_state = per_state + _sum_agents(pen)
    return {
        "loss": ad.mean(per_state),
        "per_state": per_state,
        "err_bond": err_b,
        "err_rent": err_r,
        "liftoff": lift,
        "consumption": c,
        "b_next": b_next,
        "h_rent": h_rent,
        "p_b": p_b,
        "p_r": p_r,
    }


def loss_single(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig, rule: QuadratureRule) -> float:
    return float(equilibrium_graph(params, X, cfg, rule)["loss"])


def loss_and_grad(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig,
                  rule: QuadratureRule) -> tuple[float, list[np.ndarray]]:
    tape = ad.Tape()
    arrays = [tape.leaf(a) for a in params.arrays()]
    g = equilibrium_graph(params, X, cfg, rule, arrays)
    grads = ad.backward(tape, output=g["loss"])
    return float(g["loss"].value), grads


def policies(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig) -> dict[str, Any]:
    """Cleared policies, prices and consumption at ``X`` (no tape)."""
    z, b = split_state(cfg, X)
    dec = decode_outputs(cfg, nn.forward(params, X))
    dec["consumption"] = consumption(cfg, z, b, dec["b_next"], dec["h_rent"], dec["p_b"], dec["p_r"])
    return dec


def simulate(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig, eps: np.ndarray) -> np.ndarray:
    """Advance every state one period with standard-normal innovations ``eps``."""
    z, _ = split_state(cfg, X)
    dec = decode_outputs(cfg, nn.forward(params, X))
    z_next = np.exp(cfg.rho * np.log(z) + cfg.sigma * eps)
    return transition(cfg, X, dec["b_next"], z_next)


RESIDUAL_FAMILIES = ("bond", "rent")


def residuals(params: nn.MlpParams, X: np.ndarray, cfg: SingleAssetConfig,
              rule: QuadratureRule) -> dict[str, np.ndarray]:
    """Per-state residual arrays keyed by family, shape ``(n, T, ages)``."""
    g = equilibrium_graph(params, X, cfg, rule)
    return {"bond": np.asarray(g["err_bond"]), "rent": np.asarray(g["err_rent"])}

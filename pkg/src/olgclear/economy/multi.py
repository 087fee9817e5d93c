"""Three-asset OLG economy with preference-type heterogeneity.

Households trade a bond, a stock (a Lucas tree paying ``d*z``) and claims
on the owned housing stock, and rent housing services every period.

State rows are ``[z, b, s, ho, aux]`` where each of ``b, s, ho, aux`` is a
type-major block of ``T*H`` entries (``T`` types, ``H`` ages) and
``aux = s*d*z`` is dividend income, an auxiliary network input.  Network
heads are the pre-clearing choices of ages 1..H-1 for each asset, rental
demands of all ages, and the four prices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..clearing import clear_project, clear_simple, liftoff_residual
from ..quadrature import QuadratureRule, next_shocks
from . import common
from .single import ConfigError, MODES, newborn_holdings, pad_last_age

ASSETS = ("bond", "stock", "house")
PRICE_HEADS = ("p_b", "p_s", "p_o", "p_r")
RESIDUAL_FAMILIES = ("bond", "stock", "house", "rent")


@dataclass(frozen=True)
class MultiAssetConfig:
    H: int = 20
    beta: float = 0.867
    gamma: tuple[float, ...] = (1.0, 2.0)
    masses: tuple[float, ...] = (0.5, 0.5)
    y: tuple[float, ...] | None = None
    psi: tuple[float, ...] | None = None
    h_floor: float = 5e-5
    rho: float = 0.458
    sigma: float = 0.043
    c_floor: float = 1e-8
    # supplies
    B: float = 0.56
    S: float = 1.0
    Ho: float = 1.0
    Hex: float = 0.0
    d: float = 0.3
    # adjustment costs and short-sale limits
    zeta_b: float = 0.25
    zeta_s: float = 1.0
    zeta_h: float = 4.0
    b_lb: float = 0.0
    s_lb: float = 0.0
    ho_lb: float = 0.0
    # homotopy controls
    m_b: float = 1.0
    m_s: float = 1.0
    m_o: float = 1.0
    w_b: float = 1.0
    w_s: float = 1.0
    w_o: float = 1.0
    w_r: float = 1.0
    mode: str = "simple"
    projection: str = "sorted"
    policy_head: str = "identity"

    def __post_init__(self):
        for name in ("gamma", "masses"):
            v = getattr(self, name)
            if np.ndim(v) == 0:
                v = (v,)
            object.__setattr__(self, name, tuple(float(g) for g in v))
        for name in ("y", "psi"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(x) for x in v))
        validate_multi(self)

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
        return 1 + 4 * self.n_types * self.H

    @property
    def output_dim(self) -> int:
        T, H = self.n_types, self.H
        return 3 * T * (H - 1) + T * H + 4

    def heads(self) -> list[nn.Head]:
        T, H = self.n_types, self.H
        return ([nn.Head(a, T * (H - 1), self.policy_head) for a in ASSETS]
                + [nn.Head("rent", T * H, "identity")]
                + [nn.Head(p, 1, "softplus") for p in PRICE_HEADS])

    def asset(self, name: str) -> dict[str, float]:
        """Supply, bound, adjustment cost, mask and loss weight of one asset."""
        table = {
            "bond": (self.B, self.b_lb, self.zeta_b, self.m_b, self.w_b),
            "stock": (self.S, self.s_lb, self.zeta_s, self.m_s, self.w_s),
            "house": (self.Ho, self.ho_lb, self.zeta_h, self.m_o, self.w_o),
        }
        supply, lb, zeta, mask, weight = table[name]
        return {"supply": supply, "lb": lb, "zeta": zeta, "mask": mask, "weight": weight}

    @property
    def rental_supply(self) -> float:
        return self.Ho + self.Hex


def validate_multi(cfg: MultiAssetConfig) -> None:
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
    for name in ("B", "S", "Ho", "Hex", "d", "sigma"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, "must be nonnegative")
    for name in ("zeta_b", "zeta_s", "zeta_h"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, "adjustment costs must be nonnegative")
    for name in ("m_b", "m_s", "m_o"):
        if not 0.0 <= getattr(cfg, name) <= 1.0:
            raise ConfigError(name, "masks must lie in [0, 1]")
    for name in ("w_b", "w_s", "w_o", "w_r"):
        if getattr(cfg, name) < 0:
            raise ConfigError(name, "loss weights must be nonnegative")
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
    if cfg.mode == "solver":
        mass = sum(cfg.masses) * (cfg.H - 1)
        for lb_name, supply_name in (("b_lb", "B"), ("s_lb", "S"), ("ho_lb", "Ho")):
            if mass * getattr(cfg, lb_name) > getattr(cfg, supply_name):
                raise ConfigError(lb_name, f"short-sale limits exceed supply {supply_name}; "
                                           "clearing set is empty")


# ---------------------------------------------------------------------------
# state layout

def split_state(cfg: MultiAssetConfig, X) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """``z (n,)``, holdings ``{asset: (n, T, H)}`` and ``aux (n, T, H)``."""
    n, T, H = X.shape[0], cfg.n_types, cfg.H
    block = T * H
    hold = {a: np.reshape(X[:, 1 + k * block:1 + (k + 1) * block], (n, T, H))
            for k, a in enumerate(ASSETS)}
    aux = np.reshape(X[:, 1 + 3 * block:], (n, T, H))
    return X[:, 0], hold, aux


def pack_state(cfg: MultiAssetConfig, z, hold: dict[str, np.ndarray]) -> np.ndarray:
    n = np.shape(z)[0]
    aux = hold["stock"] * cfg.d * np.reshape(z, (n, 1, 1))
    cols = [np.reshape(z, (n, 1))] + [np.reshape(hold[a], (n, -1)) for a in ASSETS]
    return np.concatenate(cols + [np.reshape(aux, (n, -1))], axis=1)


def per_capita_holdings(cfg: MultiAssetConfig, supply: float) -> float:
    """Equal holding of every non-newborn agent that clears ``supply``."""
    return supply / (sum(cfg.masses) * (cfg.H - 1))


def initial_states(cfg: MultiAssetConfig, n: int) -> np.ndarray:
    """``n`` copies of a clearing state: z = 1, newborns hold nothing, every
    other agent holds an equal share of each asset's supply."""
    T, H = cfg.n_types, cfg.H
    hold = {}
    for a in ASSETS:
        h = np.zeros((n, T, H))
        h[:, :, 1:] = per_capita_holdings(cfg, cfg.asset(a)["supply"])
        hold[a] = h
    return pack_state(cfg, np.ones(n), hold)


def _agent_weights(cfg, width):
    return np.repeat(np.asarray(cfg.masses), width)


# ---------------------------------------------------------------------------
# model blocks

def decode_outputs_multi(cfg: MultiAssetConfig, out: dict[str, Any]) -> dict[str, Any]:
    """Mask and clear every asset market and the rental market."""
    T, H = cfg.n_types, cfg.H
    n = out["bond"].shape[0]
    mu = _agent_weights(cfg, H - 1)
    dec: dict[str, Any] = {"tilde": {}, "next": {}, "projection": {}}
    for a in ASSETS:
        par = cfg.asset(a)
        bt = out[a] * par["mask"]
        if cfg.mode == "solver":
            cleared, res = clear_project(bt, mu, par["supply"], par["lb"], cfg.projection)
        else:
            cleared, res = clear_simple(bt, mu, par["supply"]), None
        dec["tilde"][a] = ad.reshape(bt, (n, T, H - 1))
        dec["next"][a] = ad.reshape(cleared, (n, T, H - 1))
        dec["projection"][a] = res
    dec["h_rent"] = ad.reshape(clear_simple(out["rent"], _agent_weights(cfg, H), cfg.rental_supply),
                               (n, T, H))
    for p in PRICE_HEADS:
        dec[p] = ad.reshape(out[p], (n, 1, 1))
    return dec


def consumption_multi(cfg: MultiAssetConfig, z, hold, nxt, h_rent, prices):
    """Budget identity per type and age.

    ``hold`` maps assets to ``(n, T, H)`` holdings, ``nxt`` to ``(n, T, H-1)``
    choices; ``prices`` maps ``p_b, p_s, p_o, p_r`` to ``(n, 1, 1)`` arrays.
    The oldest age buys nothing and pays no adjustment cost.
    """
    n = hold["bond"].shape[0]
    zz = ad.reshape(z, (n, 1, 1))
    p_b, p_s, p_o, p_r = (prices[p] for p in PRICE_HEADS)
    c = (zz * cfg.income + hold["bond"] + hold["stock"] * (p_s + cfg.d * zz)
         + hold["house"] * (p_o + p_r) - p_r * h_rent)
    for a, price in (("bond", p_b), ("stock", p_s), ("house", p_o)):
        zeta = cfg.asset(a)["zeta"]
        delta = nxt[a] - hold[a][..., :-1]
        c = c - price * pad_last_age(nxt[a] + 0.5 * zeta * delta * delta)
    return c


def transition_multi(cfg: MultiAssetConfig, X, nxt, z_next) -> np.ndarray:
    """Shift every asset one age, zero newborns, refresh dividend income."""
    n = X.shape[0]
    hold = {a: newborn_holdings(np.reshape(nxt[a], (n, cfg.n_types, cfg.H - 1))) for a in ASSETS}
    return pack_state(cfg, z_next, hold)


def _payoff(cfg, asset, tom, zn_b):
    """Next-period gross payoff per unit before the adjustment-cost term."""
    if asset == "bond":
        return 1.0
    if asset == "stock":
        return tom["p_s"] + cfg.d * zn_b
    return tom["p_o"] + tom["p_r"]


_PRICE_OF = {"bond": "p_b", "stock": "p_s", "house": "p_o"}


def _sum_agents(x):
    return ad.sum(ad.sum(x, axis=2), axis=1)


def weighted_residual_loss(errs: dict[str, Any], weights: dict[str, float]):
    """Per-state ``1/2 sum_x w_x (1/ages) sum_{type, age} err_x^2``.

    ``errs`` maps families to ``(n, T, ages)`` residuals; families with zero
    weight are skipped (they may be absent).
    """
    total = 0.0
    for fam, w in weights.items():
        if w == 0.0:
            continue
        e = errs[fam]
        total = total + (0.5 * w / e.shape[2]) * _sum_agents(e * e)
    return total


def equilibrium_graph(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig,
                      rule: QuadratureRule, arrays=None, all_families: bool = False) -> dict[str, Any]:
    """Residuals and loss for a batch of states.

    Families with zero loss weight are skipped unless ``all_families``.
    """
    T, H, K = cfg.n_types, cfg.H, rule.order
    n = X.shape[0]
    z, hold, _ = split_state(cfg, X)
    today = decode_outputs_multi(cfg, nn.forward(params, X, arrays))
    nxt, h_rent = today["next"], today["h_rent"]
    prices = {p: today[p] for p in PRICE_HEADS}
    c = consumption_multi(cfg, z, hold, nxt, h_rent, prices)

    # tomorrow, one row per (state, node)
    zn = next_shocks(z, rule, cfg.rho, cfg.sigma)                     # (n, K)
    zn3 = np.reshape(zn, (n, K, 1))
    hold_n = {a: newborn_holdings(nxt[a]) for a in ASSETS}             # (n, T, H)
    hold_k = {a: ad.broadcast_to(ad.reshape(hold_n[a], (n, 1, T * H)), (n, K, T * H)) for a in ASSETS}
    aux_k = hold_k["stock"] * (cfg.d * zn3)
    Xn = ad.concat([zn3] + [hold_k[a] for a in ASSETS] + [aux_k], axis=-1)
    Xn = ad.reshape(Xn, (n * K, cfg.input_dim))
    tom = decode_outputs_multi(cfg, nn.forward(params, Xn, arrays))
    hold_flat = {a: ad.reshape(hold_k[a], (n * K, T, H)) for a in ASSETS}
    cn = consumption_multi(cfg, zn.reshape(-1), hold_flat, tom["next"], tom["h_rent"],
                           {p: tom[p] for p in PRICE_HEADS})
    cn = ad.reshape(cn, (n, K, T, H))
    c_next = ad.getitem(cn, (Ellipsis, slice(1, H)))
    tom_p = {p: ad.reshape(tom[p], (n, K, 1, 1)) for p in PRICE_HEADS}
    zn_b = np.reshape(zn, (n, K, 1, 1))

    gam = np.asarray(cfg.gamma).reshape(-1, 1)
    c_now = ad.getitem(c, (Ellipsis, slice(0, H - 1)))
    adj_next = np.ones(H - 1)
    adj_next[-1] = 0.0

    errs: dict[str, Any] = {}
    lifts: dict[str, Any] = {}
    for a in ASSETS:
        par = cfg.asset(a)
        if par["weight"] == 0.0 and not all_families:
            continue
        pname = _PRICE_OF[a]
        choice = ad.reshape(nxt[a], (n, 1, T, H - 1))
        after = ad.getitem(ad.reshape(pad_last_age(tom["next"][a]), (n, K, T, H)), (Ellipsis, slice(1, H)))
        payoff = _payoff(cfg, a, tom_p, zn_b) + adj_next * tom_p[pname] * par["zeta"] * (after - choice)
        cost = prices[pname] * (1.0 + par["zeta"] * (nxt[a] - hold[a][..., :H - 1]))
        ratio = common.euler_ratio(c_now, c_next, payoff, cost, rule.weights, cfg.beta, gam,
                                   cfg.c_floor, node_axis=1, gamma_next=gam[None, None])
        errs[a] = common.asset_fb_residual(ratio, nxt[a], par["lb"], c_now, cfg.c_floor)
        if par["weight"] != 0.0 and cfg.mode == "solver":
            lifts[a] = liftoff_residual(today["tilde"][a], nxt[a], par["lb"], ratio)
    if cfg.w_r != 0.0 or all_families:
        errs["rent"] = common.rent_residual(c, h_rent, prices["p_r"], cfg.housing_weights, gam,
                                            cfg.h_floor, cfg.c_floor)
    weights = {a: cfg.asset(a)["weight"] for a in ASSETS}
    weights["rent"] = cfg.w_r
    per_state = weighted_residual_loss(errs, weights)
    if lifts:
        per_state = per_state + weighted_residual_loss(lifts, {a: weights[a] for a in lifts})
    per_state = per_state + _sum_agents(common.consumption_penalty(c, cfg.c_floor))
    return {
        "loss": ad.mean(per_state),
        "per_state": per_state,
        "errors": errs,
        "liftoff": lifts,
        "consumption": c,
        "next": nxt,
        "h_rent": h_rent,
        **prices,
    }


def fb_residuals_multi(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig,
                       rule: QuadratureRule) -> dict[str, np.ndarray]:
    """All four residual families, each ``(n, T, ages)``."""
    g = equilibrium_graph(params, X, cfg, rule, all_families=True)
    return {k: np.asarray(v) for k, v in g["errors"].items()}


residuals = fb_residuals_multi


def loss_multi(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig, rule: QuadratureRule) -> float:
    return float(equilibrium_graph(params, X, cfg, rule)["loss"])


def loss_and_grad(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig,
                  rule: QuadratureRule) -> tuple[float, list[np.ndarray]]:
    tape = ad.Tape()
    arrays = [tape.leaf(a) for a in params.arrays()]
    g = equilibrium_graph(params, X, cfg, rule, arrays)
    grads = ad.backward(tape, output=g["loss"])
    return float(g["loss"].value), grads


def policies(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig) -> dict[str, Any]:
    """Cleared policies, prices and consumption at ``X`` (no tape)."""
    z, hold, _ = split_state(cfg, X)
    dec = decode_outputs_multi(cfg, nn.forward(params, X))
    dec["consumption"] = consumption_multi(cfg, z, hold, dec["next"], dec["h_rent"],
                                           {p: dec[p] for p in PRICE_HEADS})
    return dec


def simulate(params: nn.MlpParams, X: np.ndarray, cfg: MultiAssetConfig, eps: np.ndarray) -> np.ndarray:
    """Advance every state one period with standard-normal innovations ``eps``."""
    z = X[:, 0]
    dec = decode_outputs_multi(cfg, nn.forward(params, X))
    z_next = np.exp(cfg.rho * np.log(z) + cfg.sigma * eps)
    return transition_multi(cfg, X, dec["next"], z_next)

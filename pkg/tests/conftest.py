import numpy as np
import pytest

from olgclear import autodiff as ad
from olgclear import nn
from olgclear.economy import multi, single
from olgclear.quadrature import gauss_hermite


def shrink_output_layer(params, factor=0.05):
    """Small last-layer weights keep a random network near a feasible policy."""
    arrs = params.arrays()
    arrs[-2] = arrs[-2] * factor
    return params.with_arrays(arrs)


def micro_single(mode="simple", seed=3):
    cfg = single.SingleAssetConfig(H=3, B=0.1, Hr=0.3, mode=mode)
    params = shrink_output_layer(nn.init_mlp([cfg.input_dim, 4, 4, cfg.output_dim], cfg.heads(), seed))
    X = single.initial_states(cfg, 4)
    X[:, 0] = [0.9, 1.0, 1.1, 1.05]
    return cfg, params, X


def micro_multi(mode="simple", seed=3):
    cfg = multi.MultiAssetConfig(H=3, B=0.1, S=0.1, Ho=0.1, Hex=0.2, mode=mode)
    params = shrink_output_layer(nn.init_mlp([cfg.input_dim, 4, 4, cfg.output_dim], cfg.heads(), seed))
    X = multi.initial_states(cfg, 4)
    z, hold, _ = multi.split_state(cfg, X)
    X = multi.pack_state(cfg, np.array([0.9, 1.0, 1.1, 1.05]), hold)
    return cfg, params, X


@pytest.fixture
def rule2():
    return gauss_hermite(2)


def model_gradcheck(model, cfg, params, X, rule):
    """Finite-difference check of a model's loss gradient in every parameter."""
    def program(*arrays):
        return model.equilibrium_graph(params, X, cfg, rule, list(arrays))["loss"]

    return ad.gradcheck(program, params.arrays(), raise_on_failure=False)


def nested_pair(H, mode, seed=5):
    """A multi-asset network and the single-asset network it reduces to."""
    cm = multi.MultiAssetConfig(H=H, m_s=0.0, m_o=0.0, S=0.0, Ho=0.0, Hex=1.0, w_s=0.0, w_o=0.0, mode=mode)
    cs = single.SingleAssetConfig(H=H, gamma=cm.gamma, masses=cm.masses, B=cm.B, zeta_b=cm.zeta_b, Hr=1.0,
                                  mode=mode)
    pm = nn.init_mlp([cm.input_dim, 16, 16, cm.output_dim], cm.heads(), seed)
    T = cm.n_types
    ob = T * (H - 1)
    rent = 3 * ob
    cols = np.r_[0:ob, rent:rent + T * H, rent + T * H, rent + T * H + 3]   # bond, rent, p_b, p_r
    ps = nn.MlpParams([pm.weights[0][:1 + T * H], pm.weights[1], pm.weights[2][:, cols]],
                      [pm.biases[0], pm.biases[1], pm.biases[2][cols]], pm.activations, cs.heads(), seed)
    return cm, pm, cs, ps

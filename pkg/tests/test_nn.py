import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from olgclear import nn
from olgclear.economy.multi import MultiAssetConfig
from olgclear.economy.single import SingleAssetConfig


def hand_count(dims):
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@pytest.mark.parametrize("dims, expected", [((21, 400, 400, 41), 185_641), ((161, 400, 400, 158), 288_558)])
def test_parameter_counts(dims, expected):
    params = nn.init_mlp(dims, [nn.Head("out", dims[-1])])
    assert params.size == expected == hand_count(dims)


def test_economy_widths_match_architectures():
    single = SingleAssetConfig()
    multi = MultiAssetConfig()
    assert (single.input_dim, single.output_dim) == (21, 41)
    assert (multi.input_dim, multi.output_dim) == (161, 158)
    assert sum(h.width for h in single.heads()) == 41
    assert sum(h.width for h in multi.heads()) == 158


def test_init_is_reproducible():
    a = nn.init_mlp((2, 3), [nn.Head("y", 3)], seed=11)
    b = nn.init_mlp((2, 3), [nn.Head("y", 3)], seed=11)
    assert a.flat().tobytes() == b.flat().tobytes()
    assert not np.array_equal(a.flat(), nn.init_mlp((2, 3), [nn.Head("y", 3)], seed=12).flat())


def test_init_scale_and_zero_biases():
    p = nn.init_mlp((200, 300, 5), [nn.Head("y", 5)], seed=0)
    assert np.var(p.weights[0]) == pytest.approx(1 / 200, rel=0.05)
    assert np.var(p.weights[1]) == pytest.approx(2 / 300, rel=0.1)
    assert all(not b.any() for b in p.biases)


def test_head_mismatch_reports_widths():
    with pytest.raises(ValueError, match="covers 4 outputs but the network has 5"):
        nn.init_mlp((3, 5), [nn.Head("a", 2), nn.Head("b", 2)])


def test_bad_layer_chain_rejected():
    with pytest.raises(ValueError, match="does not chain"):
        nn.MlpParams([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)],
                     ["relu", "identity"], [nn.Head("y", 1)])


def test_zero_network_gives_softplus_of_zero_prices():
    cfg = SingleAssetConfig(H=4)
    p = nn.init_mlp([cfg.input_dim, 8, cfg.output_dim], cfg.heads())
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    out = nn.forward(p, np.random.default_rng(0).normal(size=(5, cfg.input_dim)))
    for name in ("p_b", "p_r"):
        np.testing.assert_allclose(out[name], np.log(2.0))


def test_output_shapes():
    single = SingleAssetConfig()
    p = nn.init_mlp([single.input_dim, 16, single.output_dim], single.heads())
    out = nn.forward(p, single_states := np.ones((8192, single.input_dim)))
    assert sum(v.shape[1] for v in out.values()) == 41
    assert all(v.shape[0] == single_states.shape[0] for v in out.values())
    multi = MultiAssetConfig()
    q = nn.init_mlp([multi.input_dim, 16, multi.output_dim], multi.heads())
    out = nn.forward(q, np.ones((3, multi.input_dim)))
    assert sum(v.shape[1] for v in out.values()) == 158


def test_forward_rejects_wrong_width():
    p = nn.init_mlp((3, 2), [nn.Head("y", 2)])
    with pytest.raises(ValueError, match="expects 3"):
        nn.forward(p, np.ones((4, 5)))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
def test_softplus_heads_are_positive_and_forward_is_pure(x):
    heads = [nn.Head("policy", 2), nn.Head("price", 1, "softplus")]
    p = nn.init_mlp((3, 7, 3), heads, seed=3)
    a = nn.forward(p, x)
    b = nn.forward(p, x)
    assert np.all(a["price"] > 0)
    assert a["policy"].tobytes() == b["policy"].tobytes()


# --- zero_nans ---------------------------------------------------------------

def test_zero_nans_examples():
    (g,) = nn.zero_nans([np.array([1.0, np.nan, -2.0])])
    np.testing.assert_array_equal(g, [1.0, 0.0, -2.0])
    (g,) = nn.zero_nans([np.array([0.5, -3.0])])
    np.testing.assert_array_equal(g, [0.5, -3.0])
    (g,) = nn.zero_nans([np.full(4, np.nan)])
    np.testing.assert_array_equal(g, np.zeros(4))


def test_zero_nans_keeps_infinities():
    (g,) = nn.zero_nans([np.array([np.inf, -np.inf, np.nan])])
    np.testing.assert_array_equal(g, [np.inf, -np.inf, 0.0])


# --- Adam ----------------------------------------------------------------------

def small_params(seed=0):
    return nn.init_mlp((3, 4, 2), [nn.Head("y", 2)], seed=seed)


def test_first_adam_step_moves_by_lr_times_sign():
    p = small_params()
    state = nn.AdamState.for_params(p, lr=1e-3)
    grads = [np.random.default_rng(1).normal(size=a.shape) for a in p.arrays()]
    state, q = nn.adam_step(state, p, grads)
    for a, b, g in zip(p.arrays(), q.arrays(), grads):
        np.testing.assert_allclose(b - a, -1e-3 * np.sign(g), rtol=1e-6)
    assert state.step == 1


def test_zero_gradient_is_a_fixed_point():
    p = small_params()
    state = nn.AdamState.for_params(p)
    for _ in range(3):
        state, p2 = nn.adam_step(state, p, [np.zeros_like(a) for a in p.arrays()])
        assert p2.flat().tobytes() == p.flat().tobytes()


def test_adam_is_deterministic():
    p = small_params()
    grads = [np.full(a.shape, 0.3) for a in p.arrays()]
    s0 = nn.AdamState.for_params(p)
    _, a = nn.adam_step(s0, p, grads)
    _, b = nn.adam_step(s0, p, grads)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_adam_shape_mismatch():
    p = small_params()
    with pytest.raises(ValueError):
        nn.adam_step(nn.AdamState.for_params(p), p, [np.zeros(1)])


def test_reset_adam():
    p = small_params()
    state = nn.AdamState.for_params(p, lr=5e-4)
    state, _ = nn.adam_step(state, p, [np.ones_like(a) for a in p.arrays()])
    once = nn.reset_adam(state)
    twice = nn.reset_adam(once)
    assert once.step == 0 and once.lr == 5e-4
    assert all(not m.any() for m in once.m + once.v)
    assert all(np.array_equal(x, y) for x, y in zip(once.m + once.v, twice.m + twice.v))


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    p = small_params(seed=5)
    state = nn.AdamState.for_params(p, lr=2e-4)
    state, p = nn.adam_step(state, p, [np.ones_like(a) for a in p.arrays()])
    stage = {"label": "stock-03", "supplies": {"S": 0.3}}
    nn.save_checkpoint(tmp_path / "ck.bin", p, state, stage=stage)
    ck = nn.load_checkpoint(tmp_path / "ck.bin", expect_dims=[3, 4, 2])
    assert ck.params.flat().tobytes() == p.flat().tobytes()
    assert ck.params.heads == p.heads and ck.params.seed == 5
    assert ck.stage == stage
    assert ck.adam.step == 1 and ck.adam.lr == 2e-4
    assert all(np.array_equal(a, b) for a, b in zip(ck.adam.v, state.v))


def test_checkpoint_payload_layout(tmp_path):
    p = small_params()
    nn.save_checkpoint(tmp_path / "ck.bin", p)
    data = (tmp_path / "ck.bin").read_bytes()
    assert data[:8] == nn.CKPT_MAGIC
    payload = np.frombuffer(data[-8 * p.size:], dtype="<f8")
    np.testing.assert_array_equal(payload, p.flat())


def test_truncated_checkpoint(tmp_path):
    nn.save_checkpoint(tmp_path / "ck.bin", small_params())
    data = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-5])
    with pytest.raises(nn.CheckpointError, match="byte offset"):
        nn.load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "tiny.bin").write_bytes(data[:6])
    with pytest.raises(nn.CheckpointError, match="byte offset 6"):
        nn.load_checkpoint(tmp_path / "tiny.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"NOTACKPT" + bytes(64))
    with pytest.raises(nn.CheckpointError, match="bad magic"):
        nn.load_checkpoint(tmp_path / "junk.bin")


def test_dims_mismatch(tmp_path):
    nn.save_checkpoint(tmp_path / "ck.bin", small_params())
    with pytest.raises(nn.CheckpointError, match="do not match"):
        nn.load_checkpoint(tmp_path / "ck.bin", expect_dims=[3, 5, 2])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olgclear import autodiff as ad
from olgclear import clearing, oracles


def grad(f, *xs):
    _, tape = ad.record_and_eval(f, *xs)
    return ad.backward(tape)


# --- record_and_eval / backward examples -----------------------------------

def test_square_value_and_tape():
    value, tape = ad.record_and_eval(lambda x: x * x, 3.0)
    assert float(value) == 9.0
    ops = [n.op for n in tape.nodes if n.op != "leaf"]
    assert ops == ["mul"]
    assert float(ad.backward(tape)[0]) == 6.0


def test_relu_negative():
    value, _ = ad.record_and_eval(ad.relu, -2.0)
    assert float(value) == 0.0


def test_softplus_zero():
    value, _ = ad.record_and_eval(ad.softplus, 0.0)
    assert float(value) == pytest.approx(0.693147, abs=1e-6)


def test_product_rule():
    gx, gy = grad(lambda x, y: x * y, 2.0, 5.0)
    assert (float(gx), float(gy)) == (5.0, 2.0)


def test_softplus_sum_gradient():
    (g,) = grad(lambda w: ad.sum(ad.softplus(w)), np.zeros(2))
    np.testing.assert_allclose(g, [0.5, 0.5])


def test_unknown_primitive_fails_fast():
    with pytest.raises(ad.UnknownPrimitive, match="frobnicate"):
        ad.record_and_eval(lambda x: ad.apply("frobnicate", x), 1.0)


def test_unused_leaf_gets_zero_gradient():
    gx, gy = grad(lambda x, y: x * 2.0, np.ones(3), np.ones((2, 2)))
    np.testing.assert_array_equal(gx, 2.0 * np.ones(3))
    np.testing.assert_array_equal(gy, np.zeros((2, 2)))


def test_topological_order():
    _, tape = ad.record_and_eval(lambda x: ad.exp(x * x + x), np.ones(2))
    for i, node in enumerate(tape.nodes):
        assert all(p < i for p in node.parents)


def test_custom_vjp_replaces_chain_rule():
    # forward is the identity but the declared backward rule triples gradients
    def f(x):
        return ad.custom_vjp(lambda v: (v, None), lambda _, g: (3.0 * g,), x)

    (g,) = grad(lambda x: ad.sum(f(x)), np.ones(4))
    np.testing.assert_array_equal(g, 3.0 * np.ones(4))


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grad(lambda x: ad.sum(ad.relu(x)), np.zeros(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_max_tie_goes_to_first_argument():
    gx, gy = grad(lambda x, y: ad.sum(ad.maximum(x, y)), np.ones(2), np.ones(2))
    np.testing.assert_array_equal(gx, np.ones(2))
    np.testing.assert_array_equal(gy, np.zeros(2))


def test_plain_arrays_evaluate_without_tape():
    out = ad.exp(np.zeros(3)) + 1.0
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, 2.0 * np.ones(3))


# --- every primitive against central differences ----------------------------

rng = np.random.default_rng(1234)


def away_from_zero(shape):
    x = rng.uniform(0.2, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


PRIMITIVE_CASES = {
    "add": (lambda x, y: ad.sum(ad.add(x, y) ** 2), [rng.normal(size=(3, 2)), rng.normal(size=(2,))]),
    "sub": (lambda x, y: ad.sum(ad.sub(x, y) ** 2), [rng.normal(size=(3, 2)), rng.normal(size=(3, 1))]),
    "mul": (lambda x, y: ad.sum(ad.mul(x, y)), [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))]),
    "div": (lambda x, y: ad.sum(ad.div(x, y)), [rng.normal(size=(3,)), rng.uniform(0.5, 2, (3,))]),
    "neg": (lambda x: ad.sum(ad.neg(x) * x), [rng.normal(size=4)]),
    "reciprocal": (lambda x: ad.sum(ad.reciprocal(x)), [rng.uniform(0.5, 2, 4)]),
    "power": (lambda x: ad.sum(ad.power(x, -1.7)), [rng.uniform(0.5, 2, 4)]),
    "exp": (lambda x: ad.sum(ad.exp(x)), [rng.normal(size=4)]),
    "log": (lambda x: ad.sum(ad.log(x)), [rng.uniform(0.5, 2, 4)]),
    "sqrt": (lambda x: ad.sum(ad.sqrt(x)), [rng.uniform(0.5, 2, 4)]),
    "relu": (lambda x: ad.sum(ad.relu(x) * x), [away_from_zero(5)]),
    "softplus": (lambda x: ad.sum(ad.softplus(x)), [rng.normal(size=5) * 3]),
    "maximum": (lambda x, y: ad.sum(ad.maximum(x, y) ** 2), [away_from_zero(5), np.zeros(5) + 0.05]),
    "sum": (lambda x: ad.sum(ad.sum(x, axis=0) ** 2), [rng.normal(size=(3, 2))]),
    "matmul": (lambda x, y: ad.sum(ad.matmul(x, y) ** 2), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "reshape": (lambda x: ad.sum(ad.reshape(x, (2, 3)) * np.arange(6.0).reshape(2, 3)), [rng.normal(size=6)]),
    "transpose": (lambda x: ad.sum(ad.transpose(x) * np.arange(6.0).reshape(3, 2)), [rng.normal(size=(2, 3))]),
    "broadcast_to": (lambda x: ad.sum(ad.broadcast_to(x, (4, 3)) ** 2), [rng.normal(size=(1, 3))]),
    "getitem": (lambda x: ad.sum(x[np.array([0, 2, 2])] ** 2), [rng.normal(size=4)]),
    "concat": (lambda x, y: ad.sum(ad.concat([x, y], axis=1) ** 3), [rng.normal(size=(2, 2)), rng.normal(size=(2, 1))]),
}


def test_every_primitive_is_covered():
    assert set(ad.PRIMITIVES) - {"custom"} == set(PRIMITIVE_CASES)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_vjp_matches_finite_differences(name):
    f, inputs = PRIMITIVE_CASES[name]
    rep = ad.gradcheck(f, inputs, tolerance=1e-6)
    assert rep.max_rel_err <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(-2, 2), st.floats(-2, 2))
def test_linearity_of_gradients(xs, a, b):
    x = np.array(xs)
    f = lambda v: ad.sum(ad.exp(v) * v)
    g = lambda v: ad.sum(ad.softplus(v) ** 2)
    (gf,) = grad(f, x)
    (gg,) = grad(g, x)
    (gc,) = grad(lambda v: a * f(v) + b * g(v), x)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_gradients_are_deterministic():
    W = rng.normal(size=(5, 7))
    f = lambda w: ad.sum(ad.relu(ad.matmul(np.ones((3, 5)), w)) ** 2)
    (g1,) = grad(f, W)
    (g2,) = grad(f, W)
    assert g1.tobytes() == g2.tobytes()


# --- gradcheck --------------------------------------------------------------

def test_gradcheck_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    rep = ad.gradcheck(lambda x: ad.sum(x * ad.matmul(A, x)), [np.array([0.4, -0.7])], tolerance=1e-9)
    assert rep.max_rel_err < 1e-9


def test_gradcheck_small_mlp():
    r = np.random.default_rng(0)
    x = r.normal(size=(6, 3))
    W1, b1, W2, b2 = r.normal(size=(3, 4)), r.normal(size=4), r.normal(size=(4, 1)), r.normal(size=1)

    def mlp(W1, b1, W2, b2):
        return ad.sum(ad.matmul(ad.relu(ad.matmul(x, W1) + b1), W2) + b2)

    rep = ad.gradcheck(mlp, [W1, b1, W2, b2], tolerance=1e-6)
    assert rep.max_rel_err < 1e-6
    # the analytic gradient agrees with the independent finite-difference oracle too
    fd = oracles.fd_gradient(lambda w: float(mlp(w, b1, W2, b2)), W1)
    np.testing.assert_allclose(rep.analytic[0], fd, rtol=1e-6, atol=1e-8)


def test_gradcheck_through_bounded_projection():
    mu = np.array([0.5, 1.0, 0.7, 1.2])
    target = np.array([0.3, -0.2, 0.9, 0.1])
    bt = np.array([0.4, -0.8, 0.6, 0.2])  # agent 1 strictly clamped at 0

    def f(bt):
        b, _ = clearing.clear_project(bt, mu, 0.5, 0.0)
        return ad.sum((b - target) ** 2 * mu)

    res = clearing.project_with_bounds(mu, bt, 0.5, 0.0)
    assert list(res.active_set) == [1]
    rep = ad.gradcheck(f, [bt], tolerance=1e-6)
    assert rep.max_rel_err < 1e-6


def test_gradcheck_reports_worst_component():
    def wrong(x):
        # forward x^2 but a backward rule that is off by a factor 2
        return ad.sum(ad.custom_vjp(lambda v: (v * v, v), lambda v, g: (g * v,), x))

    with pytest.raises(ad.GradcheckFailure) as exc:
        ad.gradcheck(wrong, [np.array([1.0, 3.0])])
    assert exc.value.report.worst_input == 0
    assert "analytic" in str(exc.value)

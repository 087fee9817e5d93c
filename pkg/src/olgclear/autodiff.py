"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation is a registered primitive: a forward rule
returning the output value together with a vector-Jacobian product (VJP)
closure.  Applying a primitive to at least one :class:`Var` records a node
on that variable's :class:`Tape`; applying it to plain arrays simply
evaluates the forward rule, so model code can be written once and run
either with or without a tape.

    >>> value, tape = record_and_eval(lambda x: x * x, 3.0)
    >>> float(value), [float(g) for g in backward(tape)]
    (9.0, [6.0])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Var", "Tape", "UnknownPrimitive", "GradcheckFailure", "GradcheckReport",
    "PRIMITIVES", "primitive", "apply", "custom_vjp", "record_and_eval",
    "backward", "gradcheck",
    "add", "sub", "mul", "div", "neg", "matmul", "power", "exp", "log",
    "sqrt", "relu", "softplus", "maximum", "reciprocal", "sum", "mean",
    "reshape", "broadcast_to", "getitem", "concat", "transpose",
]


class UnknownPrimitive(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unregistered primitive {self.name!r}"


@dataclass(slots=True)
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    # parent slot -> position in the vjp output tuple
    slots: tuple[int, ...] = ()
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as they are evaluated, so inputs always precede
    the nodes that consume them.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.output: int | None = None

    def leaf(self, value: Any) -> "Var":
        arr = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), arr))
        idx = len(self.nodes) - 1
        self.leaves.append(idx)
        return Var(self, idx)

    def _record(self, op, parents, slots, value, vjp) -> "Var":
        self.nodes.append(Node(op, tuple(parents), value, tuple(slots), vjp))
        return Var(self, len(self.nodes) - 1)

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, node={self.index})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return sum(self, axis=axis, keepdims=keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis=axis, keepdims=keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self): return transpose(self)


# ---------------------------------------------------------------------------
# registry

@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Callable]]
    n_inputs: int | None = None  # None: variadic


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, n_inputs: int | None = None):
    """Register ``fn(*values, **kw) -> (out, vjp)`` under ``name``."""
    def deco(fn):
        PRIMITIVES[name] = Primitive(name, fn, n_inputs)
        return fn
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def apply(name: str, *args, **kw):
    """Evaluate primitive ``name``; record it if any argument is a Var."""
    try:
        prim = PRIMITIVES[name]
    except KeyError:
        raise UnknownPrimitive(name) from None
    tape = None
    vals = []
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError(f"{name}: inputs recorded on different tapes")
            vals.append(a.value)
        else:
            vals.append(a if isinstance(a, np.ndarray) else np.asarray(a, dtype=np.float64))
    out, vjp = prim.forward(*vals, **kw)
    if tape is None:
        return out
    parents, slots = [], []
    for i, a in enumerate(args):
        if isinstance(a, Var):
            parents.append(a.index)
            slots.append(i)
    return tape._record(name, parents, slots, out, vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting; gradients are unbroadcast in backward)

@primitive("add", 2)
def _add(x, y):
    return x + y, lambda g: (g, g)


@primitive("sub", 2)
def _sub(x, y):
    return x - y, lambda g: (g, -g)


@primitive("mul", 2)
def _mul(x, y):
    return x * y, lambda g: (g * y, g * x)


@primitive("div", 2)
def _div(x, y):
    out = x / y
    return out, lambda g: (g / y, -g * out / y)


@primitive("neg", 1)
def _neg(x):
    return -x, lambda g: (-g,)


@primitive("reciprocal", 1)
def _reciprocal(x):
    out = 1.0 / x
    return out, lambda g: (-g * out * out,)


@primitive("power", 2)
def _power(x, p):
    # p is treated as a constant exponent
    out = x ** p
    return out, lambda g: (g * p * x ** (p - 1.0), None)


@primitive("exp", 1)
def _exp(x):
    out = np.exp(x)
    return out, lambda g: (g * out,)


@primitive("log", 1)
def _log(x):
    return np.log(x), lambda g: (g / x,)


@primitive("sqrt", 1)
def _sqrt(x):
    out = np.sqrt(x)
    return out, lambda g: (g * 0.5 / out,)


@primitive("relu", 1)
def _relu(x):
    pos = x > 0.0
    return np.maximum(x, 0.0), lambda g: (g * pos,)


@primitive("softplus", 1)
def _softplus(x):
    out = np.logaddexp(0.0, x)
    def vjp(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)
    return out, vjp


@primitive("maximum", 2)
def _maximum(x, y):
    # ties go to the first argument; NaN in either input propagates
    first = x >= y
    return np.maximum(x, y), lambda g: (g * first, g * ~first)


# ---------------------------------------------------------------------------
# reductions and structural ops

@primitive("sum", 1)
def _sum(x, axis=None, keepdims=False):
    out = np.sum(x, axis=axis, keepdims=keepdims)
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)
    return out, vjp


@primitive("matmul", 2)
def _matmul(x, y):
    def vjp(g):
        if x.ndim == 1 and y.ndim == 1:
            return g * y, g * x
        if x.ndim == 1:
            return g @ y.T, np.outer(x, g)
        if y.ndim == 1:
            return np.outer(g, y), x.T @ g
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g
    return x @ y, vjp


@primitive("reshape", 1)
def _reshape(x, shape=None):
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


@primitive("transpose", 1)
def _transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return np.transpose(x, axes), lambda g: (np.transpose(g, inv),)


@primitive("broadcast_to", 1)
def _broadcast_to(x, shape=None):
    # _unbroadcast in backward handles the reduction
    return np.broadcast_to(x, shape), lambda g: (g,)


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in keys)


@primitive("getitem", 1)
def _getitem(x, key=None):
    basic = _is_basic_index(key)
    def vjp(g):
        out = np.zeros_like(x)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)
    return x[key], vjp


@primitive("concat")
def _concat(*xs, axis=0):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))
    return np.concatenate(xs, axis=axis), vjp


@primitive("custom")
def _custom(*xs, fwd=None, bwd=None, label=None):
    out, residuals = fwd(*xs)
    return out, lambda g: bwd(residuals, g)


# ---------------------------------------------------------------------------
# public functional API

def add(x, y): return apply("add", x, y)
def sub(x, y): return apply("sub", x, y)
def mul(x, y): return apply("mul", x, y)
def div(x, y): return apply("div", x, y)
def neg(x): return apply("neg", x)
def reciprocal(x): return apply("reciprocal", x)
def matmul(x, y): return apply("matmul", x, y)
def power(x, p): return apply("power", x, p)
def exp(x): return apply("exp", x)
def log(x): return apply("log", x)
def sqrt(x): return apply("sqrt", x)
def relu(x): return apply("relu", x)
def softplus(x): return apply("softplus", x)
def maximum(x, y): return apply("maximum", x, y)
def sum(x, axis=None, keepdims=False): return apply("sum", x, axis=axis, keepdims=keepdims)
def reshape(x, shape): return apply("reshape", x, shape=tuple(shape))
def transpose(x, axes=None): return apply("transpose", x, axes=axes)
def broadcast_to(x, shape): return apply("broadcast_to", x, shape=tuple(shape))
def getitem(x, key): return apply("getitem", x, key=key)


def concat(xs, axis=0):
    return apply("concat", *xs, axis=axis)


def mean(x, axis=None, keepdims=False):
    shape = x.shape if isinstance(x, Var) else np.shape(x)
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def custom_vjp(fwd, bwd, *args, name: str = "custom"):
    """Apply an operation whose backward rule replaces the chain rule.

    ``fwd(*values) -> (out, residuals)``; ``bwd(residuals, g)`` returns one
    gradient (or None) per argument.
    """
    return apply("custom", *args, fwd=fwd, bwd=bwd, label=name)


# ---------------------------------------------------------------------------
# driving

def record_and_eval(program: Callable[..., Any], *inputs) -> tuple[np.ndarray, Tape]:
    """Run ``program`` on fresh leaves for ``inputs``; return value and tape."""
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    out = program(*leaves)
    if not isinstance(out, Var):
        # program ignored its inputs; keep a constant output node
        out = tape._record("const", (), (), np.asarray(out, dtype=np.float64), None)
    tape.output = out.index
    return out.value, tape


def backward(tape: Tape, seed: float | np.ndarray = 1.0, output: Var | None = None) -> list[np.ndarray]:
    """Gradients of the recorded output with respect to every leaf, in leaf order."""
    out_idx = output.index if output is not None else tape.output
    if out_idx is None:
        raise ValueError("tape has no output; pass output=")
    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * len(nodes)
    adj[out_idx] = np.broadcast_to(np.asarray(seed, dtype=np.float64), nodes[out_idx].value.shape).copy()
    for i in range(out_idx, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        grads = node.vjp(g)
        for p, slot in zip(node.parents, node.slots):
            gp = grads[slot]
            if gp is None:
                continue
            gp = _unbroadcast(np.asarray(gp, dtype=np.float64), nodes[p].value.shape)
            if adj[p] is None:
                adj[p] = np.array(gp, dtype=np.float64, copy=True)
            else:
                adj[p] += gp
    return [adj[i] if adj[i] is not None else np.zeros_like(nodes[i].value) for i in tape.leaves]


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_err))


class GradcheckFailure(AssertionError):
    def __init__(self, report: GradcheckReport, tolerance: float):
        self.report = report
        i, j = report.worst_input, report.worst_index
        a = report.analytic[i][j]
        n = report.numeric[i][j]
        super().__init__(
            f"max relative error {report.max_rel_err:.3e} > {tolerance:.1e} "
            f"at input {i} index {j}: analytic {a:.12g} vs numeric {n:.12g}"
        )


def rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(program: Callable[..., Any], inputs: Sequence[Any], step: float = 1e-6,
              tolerance: float = 1e-6, floor: float | None = None,
              raise_on_failure: bool = True) -> GradcheckReport:
    """Compare reverse-mode gradients of a scalar program to central differences.

    Relative errors are taken componentwise with denominator
    ``max(|analytic|, |numeric|, floor)``; ``floor`` defaults to
    ``1e-6 * max(1, largest gradient magnitude)`` so that components that are
    zero up to rounding do not dominate the report.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    value, tape = record_and_eval(program, *inputs)
    if np.size(value) != 1:
        raise ValueError("gradcheck needs a scalar program")
    analytic = backward(tape)

    def f(*xs):
        return float(np.asarray(program(*xs)))

    numeric = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        for j in np.ndindex(x.shape):
            xp = [y.copy() for y in inputs]
            xm = [y.copy() for y in inputs]
            xp[i][j] += step
            xm[i][j] -= step
            g[j] = (f(*xp) - f(*xm)) / (2.0 * step)
        numeric.append(g)

    if floor is None:
        scale = max([1.0] + [float(np.max(np.abs(g))) for g in analytic if g.size])
        floor = 1e-6 * scale
    worst, wi, wj = -1.0, 0, ()
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        if a.size == 0:
            continue
        e = rel_err(a, n, floor)
        e = np.where(np.isnan(e), np.inf, e)
        j = np.unravel_index(int(np.argmax(e)), e.shape)
        if e[j] > worst:
            worst, wi, wj = float(e[j]), i, tuple(int(k) for k in j)
    report = GradcheckReport(worst, wi, wj, analytic, numeric)
    if raise_on_failure and not worst <= tolerance:
        raise GradcheckFailure(report, tolerance)
    return report

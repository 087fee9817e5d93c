"""Dense policy/price network, Adam, and the binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import autodiff as ad

HIDDEN_ACTIVATIONS = ("relu", "identity")
HEAD_ACTIVATIONS = ("identity", "softplus")

CKPT_MAGIC = b"OLGCKPT\x01"


class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        if offset is not None:
            msg = f"{msg} (byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


@dataclass(frozen=True)
class Head:
    name: str
    width: int
    activation: str = "identity"


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    heads: list[Head]
    seed: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have one entry per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} does not chain "
                                 f"with previous output {self.weights[i - 1].shape[1]}")
        for a in self.activations:
            if a not in HIDDEN_ACTIVATIONS:
                raise ValueError(f"unknown layer activation {a!r}")
        check_heads(self.heads, self.dims[-1])

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "MlpParams":
        arrays = list(arrays)
        return replace(self, weights=[np.asarray(a) for a in arrays[0::2]],
                       biases=[np.asarray(a) for a in arrays[1::2]])

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "MlpParams":
        out, k = [], 0
        for a in self.arrays():
            out.append(np.array(vec[k:k + a.size]).reshape(a.shape))
            k += a.size
        return self.with_arrays(out)


def check_heads(heads: Sequence[Head], width: int) -> None:
    declared = 0
    names = set()
    for h in heads:
        if h.activation not in HEAD_ACTIVATIONS:
            raise ValueError(f"head {h.name!r}: unknown activation {h.activation!r}")
        if h.width < 1:
            raise ValueError(f"head {h.name!r}: width must be positive")
        if h.name in names:
            raise ValueError(f"duplicate head {h.name!r}")
        names.add(h.name)
        declared += h.width
    if declared != width:
        raise ValueError(f"head spec covers {declared} outputs but the network has {width}")


def init_mlp(dims: Sequence[int], heads: Sequence[Head], seed: int = 0,
             hidden_activation: str = "relu") -> MlpParams:
    """Variance-scaled Gaussian weights, zero biases.

    The variance is 2/fan_in for layers fed by relu units and 1/fan_in
    otherwise.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    heads = list(heads)
    check_heads(heads, dims[-1])
    rng = np.random.default_rng(seed)
    weights, biases, acts = [], [], []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in = dims[i]
        gain = 2.0 if (i > 0 and hidden_activation == "relu") else 1.0
        weights.append(rng.standard_normal((fan_in, dims[i + 1])) * np.sqrt(gain / fan_in))
        biases.append(np.zeros(dims[i + 1]))
        acts.append(hidden_activation if i < n_layers - 1 else "identity")
    return MlpParams(weights, biases, acts, heads, seed)


def forward(params: MlpParams, x, arrays: Sequence[Any] | None = None) -> dict[str, Any]:
    """Evaluate the network and split the output into named heads.

    ``arrays`` optionally replaces the stored parameters (e.g. with tape
    variables) in :meth:`MlpParams.arrays` order.
    """
    if arrays is None:
        arrays = params.arrays()
    n_in = params.weights[0].shape[0]
    if x.shape[-1] != n_in:
        raise ValueError(f"batch has {x.shape[-1]} columns, network expects {n_in}")
    h = x
    for k, act in enumerate(params.activations):
        h = ad.matmul(h, arrays[2 * k]) + arrays[2 * k + 1]
        if act == "relu":
            h = ad.relu(h)
    out, start = {}, 0
    for head in params.heads:
        piece = ad.getitem(h, (Ellipsis, slice(start, start + head.width)))
        if head.activation == "softplus":
            piece = ad.softplus(piece)
        out[head.name] = piece
        start += head.width
    return out


def zero_nans(grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Replace NaN entries by 0. Infinities are left alone."""
    return [np.where(np.isnan(g), 0.0, g) for g in grads]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs],
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: MlpParams, grads: Sequence[np.ndarray]) -> tuple[AdamState, MlpParams]:
    arrs = params.arrays()
    if len(grads) != len(arrs) or any(g.shape != a.shape for g, a in zip(grads, arrs)):
        raise ValueError("gradient shapes do not match parameters")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, new_p = [], [], []
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(a - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return replace(state, m=new_m, v=new_v, step=t), params.with_arrays(new_p)


def reset_adam(state: AdamState) -> AdamState:
    return replace(state, m=[np.zeros_like(m) for m in state.m],
                   v=[np.zeros_like(v) for v in state.v], step=0)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: 8-byte magic | uint64 LE header length | JSON header | float64 LE payload
# payload: parameters layer by layer (weights row-major, then bias), followed
# by Adam first and second moments in the same order when present.

def save_checkpoint(path: str | Path, params: MlpParams, adam: AdamState | None = None,
                    stage: Mapping[str, Any] | None = None,
                    extra: Mapping[str, Any] | None = None) -> None:
    param_bytes = params.size * 8
    header: dict[str, Any] = {
        "format": 1,
        "dims": params.dims,
        "activations": list(params.activations),
        "heads": [{"name": h.name, "width": h.width, "activation": h.activation} for h in params.heads],
        "seed": params.seed,
        "stage": dict(stage) if stage is not None else None,
        "param_count": params.size,
        "param_bytes": param_bytes,
        "adam": None,
        "extra": dict(extra) if extra else {},
    }
    chunks = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    if adam is not None:
        header["adam"] = {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                          "beta2": adam.beta2, "eps": adam.eps, "moment_bytes": 2 * param_bytes}
        chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in adam.m]
        chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in adam.v]
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for c in chunks:
            fh.write(c)


@dataclass
class Checkpoint:
    params: MlpParams
    adam: AdamState | None
    stage: dict[str, Any] | None
    extra: dict[str, Any] = field(default_factory=dict)


def load_checkpoint(path: str | Path, expect_dims: Sequence[int] | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointError("file too short for checkpoint preamble", len(data))
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic", 0)
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"header declares {hlen} bytes but file ends early", len(data))
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}", 16) from None
    dims = header["dims"]
    if expect_dims is not None and list(expect_dims) != list(dims):
        raise CheckpointError(f"checkpoint dims {dims} do not match configured dims {list(expect_dims)}")
    off = 16 + hlen
    need = header["param_bytes"] + (header["adam"]["moment_bytes"] if header["adam"] else 0)
    if len(data) - off != need:
        raise CheckpointError(f"payload has {len(data) - off} bytes, header declares {need}",
                              min(len(data), off + need))

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
        return arr

    shapes = []
    for i in range(len(dims) - 1):
        shapes += [(dims[i], dims[i + 1]), (dims[i + 1],)]
    arrays = [take(s) for s in shapes]
    heads = [Head(h["name"], h["width"], h["activation"]) for h in header["heads"]]
    params = MlpParams(arrays[0::2], arrays[1::2], header["activations"], heads, header["seed"])
    adam = None
    if header["adam"]:
        a = header["adam"]
        m = [take(s) for s in shapes]
        v = [take(s) for s in shapes]
        adam = AdamState(m, v, a["step"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(params, adam, header["stage"], header.get("extra", {}))

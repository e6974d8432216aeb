"""Feature encoders with hand-written backward passes.

Inputs may be a single vector of shape (L,) or a batch of shape (B, L).
Parameter gradients from a batch backward are summed over the batch.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numerics import Rng

ACTIVATIONS = ("relu", "tanh")
_versions = itertools.count(1)


@dataclass
class ForwardTape:
    owner: int
    version: int
    inputs: list  # input to each linear layer
    pre: list  # pre-activation of each layer
    batched: bool
    rows: int


@dataclass
class EncoderGrads:
    weights: list
    biases: list
    input_grad: np.ndarray

    def scaled(self, c: float) -> "EncoderGrads":
        return EncoderGrads(
            [w * c for w in self.weights], [b * c for b in self.biases], self.input_grad * c
        )

    def flat(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        return np.concatenate(parts) if parts else np.zeros(0)


def accumulate(a: EncoderGrads, b: EncoderGrads) -> EncoderGrads:
    if len(a.weights) != len(b.weights) or any(
        x.shape != y.shape for x, y in zip(a.weights + a.biases, b.weights + b.biases)
    ):
        raise ContractError("gradient shapes do not match")
    if a.input_grad.shape != b.input_grad.shape:
        raise ContractError("input gradient shapes do not match")
    return EncoderGrads(
        [x + y for x, y in zip(a.weights, b.weights)],
        [x + y for x, y in zip(a.biases, b.biases)],
        a.input_grad + b.input_grad,
    )


@dataclass
class MlpEncoder:
    """Fully connected net; ``weights[i]`` has shape (dims[i], dims[i+1]), so y = x @ W + b."""

    layer_dims: list
    activation: str
    weights: list
    biases: list
    uid: int = field(default_factory=lambda: next(_versions))
    version: int = 0

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ContractError(f"layer_dims needs >= 2 positive entries, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ContractError("wrong number of weight/bias arrays")
        for i in range(n):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            self.weights[i] = np.array(self.weights[i], dtype=np.float64).reshape(shape)
            self.biases[i] = np.array(self.biases[i], dtype=np.float64).reshape(shape[1])

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def _act(self, a):
        return np.maximum(a, 0.0) if self.activation == "relu" else np.tanh(a)

    def _act_grad(self, a, out):
        if self.activation == "relu":
            # subgradient at 0 is 0
            return (a > 0.0).astype(np.float64)
        return 1.0 - out * out

    def forward(self, x):
        h, batched = _check_input(x, self.in_dim)
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w + b
            pre.append(a)
            h = a if i == last else self._act(a)
        tape = ForwardTape(self.uid, self.version, inputs, pre, batched, h.shape[0])
        return (h if batched else h[0]), tape

    def backward(self, tape: ForwardTape, grad_out) -> EncoderGrads:
        _check_tape(self, tape)
        g = _check_grad_out(grad_out, self.out_dim, tape)
        n = len(self.weights)
        gw, gb = [None] * n, [None] * n
        for i in reversed(range(n)):
            if i != n - 1:
                a = tape.pre[i]
                g = g * self._act_grad(a, self._act(a))
            gw[i] = tape.inputs[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return EncoderGrads(gw, gb, g if tape.batched else g[0])

    def zero_grads(self, batch: int | None = None) -> EncoderGrads:
        shape = (self.in_dim,) if batch is None else (batch, self.in_dim)
        return EncoderGrads(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            np.zeros(shape),
        )

    def params(self) -> list:
        return self.weights + self.biases

    def mark_updated(self):
        self.version += 1

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ContractError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for p in self.params():
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        self.mark_updated()

    def copy(self) -> "MlpEncoder":
        return MlpEncoder(
            list(self.layer_dims),
            self.activation,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }


@dataclass
class IdentityEncoder:
    """f(x) = x. Has no parameters; used to test prototype math exactly."""

    dim: int
    uid: int = field(default_factory=lambda: next(_versions))
    version: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError("dim must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.dim

    @property
    def out_dim(self) -> int:
        return self.dim

    @property
    def layer_dims(self) -> list:
        return [self.dim, self.dim]

    n_params = 0
    weights: list = field(default_factory=list, init=False)
    biases: list = field(default_factory=list, init=False)

    def forward(self, x):
        h, batched = _check_input(x, self.dim)
        tape = ForwardTape(self.uid, self.version, [], [], batched, h.shape[0])
        return (h.copy() if batched else h[0].copy()), tape

    def backward(self, tape: ForwardTape, grad_out) -> EncoderGrads:
        _check_tape(self, tape)
        g = _check_grad_out(grad_out, self.dim, tape)
        return EncoderGrads([], [], g.copy() if tape.batched else g[0].copy())

    def zero_grads(self, batch: int | None = None) -> EncoderGrads:
        return EncoderGrads([], [], np.zeros((self.dim,) if batch is None else (batch, self.dim)))

    def params(self) -> list:
        return []

    def mark_updated(self):
        self.version += 1

    def flat_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_flat_params(self, flat):
        if np.asarray(flat).size != 0:
            raise ContractError("identity encoder has no parameters")

    def copy(self) -> "IdentityEncoder":
        return IdentityEncoder(self.dim)

    def to_dict(self) -> dict:
        return {"kind": "identity", "dim": self.dim}


def _check_input(x, dim):
    h = np.asarray(x, dtype=np.float64)
    batched = h.ndim == 2
    if h.ndim == 1:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != dim:
        raise ContractError(f"expected input of dimension {dim}, got shape {np.shape(x)}")
    return h, batched


def _check_tape(enc, tape):
    if tape.owner != enc.uid or tape.version != enc.version:
        raise ContractError("stale or foreign forward tape")


def _check_grad_out(grad_out, dim, tape):
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (tape.rows, dim) or (not tape.batched and np.ndim(grad_out) != 1):
        raise ContractError(f"grad_out shape {np.shape(grad_out)} does not match output")
    return g


def init_mlp(layer_dims, activation: str, rng: Rng) -> MlpEncoder:
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ContractError(f"layer_dims needs >= 2 positive entries, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpEncoder(dims, activation, weights, biases)


def forward(enc, x):
    return enc.forward(x)


def backward(enc, tape, grad_out) -> EncoderGrads:
    return enc.backward(tape, grad_out)


def encoder_from_dict(d: dict):
    kind = d.get("kind", "mlp")
    if kind == "identity":
        return IdentityEncoder(int(d["dim"]))
    if kind != "mlp":
        raise ContractError(f"unknown encoder kind {kind!r}")
    return MlpEncoder(d["layer_dims"], d["activation"], list(d["weights"]), list(d["biases"]))


def embed(enc, x) -> np.ndarray:
    return enc.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))[0]

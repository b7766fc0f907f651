"""MLP layers and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor

ACTIVATIONS = ("identity", "relu", "leaky_relu", "tanh", "sigmoid")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[1] for layer in self.layers]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"{i}.weight"] = layer.weight
            params[f"{i}.bias"] = layer.bias
        return params

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def init_mlp(dims, activations, seed: int, dtype=np.float32) -> Mlp:
    """Kaiming-uniform weights, zero biases.

    ``activations`` has one entry per layer (``len(dims) - 1``); a single
    string is repeated for the hidden layers with an identity output layer.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dimensions")
    if any(d <= 0 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    activations = list(activations)
    if len(activations) != n_layers:
        raise ValueError(f"need {n_layers} activations, got {len(activations)}")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ValueError(f"unknown activation {a!r}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
    return Mlp(layers)


def _activate(h: Tensor, kind: str) -> Tensor:
    if kind == "identity":
        return h
    if kind == "leaky_relu":
        return ad.leaky_relu(h, 0.2)
    return getattr(ad, kind)(h)


def mlp_forward(net: Mlp, x: Tensor, trainable: bool = True) -> Tensor:
    """Affine + activation stack recorded on ``x``'s tape.

    With ``trainable=False`` the parameters enter the tape as constants, so
    no gradient reaches them.
    """
    if x.data.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"network expects (B, {net.in_dim}) input, got {x.shape}")
    tape = x.tape
    h = x
    for layer in net.layers:
        if trainable:
            w, b = tape.variable(layer.weight), tape.variable(layer.bias)
        else:
            w, b = tape.constant(layer.weight), tape.constant(layer.bias)
        h = _activate(ad.add_bias(ad.matmul(h, w), b), layer.activation)
    return h


def mlp_apply(net: Mlp, x: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Evaluate ``net`` on a plain array without recording gradients."""
    tape = Tape(dtype)
    return mlp_forward(net, tape.constant(x), trainable=False).numpy()


def gather_grads(tape: Tape, grads: dict[int, np.ndarray], params: dict[str, np.ndarray]):
    """Map tape gradients back to parameter names (zeros for unused ones)."""
    out = {}
    for name, p in params.items():
        leaf = tape.leaf_of(p)
        out[name] = np.zeros_like(p) if leaf is None else grads[leaf.id]
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {sorted(params)}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(
                f"gradient for {name} has shape {grads[name].shape}, parameter has {p.shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


def average_into(avg: Mlp, net: Mlp, decay: float) -> Mlp:
    """Exponential moving average ``avg <- decay * avg + (1 - decay) * net`` in place."""
    for a, p in zip(avg.parameters().values(), net.parameters().values()):
        a *= np.asarray(decay, dtype=a.dtype)
        a += np.asarray(1.0 - decay, dtype=a.dtype) * p
    return avg


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: g * np.asarray(factor, dtype=g.dtype) for k, g in grads.items()}

"""Dense networks with a recorded forward pass, exact reverse-mode gradients,
finite-difference checking and the ADAM optimizer.

Everything runs in float64.  Inputs are row-batched: ``x`` may be a single
vector of length ``in_dim`` or an array of shape ``(rows, in_dim)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, TrainingError, ValidationError

__all__ = [
    "Layer",
    "DenseNet",
    "Tape",
    "forward",
    "backward",
    "grad_check",
    "AdamState",
    "adam_step",
]

ACTIVATIONS = ("identity", "relu", "softplus")


@dataclass
class Layer:
    weights: np.ndarray       # (out, in)
    biases: np.ndarray        # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValidationError("layer weights must be (out, in) with biases (out,)")


@dataclass
class DenseNet:
    layers: list
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if not self.layers:
            raise ValidationError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weights.shape[1] != a.weights.shape[0]:
                raise ValidationError("adjacent layer dimensions are incompatible")

    @classmethod
    def build(cls, sizes, hidden_activation="relu", out_activation="identity",
              dropout_rate=0.0, rng=None):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            act = out_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(Layer(rng.uniform(-lim, lim, (n_out, n_in)), np.zeros(n_out), act))
        return cls(layers, dropout_rate)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]

    def params(self, prefix: str = "") -> dict:
        """Named references to the parameter arrays (updates are in place)."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}{k}/W"] = layer.weights
            out[f"{prefix}{k}/b"] = layer.biases
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weights.copy(), l.biases.copy(), l.activation)
                         for l in self.layers], self.dropout_rate)

    def __call__(self, x, mode="eval", rng=None):
        return forward(self, x, mode, rng)[0]


@dataclass
class Tape:
    net: DenseNet
    squeeze: bool
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, a)
    return a


def _act_grad(name, a):
    if name == "relu":
        return (a > 0.0).astype(float)
    if name == "softplus":
        return np.exp(-np.logaddexp(0.0, -a))
    return None


def forward(net: DenseNet, x, mode: str = "eval", rng=None):
    """Evaluate ``net`` on ``x``; return ``(output, tape)``.

    In ``"train"`` mode hidden activations are dropped with probability
    ``dropout_rate`` and survivors scaled by ``1 / keep``.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != net.in_dim:
        raise ValidationError(f"input has {h.shape[-1]} features, network expects {net.in_dim}")
    drop = mode == "train" and net.dropout_rate > 0.0
    if drop and rng is None:
        raise ValidationError("train-mode dropout needs a random generator")
    keep = 1.0 - net.dropout_rate
    tape = Tape(net, squeeze)
    last = len(net.layers) - 1
    for k, layer in enumerate(net.layers):
        tape.inputs.append(h)
        a = h @ layer.weights.T + layer.biases
        tape.pre.append(a)
        h = _act(layer.activation, a)
        if drop and k < last:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            tape.masks.append(mask)
        else:
            tape.masks.append(None)
    return (h[0] if squeeze else h), tape


def backward(tape: Tape, output_gradient):
    """Reverse pass.  Returns ``(param_grads, input_grad)``.

    ``param_grads`` is a list of ``(dW, db)`` per layer, summed over rows.
    """
    g = np.asarray(output_gradient, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    if g.shape != tape.pre[-1].shape:
        raise ValidationError(f"output gradient shape {g.shape} != {tape.pre[-1].shape}")
    grads = [None] * len(tape.net.layers)
    for k in range(len(tape.net.layers) - 1, -1, -1):
        layer = tape.net.layers[k]
        if tape.masks[k] is not None:
            g = g * tape.masks[k]
        d = _act_grad(layer.activation, tape.pre[k])
        if d is not None:
            g = g * d
        grads[k] = (g.T @ tape.inputs[k], g.sum(axis=0))
        g = g @ layer.weights
    return grads, (g[0] if tape.squeeze else g)


def _flatten(params):
    if isinstance(params, dict):
        return list(params.values())
    if isinstance(params, np.ndarray):
        return [params]
    return list(params)


def grad_check(fn, params, fd_step: float = 1e-5, probes=None, rng=None,
               floor: float = 1e-8, order: int = 2) -> float:
    """Worst relative error between ``fn``'s analytic gradient and central differences.

    ``fn(params)`` returns ``(value, grads)`` with ``grads`` structured like
    ``params`` (array, list of arrays, or dict).  Arrays are perturbed in place
    and restored.  With ``probes`` set, only that many random coordinates are
    checked.  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  ``order`` 4 uses the five-point
    central stencil, whose O(step^4) truncation error allows a larger step
    (less round-off) on strongly curved coordinates.
    """
    if order not in (2, 4):
        raise ValidationError("order must be 2 or 4")
    offsets, weights = ((1, -1), (0.5, -0.5)) if order == 2 else \
        ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))
    arrays = _flatten(params)
    _, grads = fn(params)
    grads = _flatten(grads)
    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if not coords:
        return 0.0
    if probes is not None and probes < len(coords):
        rng = np.random.default_rng(0) if rng is None else rng
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[p] for p in pick]
    worst = 0.0
    for i, j in coords:
        flat = arrays[i].reshape(-1)
        orig = flat[j]
        values = []
        for k in offsets:
            flat[j] = orig + k * fd_step
            values.append(fn(params)[0])
        flat[j] = orig
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"non-finite function value while probing array {i}[{j}]")
        num = float(np.dot(weights, values)) / fd_step
        ana = float(np.asarray(grads[i]).reshape(-1)[j])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict, **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One bias-corrected ADAM descent step, applied in place to ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        if g.shape != params[name].shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params

"""Dense feed-forward networks with hand-written backpropagation.

Everything here is float64 numpy. A network is an ordered list of
:class:`Layer` objects; :func:`forward` keeps the intermediate activations
needed by :func:`backprop`, and the loss helpers turn a network output into
a scalar loss plus its gradient with respect to that output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
LOSS_KINDS = ("bce", "squared", "policy-gradient-surrogate")
PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "esce-densenet/1"


class ShapeError(ValueError):
    """Raised when array shapes do not line up with a network."""


def sigmoid(z):
    # split by sign so large |z| never overflows exp
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(kind, z, a):
    """Derivative of the activation, expressed through z and a = act(z)."""
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].in_dim != self.layers[k - 1].out_dim:
                raise ShapeError(
                    f"layer {k} expects {self.layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> List[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def init_dense(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> DenseNet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.

    ``sizes`` lists every width from input to output, so ``len(activations)``
    must be ``len(sizes) - 1``.
    """
    if len(activations) != len(sizes) - 1:
        raise ValueError("need one activation per layer")
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append(Layer(w, b, act))
    return DenseNet(layers)


def mlp(input_dim: int, hidden: Sequence[int], output_dim: int, *, activation="tanh",
        output_activation="identity", rng: Optional[np.random.Generator] = None) -> DenseNet:
    rng = np.random.default_rng() if rng is None else rng
    sizes = [input_dim, *hidden, output_dim]
    acts = [activation] * len(hidden) + [output_activation]
    return init_dense(sizes, acts, rng)


@dataclass
class Cache:
    """Per-layer inputs, pre-activations and outputs from one forward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def _as_batch(net: DenseNet, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    return x, squeeze


def forward(net: DenseNet, x, *, return_cache=False):
    """Evaluate ``net`` on a single vector or on a batch of row vectors."""
    h, squeeze = _as_batch(net, x)
    cache = Cache(squeeze=squeeze)
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        a = _activate(layer.activation, z)
        if return_cache:
            cache.inputs.append(h)
            cache.pre.append(z)
            cache.post.append(a)
        h = a
    out = h[0] if squeeze else h
    return (out, cache) if return_cache else out


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def check_congruent(self, net: DenseNet):
        if len(self.weights) != len(net.layers):
            raise ShapeError("gradient and network have different depths")
        for g, p in zip(self.arrays(), net.params()):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.arrays())

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "Gradients":
        return cls([np.zeros_like(l.weight) for l in net.layers], [np.zeros_like(l.bias) for l in net.layers])


def backprop(net: DenseNet, cache: Cache, grad_out) -> Tuple[Gradients, np.ndarray]:
    """Push dL/d(output) back through the network.

    Returns parameter gradients and dL/d(input). ``grad_out`` must have the
    batch shape of the forward pass that produced ``cache``.
    """
    g = np.asarray(grad_out, dtype=float)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output gradient {g.shape} does not match output {cache.post[-1].shape}")
    dws, dbs = [], []
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        dz = g * _activation_grad(layer.activation, cache.pre[k], cache.post[k])
        dws.append(dz.T @ cache.inputs[k])
        dbs.append(dz.sum(axis=0))
        g = dz @ layer.weight
    dws.reverse()
    dbs.reverse()
    dx = g[0] if cache.squeeze else g
    return Gradients(dws, dbs), dx


# ---------------------------------------------------------------- losses
# Each returns (mean loss over the batch, dL/d(output)). Outputs are (n, k).


def bce_loss(p, y):
    """Binary cross-entropy on probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=float)
    y = np.broadcast_to(np.asarray(y, dtype=float), p.shape)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    n = p.shape[0]
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).sum() / n
    grad = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
    # clamp has zero derivative outside its range
    grad = np.where((p < PROB_EPS) | (p > 1.0 - PROB_EPS), 0.0, grad)
    return float(loss), grad


def negative_only_loss(p):
    """Mean of -log(1 - p): the bce term for label 0 alone."""
    return bce_loss(p, 0.0)


def squared_loss(out, target):
    out = np.asarray(out, dtype=float)
    diff = out - np.broadcast_to(np.asarray(target, dtype=float), out.shape)
    n = out.shape[0]
    return float((diff * diff).sum() / n), 2.0 * diff / n


def log_softmax(logits):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def policy_gradient_loss(logits, actions, advantages):
    """Surrogate -A * log pi(a|s), averaged over the batch."""
    logits = np.asarray(logits, dtype=float)
    n = logits.shape[0]
    actions = np.asarray(actions, dtype=int).reshape(n)
    adv = np.asarray(advantages, dtype=float).reshape(n)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -(adv * logp[rows, actions]).sum() / n
    onehot = np.zeros_like(logits)
    onehot[rows, actions] = 1.0
    grad = -adv[:, None] * (onehot - np.exp(logp)) / n
    return float(loss), grad


def entropy_and_grad(logits):
    """Mean categorical entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float)
    n = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)
    grad = -p * (logp + h[:, None]) / n
    return float(h.mean()), grad


def compute_loss(out, loss_kind: str, target):
    """Dispatch on ``loss_kind``.

    For ``policy-gradient-surrogate`` the target rows are ``(action, advantage)``.
    """
    out = np.asarray(out, dtype=float)
    if loss_kind == "bce":
        return bce_loss(out, np.asarray(target, dtype=float).reshape(out.shape))
    if loss_kind == "squared":
        return squared_loss(out, np.asarray(target, dtype=float).reshape(out.shape))
    if loss_kind == "policy-gradient-surrogate":
        t = np.asarray(target, dtype=float).reshape(out.shape[0], 2)
        return policy_gradient_loss(out, t[:, 0].astype(int), t[:, 1])
    raise ValueError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")


def backward(net: DenseNet, x, loss_kind: str, target) -> Tuple[float, Gradients]:
    """Loss and exact parameter gradients for one input (or a batch of inputs)."""
    out, cache = forward(net, x, return_cache=True)
    out2 = cache.post[-1]
    target = np.asarray(target, dtype=float)
    if cache.squeeze:
        target = target[None, ...]
    loss, g = compute_loss(out2, loss_kind, target)
    grads, _ = backprop(net, cache, g)
    return loss, grads


# ------------------------------------------------------------- optimizers


class Optimizer:
    """SGD or bias-corrected Adam over a fixed list of parameter arrays.

    Updates are applied in place, so every holder of the arrays sees them.
    """

    def __init__(self, method="adam", learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {method!r}")
        if not learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.method = method
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def reset(self):
        self.step_count = 0
        self.m = self.v = None

    def apply(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        if len(params) != len(grads):
            raise ShapeError("parameter and gradient lists differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        lr = self.learning_rate
        if self.method == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            self.step_count += 1
            return
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        elif any(m.shape != p.shape for m, p in zip(self.m, params)):
            raise ShapeError("optimizer state does not match parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def apply_gradients(net: DenseNet, grads: Gradients, opt: Optimizer) -> DenseNet:
    grads.check_congruent(net)
    opt.apply(net.params(), grads.arrays())
    return net


# ------------------------------------------------------------- checkpoints


def net_to_dict(net: DenseNet) -> dict:
    return {
        "input_dim": net.input_dim,
        "layers": [
            {
                "activation": l.activation,
                "shape": list(l.weight.shape),
                "weight": l.weight.ravel(order="C").tolist(),
                "bias": l.bias.tolist(),
            }
            for l in net.layers
        ],
    }


def net_from_dict(d: dict) -> DenseNet:
    layers = []
    for entry in d["layers"]:
        shape = tuple(entry["shape"])
        w = np.asarray(entry["weight"], dtype=float).reshape(shape, order="C")
        layers.append(Layer(w, np.asarray(entry["bias"], dtype=float), entry["activation"]))
    net = DenseNet(layers)
    if net.input_dim != d["input_dim"]:
        raise ShapeError("checkpoint input_dim disagrees with its first layer")
    return net


def save_checkpoint(path, nets: dict, meta: Optional[dict] = None):
    """Write named networks to a JSON text container tagged with the format version."""
    doc = {"format": CHECKPOINT_FORMAT, "meta": meta or {},
           "networks": {name: net_to_dict(n) for name, n in nets.items()}}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return {name: net_from_dict(d) for name, d in doc["networks"].items()}, doc.get("meta", {})

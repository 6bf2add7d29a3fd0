"""Desk-scale quantisation-aware training with a straight-through estimator.

A 2-32-32-2 ReLU network learns two interleaved spirals. With a quantiser
configured, every forward pass runs on freshly quantised (optionally
dead-zone pruned) weights while the gradients update full-precision master
weights as if quantisation were the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .pruner import PruneConfig, prune_and_quantize, sparsity
from .quantizer import QuantConfig, QuantizedLayer, dequantize, quantize_layer
from .tensor_io import Tensor, XorShift64Star

LAYER_DIMS = (2, 32, 32, 2)


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 300
    seed: int = 1
    pf: float = 0.0
    quant: QuantConfig | None = None
    batch_size: int = 32
    n_per_class: int = 256

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


@dataclass(frozen=True, eq=False)
class ToyNet:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def astype(self, dtype) -> ToyNet:
        return ToyNet(
            tuple(w.astype(dtype) for w in self.weights),
            tuple(b.astype(dtype) for b in self.biases),
        )

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def same_as(self, other: ToyNet) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))


def init_net(seed: int, dims=LAYER_DIMS, dtype=np.float32) -> ToyNet:
    """Uniform fan-in init, U(-1, 1) * sqrt(6 / fan_in); zero biases."""
    rng = XorShift64Star(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        w = np.array([rng.uniform(-1.0, 1.0) for _ in range(fan_in * fan_out)]) * bound
        weights.append(w.reshape(fan_in, fan_out).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ToyNet(tuple(weights), tuple(biases))


def gen_dataset(seed: int = 0, n_per_class: int = 256, shuffle: bool = False):
    """Two interleaved spirals: radius t, angle 3*pi*t + c*pi, t = i/n."""
    if n_per_class < 8:
        raise ValueError("need at least 8 points per class")
    xs, ys = [], []
    for c in (0, 1):
        t = np.arange(n_per_class) / n_per_class
        ang = 3.0 * np.pi * t + c * np.pi
        xs.append(np.stack([t * np.cos(ang), t * np.sin(ang)], axis=1))
        ys.append(np.full(n_per_class, c))
    x = np.concatenate(xs).astype(np.float32)
    y = np.concatenate(ys).astype(np.int64)
    if shuffle:
        order = _permutation(len(y), XorShift64Star(seed))
        x, y = x[order], y[order]
    return x, y


def _permutation(n: int, rng: XorShift64Star) -> np.ndarray:
    # Fisher-Yates on the portable generator
    p = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.randint(0, i)
        p[i], p[j] = p[j], p[i]
    return np.array(p)


def quantize_weight(w: np.ndarray, quant: QuantConfig, pf: float = 0.0) -> QuantizedLayer:
    t = Tensor.from_array(w)
    if pf > 0:
        return prune_and_quantize(t, PruneConfig(pf, quant))
    return quantize_layer(t, quant)


def effective_weights(net: ToyNet, quant: QuantConfig | None, pf: float = 0.0) -> list[np.ndarray]:
    if quant is None:
        return list(net.weights)
    return [
        dequantize(quantize_weight(w, quant, pf)).array.astype(w.dtype)
        for w in net.weights
    ]


def _forward(weights, biases, x):
    acts = [x]
    zs = []
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        zs.append(z)
        h = np.maximum(z, 0) if i < len(weights) - 1 else z
        acts.append(h)
    return acts, zs


def forward(net: ToyNet, x, quant: QuantConfig | None = None, pf: float = 0.0) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=net.weights[0].dtype))
    acts, _ = _forward(effective_weights(net, quant, pf), net.biases, x)
    return acts[-1]


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.mean(np.log(probs[np.arange(n), y])))
    grad = probs.copy()
    grad[np.arange(n), y] -= 1
    return loss, grad / n


def loss_and_grads(weights, biases, x, y):
    """Backprop through the ReLU stack for the given (possibly quantised) weights."""
    acts, zs = _forward(weights, biases, x)
    loss, delta = softmax_xent(acts[-1], y)
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    for i in reversed(range(len(weights))):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i].T) * (zs[i - 1] > 0)
    return loss, gw, gb


def ste_train_step(net: ToyNet, batch, cfg: TrainConfig) -> tuple[ToyNet, float]:
    """One gradient-descent step; quantised forward, straight-through backward."""
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    x = np.asarray(x, dtype=net.weights[0].dtype)
    wq = effective_weights(net, cfg.quant, cfg.pf)
    # divergence is reported below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        loss, gw, gb = loss_and_grads(wq, net.biases, x, np.asarray(y))
    if not math.isfinite(loss):
        raise DivergenceError(f"loss became {loss}")
    lr = net.weights[0].dtype.type(cfg.learning_rate)
    new_w = tuple(w - lr * g.astype(w.dtype) for w, g in zip(net.weights, gw))
    new_b = tuple(b - lr * g.astype(b.dtype) for b, g in zip(net.biases, gb))
    return ToyNet(new_w, new_b), loss


def accuracy(net: ToyNet, x, y, quant: QuantConfig | None = None, pf: float = 0.0) -> float:
    return float(np.mean(forward(net, x, quant, pf).argmax(axis=1) == y))


def train(cfg: TrainConfig, net: ToyNet | None = None) -> tuple[ToyNet, list[float]]:
    """Minibatch gradient descent; batches follow a seeded per-epoch shuffle."""
    x, y = gen_dataset(cfg.seed, cfg.n_per_class)
    net = init_net(cfg.seed) if net is None else net
    rng = XorShift64Star(cfg.seed ^ 0x5EED)
    losses = []
    for _ in range(cfg.epochs):
        order = _permutation(len(y), rng)
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            net, loss = ste_train_step(net, (x[idx], y[idx]), cfg)
        losses.append(loss)
    return net, losses


@dataclass
class TrainResult:
    float_acc: float
    quant_acc: float | None
    sparsity_per_layer: list[float] = field(default_factory=list)
    net: ToyNet | None = None

    @property
    def sparsity(self) -> float:
        """Zero fraction over all weights of the quantised network."""
        if not self.sparsity_per_layer or self.net is None:
            return 0.0
        sizes = [w.size for w in self.net.weights]
        return sum(s * n for s, n in zip(self.sparsity_per_layer, sizes)) / sum(sizes)


def train_and_evaluate(cfg: TrainConfig) -> TrainResult:
    net, _ = train(cfg)
    x, y = gen_dataset(cfg.seed, cfg.n_per_class)
    float_acc = accuracy(net, x, y)
    if cfg.quant is None:
        return TrainResult(float_acc, None, [], net)
    quant_acc = accuracy(net, x, y, cfg.quant, cfg.pf)
    sp = [sparsity(quantize_weight(w, cfg.quant, cfg.pf)) for w in net.weights]
    return TrainResult(float_acc, quant_acc, sp, net)


def initial_sparsity(cfg: TrainConfig) -> list[float]:
    """Per-layer zero fraction of the first-step quantisation (before training)."""
    if cfg.quant is None:
        raise ValueError("needs a quantiser")
    net = init_net(cfg.seed)
    return [sparsity(quantize_weight(w, cfg.quant, cfg.pf)) for w in net.weights]


def with_quant(cfg: TrainConfig, quant: QuantConfig | None, pf: float = 0.0) -> TrainConfig:
    return replace(cfg, quant=quant, pf=pf)

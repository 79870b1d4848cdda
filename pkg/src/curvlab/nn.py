"""Small dense ReLU classifiers with an explicit penultimate split.

A network is a stack of dense layers. The last layer is the linear
classifier ``w`` (k x m); everything before it is the feature map ``phi``,
so that ``f(x) = softmax(w @ phi(x))``. Biases are supported but off by
default, which keeps ``phi(0) = 0``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import SeededRng

log = logging.getLogger(__name__)

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)
LOSS_KINDS = ("cross_entropy", "brier")


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str = RELU

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"layer weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError(f"bias shape {self.bias.shape} does not match weight rows {self.weight.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpNetwork:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ValueError(
                    f"layer {i} expects input dim {self.layers[i].in_dim}, "
                    f"previous layer outputs {self.layers[i - 1].out_dim}"
                )
        if self.layers[-1].activation != IDENTITY:
            raise ValueError("the classifier (last layer) must be identity-activated")

    @classmethod
    def init(cls, dims: list[int], rng: SeededRng, bias: bool = False) -> "MlpNetwork":
        """He-initialised network with layer widths ``dims = [d, h1, ..., k]``."""
        gen = rng.generator()
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = gen.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            b = np.zeros(fan_out) if bias else None
            act = IDENTITY if i == len(dims) - 2 else RELU
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].in_dim

    @property
    def classifier(self) -> np.ndarray:
        return self.layers[-1].weight

    @property
    def feature_layers(self) -> list[Layer]:
        return self.layers[:-1]

    def copy(self) -> "MlpNetwork":
        return copy.deepcopy(self)


@dataclass
class SampleBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if np.any(self.labels < 0):
            raise ValueError("labels must be nonnegative class indices")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SampleBatch":
        return SampleBatch(self.inputs[idx], self.labels[idx])

    def check(self, n_classes: int, unit_ball: bool = True) -> None:
        if np.any(self.labels >= n_classes):
            raise ValueError(f"label out of range [0, {n_classes})")
        if unit_ball and np.any(np.linalg.norm(self.inputs, axis=1) > 1.0 + 1e-12):
            raise ValueError("inputs must satisfy ||x|| <= 1")


@dataclass
class ForwardCache:
    """Activations of one forward pass.

    ``pre[l]`` is the pre-activation of layer ``l`` and ``post[l]`` its
    input, so ``post[0]`` is the network input and ``post[-1]`` equals the
    features. For batched inputs every array carries a leading batch axis.
    """

    pre: list[np.ndarray]
    post: list[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return self.post[-1]

    def mask(self, layer: int) -> np.ndarray:
        """ReLU mask of layer ``layer`` (1 where the pre-activation is > 0)."""
        return (self.pre[layer] > 0).astype(np.float64)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("batch size and learning rate must be positive, weight decay nonnegative")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class TrainResult:
    net: MlpNetwork
    losses: list[float] = field(default_factory=list)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(net: MlpNetwork, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.input_dim:
        raise ValueError(f"input dim {h.shape[1]} does not match network input dim {net.input_dim}")
    pre, post = [], []
    for i, layer in enumerate(net.layers):
        post.append(h)
        a = h @ layer.weight.T
        if layer.bias is not None:
            a = a + layer.bias
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite pre-activation in layer {i}", layer=i)
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == RELU else a
    probs = softmax(h)
    if single:
        pre = [a[0] for a in pre]
        post = [p[0] for p in post]
        return ForwardCache(pre, post, h[0], probs[0])
    return ForwardCache(pre, post, h, probs)


def features(net: MlpNetwork, x) -> np.ndarray:
    return forward(net, x).features


def logits(net: MlpNetwork, x) -> np.ndarray:
    return forward(net, x).logits


def predict(net: MlpNetwork, x):
    """Argmax of the logits; ``np.argmax`` resolves ties to the lowest index."""
    return np.argmax(forward(net, x).logits, axis=-1)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample ``-log p_y``; computed from probabilities, so it saturates
    at ``-log(tiny)`` rather than returning inf."""
    probs = np.atleast_2d(probs)
    p_y = probs[np.arange(probs.shape[0]), labels]
    return -np.log(np.maximum(p_y, np.finfo(float).tiny))


def cross_entropy_from_logits(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    zmax = np.max(z, axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    return lse - z[np.arange(z.shape[0]), labels]


def sample_losses(net: MlpNetwork, batch: SampleBatch, loss_kind: str = "cross_entropy") -> np.ndarray:
    cache = forward(net, batch.inputs)
    return _loss_and_logit_grad(cache, batch.labels, loss_kind)[0]


def _loss_and_logit_grad(cache: ForwardCache, labels: np.ndarray, loss_kind: str):
    z = np.atleast_2d(cache.logits)
    p = np.atleast_2d(cache.probs)
    n, k = p.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    if loss_kind == "cross_entropy":
        return cross_entropy_from_logits(z, labels), p - onehot
    if loss_kind == "brier":
        r = p - onehot
        loss = np.sum(r * r, axis=1)
        # d/dz of sum_i (p_i - y_i)^2 = J^T 2r with J = diag(p) - p p^T
        g = 2.0 * (p * r - p * np.sum(p * r, axis=1, keepdims=True))
        return loss, g
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _backward(net: MlpNetwork, cache: ForwardCache, dz: np.ndarray):
    """Parameter and input gradients given per-sample dloss/dlogits (n x k)."""
    grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * len(net.layers)  # type: ignore[list-item]
    delta = dz
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x_in = np.atleast_2d(cache.post[i])
        gw = delta.T @ x_in
        gb = delta.sum(axis=0) if layer.bias is not None else None
        grads[i] = (gw, gb)
        delta = delta @ layer.weight
        if i > 0:
            delta = delta * (np.atleast_2d(cache.pre[i - 1]) > 0)
    return grads, delta


def loss_and_grad(net: MlpNetwork, batch: SampleBatch, loss_kind: str = "cross_entropy"):
    """Mean loss over ``batch`` and its gradient for every layer.

    Returns ``(loss, grads)`` where ``grads[l] = (dW_l, db_l)`` and ``db_l``
    is ``None`` for bias-free layers.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    n = len(batch)
    cache = forward(net, batch.inputs)
    losses, dz = _loss_and_logit_grad(cache, batch.labels, loss_kind)
    grads, _ = _backward(net, cache, dz / n)
    return float(np.mean(losses)), grads


def input_gradient(net: MlpNetwork, x: np.ndarray, labels: np.ndarray, loss_kind: str = "cross_entropy"):
    """Per-sample loss and its gradient with respect to the input rows of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cache = forward(net, x)
    losses, dz = _loss_and_logit_grad(cache, np.asarray(labels), loss_kind)
    _, dx = _backward(net, cache, dz)
    return losses, dx


def train_sgd(net: MlpNetwork, data: SampleBatch, config: TrainConfig) -> TrainResult:
    """Plain minibatch SGD with L2 weight decay on a private copy of ``net``."""
    net = net.copy()
    gen = SeededRng(config.seed, 0x7A11).generator()
    n = len(data)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = gen.permutation(n)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, config.batch_size):
                    idx = order[start:start + config.batch_size]
                    _, grads = loss_and_grad(net, data.subset(idx), config.loss_kind)
                    for layer, (gw, gb) in zip(net.layers, grads):
                        layer.weight -= config.learning_rate * (gw + config.weight_decay * layer.weight)
                        if gb is not None:
                            layer.bias -= config.learning_rate * gb
                epoch_loss = float(np.mean(sample_losses(net, data, config.loss_kind))) if n else 0.0
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"training diverged at epoch {epoch}", epoch=epoch) from exc
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(l.weight)) for l in net.layers):
            raise TrainingDivergedError(f"training diverged at epoch {epoch}", epoch=epoch)
        losses.append(epoch_loss)
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return TrainResult(net, losses)


def scale_penultimate(net: MlpNetwork, s: float) -> MlpNetwork:
    """Copy of ``net`` with the classifier (and its bias) multiplied by ``s``."""
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    out = net.copy()
    out.layers[-1].weight = out.layers[-1].weight * s
    if out.layers[-1].bias is not None:
        out.layers[-1].bias = out.layers[-1].bias * s
    return out


def accuracy(net: MlpNetwork, batch: SampleBatch) -> float:
    if len(batch) == 0:
        return float("nan")
    return float(np.mean(predict(net, batch.inputs) == batch.labels))

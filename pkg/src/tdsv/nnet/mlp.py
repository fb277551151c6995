"""Feed-forward bottleneck networks trained with (multi-task) cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax

from .labels import LabelSet

log = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "relu", "linear", "softmax")


class NetworkError(ValueError):
    pass


def activate(z: np.ndarray, tag: str) -> np.ndarray:
    if tag == "sigmoid":
        return expit(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "linear":
        return z
    if tag == "softmax":
        return np.exp(log_softmax(z, axis=-1))
    raise NetworkError(f"unknown activation {tag!r}")


def activation_backward(z: np.ndarray, a: np.ndarray, grad_a: np.ndarray, tag: str) -> np.ndarray:
    """Gradient wrt pre-activation z given the gradient wrt a = act(z)."""
    if tag == "sigmoid":
        return grad_a * a * (1.0 - a)
    if tag == "relu":
        return grad_a * (z > 0)
    if tag == "linear":
        return grad_a
    if tag == "softmax":
        return a * (grad_a - np.sum(grad_a * a, axis=-1, keepdims=True))
    raise NetworkError(f"unknown activation {tag!r}")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise NetworkError(f"bias shape {self.bias.shape} vs weight {self.weight.shape}")

    @classmethod
    def init(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (n_in + n_out))
        if activation == "sigmoid":
            limit *= 4.0
        return cls(rng.uniform(-limit, limit, (n_in, n_out)), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: np.ndarray):
        z = x @ self.weight + self.bias
        return z, activate(z, self.activation)


@dataclass
class MlpNetwork:
    """Shared trunk of hidden layers with one or more softmax classification heads."""

    hidden: list
    heads: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.hidden, self.hidden[1:]):
            if a.n_out != b.n_in:
                raise NetworkError(f"layer dims incompatible: {a.n_out} -> {b.n_in}")
        for h in self.heads:
            if self.hidden and h.n_in != self.hidden[-1].n_out:
                raise NetworkError("head input does not match last hidden layer")

    @property
    def depth(self) -> int:
        return len(self.hidden)

    @property
    def input_dim(self) -> int:
        return self.hidden[0].n_in

    def parameters(self) -> list:
        out = []
        for layer in self.hidden + self.heads:
            out += [layer.weight, layer.bias]
        return out

    def forward(self, x: np.ndarray):
        """Returns (pre-activations, activations) of the hidden layers and head log-probabilities."""
        zs, acts = [], [x]
        h = x
        for layer in self.hidden:
            z, h = layer.forward(h)
            zs.append(z)
            acts.append(h)
        logps = [log_softmax(h @ head.weight + head.bias, axis=1) for head in self.heads]
        return zs, acts, logps

    def hidden_output(self, x: np.ndarray, layer_index: int, pre_activation: bool = False):
        """Output of hidden layer `layer_index` (1-based)."""
        if not 1 <= layer_index <= self.depth:
            raise NetworkError(f"layer index {layer_index} out of range 1..{self.depth}")
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.hidden[:layer_index], 1):
            z, h = layer.forward(h)
            if i == layer_index and pre_activation:
                return z
        return h


def head_weights(n_heads: int, gamma: float) -> list:
    if n_heads == 1:
        return [1.0]
    if n_heads == 2:
        if not 0.0 <= gamma <= 1.0:
            raise NetworkError(f"gamma must lie in [0, 1], got {gamma}")
        return [gamma, 1.0 - gamma]
    raise NetworkError("at most two heads are supported")


def loss_and_grads(net: MlpNetwork, x: np.ndarray, targets, gamma: float = 0.5):
    """Weighted cross-entropy L = sum_h g_h * mean_t(-log p_h(y_t)) and its gradients.

    Gradients are returned in the order of ``net.parameters()``.
    """
    weights = head_weights(len(net.heads), gamma)
    zs, acts, logps = net.forward(x)
    T = x.shape[0]
    rows = np.arange(T)
    loss = 0.0
    top = acts[-1]
    grad_top = np.zeros_like(top)
    head_grads = []
    for head, logp, y, g in zip(net.heads, logps, targets, weights):
        loss += -g * logp[rows, y].mean()
        delta = np.exp(logp)
        delta[rows, y] -= 1.0
        delta *= g / T
        head_grads += [top.T @ delta, delta.sum(axis=0)]
        grad_top += delta @ head.weight.T

    hidden_grads = []
    grad = grad_top
    for i in range(net.depth - 1, -1, -1):
        layer = net.hidden[i]
        gz = activation_backward(zs[i], acts[i + 1], grad, layer.activation)
        hidden_grads = [acts[i].T @ gz, gz.sum(axis=0)] + hidden_grads
        grad = gz @ layer.weight.T
    return loss, hidden_grads + head_grads


@dataclass
class BnConfig:
    depth: int = 7
    width: int = 1024
    activation: str = "sigmoid"
    epochs: int = 25
    lr_start: float = 0.8
    lr_end: float = 0.08
    batch_start: int = 256
    batch_end: int = 1024
    gamma: float = 0.5
    tap_layer: int | None = None  # None: 4 for speaker tasks, 2 otherwise
    pre_activation: bool = False
    pca_dim: int = 57


def geometric_schedule(start: float, end: float, steps: int) -> np.ndarray:
    if steps == 1:
        return np.array([float(start)])
    return start * (end / start) ** (np.arange(steps) / (steps - 1))


def build_mlp(n_in: int, class_counts, cfg: BnConfig, rng: np.random.Generator) -> MlpNetwork:
    hidden = []
    dim = n_in
    for _ in range(cfg.depth):
        hidden.append(DenseLayer.init(dim, cfg.width, cfg.activation, rng))
        dim = cfg.width
    heads = [DenseLayer.init(dim, k, "softmax", rng) for k in class_counts]
    return MlpNetwork(hidden, heads)


def _stack(features, labelsets):
    """Concatenate frames and aligned label columns over the utterances of labelsets[0]."""
    if isinstance(features, dict):
        feats = features
    else:
        feats = {getattr(f, "id", str(i)): f for i, f in enumerate(features)}
    xs, ys = [], [[] for _ in labelsets]
    for utt in labelsets[0].ids():
        if utt not in feats:
            raise NetworkError(f"no features for labelled utterance {utt}")
        x = np.asarray(feats[utt], dtype=np.float64)
        for k, ls in enumerate(labelsets):
            if utt not in ls.labels:
                raise NetworkError(f"{utt} missing from label set {k}")
            lab = ls[utt]
            if len(lab) != len(x):
                raise NetworkError(f"{utt}: {len(lab)} labels for {len(x)} frames")
            ys[k].append(lab)
        xs.append(x)
    return np.vstack(xs), [np.concatenate(y) for y in ys]


def train_bn_dnn(features, labels, cfg: BnConfig | None = None, seed: int = 0,
                 labels2: LabelSet | None = None, history: list | None = None) -> MlpNetwork:
    """Train a bottleneck DNN by mini-batch SGD.

    With a second label set the loss is ``gamma * L1 + (1 - gamma) * L2`` over
    two softmax heads sharing the hidden trunk. Learning rate and batch size
    follow geometric schedules across epochs.
    """
    cfg = cfg or BnConfig()
    labelsets = [labels] + ([labels2] if labels2 is not None else [])
    x, ys = _stack(features, labelsets)
    rng = np.random.default_rng(seed)
    net = build_mlp(x.shape[1], [ls.n_classes for ls in labelsets], cfg, rng)
    lrs = geometric_schedule(cfg.lr_start, cfg.lr_end, cfg.epochs)
    batches = np.rint(geometric_schedule(cfg.batch_start, cfg.batch_end, cfg.epochs)).astype(int)
    params = net.parameters()
    N = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        total, seen = 0.0, 0
        for start in range(0, N, batches[epoch]):
            idx = order[start:start + batches[epoch]]
            loss, grads = loss_and_grads(net, x[idx], [y[idx] for y in ys], cfg.gamma)
            if not np.isfinite(loss):
                raise NetworkError(f"training diverged (loss NaN) at epoch {epoch}")
            for p, g in zip(params, grads):
                p -= lrs[epoch] * g
            total += loss * len(idx)
            seen += len(idx)
        if history is not None:
            history.append(total / seen)
        log.info("bn epoch %d lr %.4f batch %d loss %.5f", epoch, lrs[epoch], batches[epoch],
                 total / seen)
    return net


def extract_deep_features(net: MlpNetwork, feat, layer_index: int, pre_activation: bool = False):
    """Per-frame activations of hidden layer `layer_index` (1 <= index < depth)."""
    if not 1 <= layer_index < net.depth:
        raise NetworkError(f"layer index {layer_index} must satisfy 1 <= index < {net.depth}")
    out = net.hidden_output(np.asarray(feat, dtype=np.float64), layer_index, pre_activation)
    if hasattr(feat, "with_frames"):
        return feat.with_frames(out)
    return out


def frame_accuracy(net: MlpNetwork, x: np.ndarray, y: np.ndarray, head: int = 0) -> float:
    _, _, logps = net.forward(np.asarray(x, dtype=np.float64))
    return float(np.mean(np.argmax(logps[head], axis=1) == y))

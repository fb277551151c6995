"""Simplified x-vector network: context-stacked frame layers, statistics pooling,
segment layers and a softmax speaker head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .mlp import DenseLayer, NetworkError, activation_backward, geometric_schedule

log = logging.getLogger(__name__)

STD_FLOOR = 1e-10  # variance floor in statistics pooling


@dataclass
class XvectorConfig:
    contexts: tuple = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))
    frame_dims: tuple = (512, 512, 512, 512, 1500)
    segment_dims: tuple = (400, 512)
    activation: str = "relu"
    embed_layer: int = 0  # index into the segment layers
    embed_pre_activation: bool = True
    min_chunk: int = 50
    max_chunk: int = 150
    chunks_per_utt: int = 1
    batch_size: int = 32
    epochs: int = 25
    lr_start: float = 0.8
    lr_end: float = 0.08
    var_floor: float = STD_FLOOR

    def __post_init__(self):
        self.contexts = tuple(tuple(int(o) for o in c) for c in self.contexts)
        self.frame_dims = tuple(self.frame_dims)
        self.segment_dims = tuple(self.segment_dims)
        if len(self.contexts) != len(self.frame_dims):
            raise NetworkError("one context per frame-level layer is required")
        if not 0 <= self.embed_layer < len(self.segment_dims):
            raise NetworkError("embedding tap must be a segment layer before the softmax head")

    @property
    def embedding_dim(self) -> int:
        return self.segment_dims[self.embed_layer]


@dataclass
class XvectorNetwork:
    frame_layers: list
    contexts: list
    segment_layers: list
    head: DenseLayer
    embed_layer: int = 0
    embed_pre_activation: bool = True
    var_floor: float = STD_FLOOR
    classes: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.contexts) != len(self.frame_layers):
            raise NetworkError("contexts and frame layers differ in length")
        pooled = 2 * self.frame_layers[-1].n_out
        if self.segment_layers[0].n_in != pooled:
            raise NetworkError(f"pooling gives {pooled} dims, segment layer expects "
                               f"{self.segment_layers[0].n_in}")

    @property
    def embedding_dim(self) -> int:
        return self.segment_layers[self.embed_layer].n_out

    def parameters(self) -> list:
        out = []
        for layer in self.frame_layers + self.segment_layers + [self.head]:
            out += [layer.weight, layer.bias]
        return out


def splice_indices(n_frames: int, offsets) -> np.ndarray:
    """(T, k) source indices for context stacking with edge replication."""
    t = np.arange(n_frames)[:, None] + np.asarray(offsets)[None, :]
    return np.clip(t, 0, n_frames - 1)


def build_xvector_net(input_dim: int, n_classes: int, cfg: XvectorConfig,
                      rng: np.random.Generator) -> XvectorNetwork:
    frame_layers, dim = [], input_dim
    for ctx, width in zip(cfg.contexts, cfg.frame_dims):
        frame_layers.append(DenseLayer.init(dim * len(ctx), width, cfg.activation, rng))
        dim = width
    segment_layers, dim = [], 2 * dim
    for width in cfg.segment_dims:
        segment_layers.append(DenseLayer.init(dim, width, cfg.activation, rng))
        dim = width
    head = DenseLayer.init(dim, n_classes, "softmax", rng)
    return XvectorNetwork(frame_layers, [list(c) for c in cfg.contexts], segment_layers, head,
                          cfg.embed_layer, cfg.embed_pre_activation, cfg.var_floor)


def _frame_forward(net: XvectorNetwork, x: np.ndarray):
    cache = []
    h = x
    for layer, ctx in zip(net.frame_layers, net.contexts):
        idx = splice_indices(h.shape[0], ctx)
        spliced = h[idx].reshape(h.shape[0], -1)
        z, a = layer.forward(spliced)
        cache.append((idx, spliced, z, a))
        h = a
    return h, cache


def stats_pool(h: np.ndarray, var_floor: float = STD_FLOOR):
    """Mean and standard deviation over frames; the variance is floored at `var_floor`."""
    mean = h.mean(axis=0)
    var = ((h - mean) ** 2).mean(axis=0)
    std = np.sqrt(np.maximum(var, var_floor))
    return np.concatenate([mean, std]), (mean, var, std)


def stats_pool_backward(h: np.ndarray, grad: np.ndarray, pool_cache, var_floor: float = STD_FLOOR):
    mean, var, std = pool_cache
    T, H = h.shape
    g_mean, g_std = grad[:H], grad[H:]
    g_std = np.where(var > var_floor, g_std, 0.0)
    return g_mean / T + (h - mean) * (g_std / (T * std))


def _frame_backward(net: XvectorNetwork, cache, grad_h: np.ndarray, grads: list):
    """Accumulate frame-layer parameter gradients into `grads` (in parameter order)."""
    for i in range(len(net.frame_layers) - 1, -1, -1):
        layer = net.frame_layers[i]
        idx, spliced, z, a = cache[i]
        gz = activation_backward(z, a, grad_h, layer.activation)
        grads[2 * i] += spliced.T @ gz
        grads[2 * i + 1] += gz.sum(axis=0)
        if i == 0:
            break
        g_spliced = (gz @ layer.weight.T).reshape(idx.shape[0], idx.shape[1], -1)
        prev = cache[i - 1][3]
        grad_h = np.zeros_like(prev)
        np.add.at(grad_h, idx.reshape(-1), g_spliced.reshape(-1, prev.shape[1]))


def _segment_forward(net: XvectorNetwork, pooled: np.ndarray):
    zs, acts = [], [pooled]
    h = pooled
    for layer in net.segment_layers:
        z, h = layer.forward(h)
        zs.append(z)
        acts.append(h)
    logp = log_softmax(h @ net.head.weight + net.head.bias, axis=1)
    return zs, acts, logp


def xvector_loss_and_grads(net: XvectorNetwork, chunks, targets):
    """Mean cross-entropy over a batch of variable-length chunks, with gradients
    in the order of ``net.parameters()``."""
    targets = np.asarray(targets)
    B = len(chunks)
    params = net.parameters()
    grads = [np.zeros_like(p) for p in params]
    pooled, caches = [], []
    for x in chunks:
        h, cache = _frame_forward(net, np.asarray(x, dtype=np.float64))
        p, pcache = stats_pool(h, net.var_floor)
        pooled.append(p)
        caches.append((h, cache, pcache))
    pooled = np.vstack(pooled)
    zs, acts, logp = _segment_forward(net, pooled)
    rows = np.arange(B)
    loss = -logp[rows, targets].mean()

    delta = np.exp(logp)
    delta[rows, targets] -= 1.0
    delta /= B
    n_frame = 2 * len(net.frame_layers)
    n_seg = len(net.segment_layers)
    grads[n_frame + 2 * n_seg] += acts[-1].T @ delta
    grads[n_frame + 2 * n_seg + 1] += delta.sum(axis=0)
    g = delta @ net.head.weight.T
    for j in range(n_seg - 1, -1, -1):
        layer = net.segment_layers[j]
        gz = activation_backward(zs[j], acts[j + 1], g, layer.activation)
        grads[n_frame + 2 * j] += acts[j].T @ gz
        grads[n_frame + 2 * j + 1] += gz.sum(axis=0)
        g = gz @ layer.weight.T
    for b, (h, cache, pcache) in enumerate(caches):
        grad_h = stats_pool_backward(h, g[b], pcache, net.var_floor)
        _frame_backward(net, cache, grad_h, grads)
    return float(loss), grads


def sample_chunk(n_frames: int, rng: np.random.Generator, min_chunk: int = 50,
                 max_chunk: int = 150) -> tuple[int, int]:
    """Random (start, length) with length in [min_chunk, max_chunk]; utterances
    shorter than `min_chunk` are used whole."""
    if n_frames < min_chunk:
        return 0, n_frames
    length = int(rng.integers(min_chunk, min(max_chunk, n_frames) + 1))
    start = int(rng.integers(0, n_frames - length + 1))
    return start, length


def train_xvector_net(features_by_utterance, speaker_labels, cfg: XvectorConfig | None = None,
                      seed: int = 0, history: list | None = None) -> XvectorNetwork:
    """Train on random chunks drawn from each utterance every epoch.

    `features_by_utterance` maps utterance id -> (T, D) frames and
    `speaker_labels` maps utterance id -> class (any hashable).
    """
    cfg = cfg or XvectorConfig()
    utts = list(features_by_utterance)
    classes = sorted({speaker_labels[u] for u in utts}, key=str)
    index = {c: i for i, c in enumerate(classes)}
    feats = [np.asarray(features_by_utterance[u], dtype=np.float64) for u in utts]
    y = np.array([index[speaker_labels[u]] for u in utts])
    short = [u for u, f in zip(utts, feats) if f.shape[0] < cfg.min_chunk]
    if short:
        log.info("%d utterances shorter than %d frames are used whole", len(short), cfg.min_chunk)
    rng = np.random.default_rng(seed)
    net = build_xvector_net(feats[0].shape[1], len(classes), cfg, rng)
    params = net.parameters()
    lrs = geometric_schedule(cfg.lr_start, cfg.lr_end, cfg.epochs)
    for epoch in range(cfg.epochs):
        items = np.repeat(np.arange(len(utts)), cfg.chunks_per_utt)
        items = items[rng.permutation(len(items))]
        total, seen = 0.0, 0
        for start in range(0, len(items), cfg.batch_size):
            batch = items[start:start + cfg.batch_size]
            chunks = []
            for i in batch:
                s, n = sample_chunk(feats[i].shape[0], rng, cfg.min_chunk, cfg.max_chunk)
                chunks.append(feats[i][s:s + n])
            loss, grads = xvector_loss_and_grads(net, chunks, y[batch])
            if not np.isfinite(loss):
                raise NetworkError(f"x-vector training diverged at epoch {epoch}")
            for p, g in zip(params, grads):
                p -= lrs[epoch] * g
            total += loss * len(batch)
            seen += len(batch)
        if history is not None:
            history.append(total / seen)
        log.info("xvector epoch %d lr %.4f loss %.5f", epoch, lrs[epoch], total / seen)
    net.classes = classes
    return net


def extract_xvector(net: XvectorNetwork, feat) -> np.ndarray:
    """Embedding of a whole utterance (all frames pooled)."""
    x = np.asarray(feat, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise NetworkError("cannot extract an x-vector from an empty utterance")
    h, _ = _frame_forward(net, x)
    pooled, _ = stats_pool(h, net.var_floor)
    h = pooled
    for j, layer in enumerate(net.segment_layers):
        z, h = layer.forward(h)
        if j == net.embed_layer:
            return z if net.embed_pre_activation else h
    raise NetworkError("embedding layer not found")


def classify_chunks(net: XvectorNetwork, chunks) -> np.ndarray:
    pooled = np.vstack([stats_pool(_frame_forward(net, np.asarray(c, dtype=np.float64))[0],
                                   net.var_floor)[0] for c in chunks])
    _, _, logp = _segment_forward(net, pooled)
    return np.argmax(logp, axis=1)

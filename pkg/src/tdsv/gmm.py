"""Diagonal-covariance GMM-UBM: EM training, MAP adaptation, LLR scoring and
Baum-Welch statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
CHUNK = 20000


class GmmError(ValueError):
    pass


@dataclass
class DiagGmm:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        C = self.weights.shape[0]
        if self.means.shape[0] != C or self.variances.shape != self.means.shape:
            raise GmmError(
                f"inconsistent shapes: weights {self.weights.shape}, means {self.means.shape}, "
                f"variances {self.variances.shape}")
        if np.any(self.variances <= 0):
            raise GmmError("variances must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "DiagGmm":
        return DiagGmm(self.weights.copy(), self.means.copy(), self.variances.copy())

    def _gconsts(self):
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        prec = 1.0 / self.variances
        const = logw - 0.5 * (self.dim * LOG_2PI + np.log(self.variances).sum(1)
                              + (self.means ** 2 * prec).sum(1))
        return const, prec, self.means * prec


@dataclass
class BaumWelchStats:
    n: np.ndarray  # (C,)
    f: np.ndarray  # (C, D)
    id: str = ""

    def __add__(self, other: "BaumWelchStats") -> "BaumWelchStats":
        return BaumWelchStats(self.n + other.n, self.f + other.f, self.id)

    def centered(self, means: np.ndarray) -> np.ndarray:
        """First-order stats centered on the UBM means: f_c - n_c * m_c."""
        return self.f - self.n[:, None] * means


def _as_frames(feat) -> np.ndarray:
    x = np.asarray(feat, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x


def _check_dim(gmm: DiagGmm, x: np.ndarray):
    if x.shape[1] != gmm.dim:
        raise GmmError(f"dimension mismatch: features {x.shape[1]}, model {gmm.dim}")


def component_log_likelihoods(gmm: DiagGmm, feat) -> np.ndarray:
    """log w_c + log N(x_t; mu_c, diag(var_c)) for every frame/component, shape (T, C)."""
    x = _as_frames(feat)
    _check_dim(gmm, x)
    const, prec, mp = gmm._gconsts()
    return const - 0.5 * ((x ** 2) @ prec.T) + x @ mp.T


def frame_log_likelihoods(gmm: DiagGmm, feat) -> np.ndarray:
    return logsumexp(component_log_likelihoods(gmm, feat), axis=1)


def gmm_log_likelihood(gmm: DiagGmm, feat) -> float:
    """Frame-averaged log-likelihood of `feat` under `gmm`."""
    x = _as_frames(feat)
    if x.shape[0] == 0:
        raise GmmError("empty feature matrix")
    return float(np.mean(frame_log_likelihoods(gmm, x)))


def posteriors(gmm: DiagGmm, feat, prune: float = 0.0) -> np.ndarray:
    ll = component_log_likelihoods(gmm, feat)
    post = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
    if prune > 0:
        post[post < prune] = 0.0
        post /= post.sum(axis=1, keepdims=True)
    return post


def llr_score(target: DiagGmm, ubm: DiagGmm, feat) -> float:
    """Frame-averaged log-likelihood ratio between target and background models."""
    if target.dim != ubm.dim:
        raise GmmError(f"dimension mismatch: target {target.dim}, ubm {ubm.dim}")
    x = _as_frames(feat)
    return gmm_log_likelihood(target, x) - gmm_log_likelihood(ubm, x)


def accumulate_bw_stats(ubm: DiagGmm, feat, prune: float = 1e-8, utt_id: str = "") -> BaumWelchStats:
    """Zeroth and first order statistics under the UBM posteriors.

    Posteriors below `prune` are dropped and each frame is renormalized, so the
    counts still sum to the number of frames.
    """
    x = _as_frames(feat)
    _check_dim(ubm, x)
    utt_id = utt_id or getattr(feat, "id", "")
    n = np.zeros(ubm.n_components)
    f = np.zeros((ubm.n_components, ubm.dim))
    for start in range(0, x.shape[0], CHUNK):
        chunk = x[start:start + CHUNK]
        post = posteriors(ubm, chunk, prune)
        n += post.sum(axis=0)
        f += post.T @ chunk
    return BaumWelchStats(n, f, utt_id)


def _em_sweep(gmm: DiagGmm, x: np.ndarray, var_floor: np.ndarray, min_count: float = 1e-10):
    """One EM iteration. Returns (new_gmm, avg log-likelihood of the old model, floored?)."""
    C, D = gmm.n_components, gmm.dim
    n = np.zeros(C)
    f = np.zeros((C, D))
    s = np.zeros((C, D))
    total_ll = 0.0
    for start in range(0, x.shape[0], CHUNK):
        chunk = x[start:start + CHUNK]
        ll = component_log_likelihoods(gmm, chunk)
        lse = logsumexp(ll, axis=1)
        total_ll += lse.sum()
        post = np.exp(ll - lse[:, None])
        n += post.sum(axis=0)
        f += post.T @ chunk
        s += post.T @ (chunk ** 2)
    avg_ll = total_ll / x.shape[0]
    active = n > min_count
    means = gmm.means.copy()
    variances = gmm.variances.copy()
    means[active] = f[active] / n[active, None]
    variances[active] = s[active] / n[active, None] - means[active] ** 2
    floored = bool(np.any(variances < var_floor))
    variances = np.maximum(variances, var_floor)
    weights = n / n.sum()
    return DiagGmm(weights, means, variances), avg_ll, floored


def _split(gmm: DiagGmm, count: int, rng: np.random.Generator, eps: float = 0.5) -> DiagGmm:
    order = np.argsort(-gmm.weights, kind="stable")[:count]
    direction = rng.standard_normal((count, gmm.dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True) / np.sqrt(gmm.dim)
    offset = eps * np.sqrt(gmm.variances[order]) * direction
    weights = gmm.weights.copy()
    weights[order] *= 0.5
    means = gmm.means.copy()
    means[order] -= offset
    return DiagGmm(
        np.concatenate([weights, weights[order]]),
        np.vstack([means, gmm.means[order] + offset]),
        np.vstack([gmm.variances, gmm.variances[order]]),
    )


def train_ubm_em(features, n_components: int, iters: int = 10, seed: int = 0,
                 var_floor_factor: float = 1e-4, split_iters: int = 3,
                 history: list | None = None) -> DiagGmm:
    """Train a diagonal GMM by binary splitting from the global Gaussian, then EM.

    `history`, if given, receives one ``(sweep, avg_loglik, floored)`` tuple per
    sweep of the final EM phase plus a closing entry for the returned model; the
    log-likelihood is non-decreasing across unfloored sweeps.
    """
    if n_components < 1:
        raise GmmError("need at least one component")
    if isinstance(features, np.ndarray) and features.ndim == 2:
        x = features.astype(np.float64)
    else:
        x = np.vstack([_as_frames(f) for f in features])
    if x.shape[0] < 10 * n_components:
        raise GmmError(f"insufficient data: {x.shape[0]} frames for {n_components} components")
    rng = np.random.default_rng(seed)

    global_var = x.var(axis=0)
    var_floor = var_floor_factor * np.maximum(global_var, np.finfo(float).tiny)
    gmm = DiagGmm(np.ones(1), x.mean(axis=0)[None, :], np.maximum(global_var, var_floor)[None, :])

    while gmm.n_components < n_components:
        gmm = _split(gmm, min(gmm.n_components, n_components - gmm.n_components), rng)
        for _ in range(split_iters):
            gmm, _, _ = _em_sweep(gmm, x, var_floor)
        log.debug("split to %d components", gmm.n_components)

    for sweep in range(iters):
        new, avg_ll, floored = _em_sweep(gmm, x, var_floor)
        if not np.isfinite(avg_ll) or not np.all(np.isfinite(new.means)):
            raise GmmError(f"numerical failure at sweep {sweep}")
        if floored:
            log.info("variance flooring applied at sweep %d", sweep)
        if history is not None:
            history.append((sweep, avg_ll, floored))
        log.debug("sweep %d avg loglik %.6f", sweep, avg_ll)
        gmm = new
    if history is not None:
        final = float(np.mean(np.concatenate(
            [frame_log_likelihoods(gmm, x[i:i + CHUNK]) for i in range(0, len(x), CHUNK)])))
        history.append((iters, final, False))
    return gmm


def map_adapt(ubm: DiagGmm, feat, relevance: float = 10.0, iters: int = 3) -> DiagGmm:
    """Mean-only MAP adaptation; weights and variances are copied from the UBM.

    Each iteration recomputes posteriors with the current adapted model and
    interpolates towards the UBM means with the relevance factor.
    """
    if relevance <= 0:
        raise GmmError("relevance factor must be positive")
    if iters < 1:
        raise GmmError("need at least one iteration")
    x = _as_frames(feat)
    if x.shape[0] == 0:
        raise GmmError("empty feature matrix")
    _check_dim(ubm, x)
    model = ubm.copy()
    for _ in range(iters):
        post = posteriors(model, x)
        n = post.sum(axis=0)
        f = post.T @ x
        means = (f + relevance * ubm.means) / (n + relevance)[:, None]
        model = DiagGmm(ubm.weights.copy(), means, ubm.variances.copy())
    return model

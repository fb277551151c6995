"""Spherical normalization and two-covariance PLDA."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class PldaError(ValueError):
    pass


def _as_matrix(vectors) -> np.ndarray:
    arrs = [getattr(v, "w", v) for v in vectors] if not isinstance(vectors, np.ndarray) else vectors
    x = np.asarray(arrs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x


@dataclass
class SphericalNorm:
    """Iterated (center, whiten, length-normalize) chain.

    `means[i]` and `whiteners[i]` are the parameters of iteration i; a vector is
    mapped by ``v <- W_i (v - m_i); v <- v / |v|`` for each i in order.
    """

    means: list = field(default_factory=list)
    whiteners: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return self.means[0].shape[0]


def _whitener(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, R = x.shape
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    if n < R + 1 or np.linalg.matrix_rank(cov) < R:
        load = 1e-6 * np.trace(cov) / R
        warnings.warn(f"rank-deficient covariance for whitening; diagonal loading {load:.3g}")
        cov = cov + load * np.eye(R)
    chol = np.linalg.cholesky(cov)
    return mean, solve_triangular(chol, np.eye(R), lower=True)


def _length_norm(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise PldaError("degenerate vector: zero length at normalization step")
    return x / norms


def train_spherical_norm(vectors, iters: int = 2) -> SphericalNorm:
    x = _as_matrix(vectors)
    norm = SphericalNorm()
    for _ in range(iters):
        mean, W = _whitener(x)
        norm.means.append(mean)
        norm.whiteners.append(W)
        x = _length_norm((x - mean) @ W.T)
    return norm


def apply_spherical_norm(norm: SphericalNorm, v) -> np.ndarray:
    """Apply a trained chain to one vector (R,) or a batch (n, R)."""
    x = np.asarray(getattr(v, "w", v), dtype=np.float64)
    if x.shape[-1] != norm.dim:
        raise PldaError(f"dimension mismatch: vector {x.shape[-1]}, normalizer {norm.dim}")
    for mean, W in zip(norm.means, norm.whiteners):
        x = _length_norm((x - mean) @ W.T)
    return x


@dataclass
class PldaModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    norm: SphericalNorm | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.between = np.asarray(self.between, dtype=np.float64)
        self.within = np.asarray(self.within, dtype=np.float64)
        R = self.mean.shape[0]
        if self.between.shape != (R, R) or self.within.shape != (R, R):
            raise PldaError("inconsistent PLDA dimensions")
        try:
            np.linalg.cholesky(self.within)
        except np.linalg.LinAlgError as exc:
            raise PldaError("within-class covariance is not positive definite") from exc
        self._score_terms = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def score_terms(self):
        """Quadratic form (Q, P, const) with
        score = 0.5 e'Qe + 0.5 t'Qt + e'Pt + const on centered vectors."""
        if self._score_terms is None:
            total = self.between + self.within
            tot_inv = np.linalg.inv(total)
            schur = total - self.between @ tot_inv @ self.between
            a11 = np.linalg.inv(schur)
            a12 = -tot_inv @ self.between @ a11
            Q = tot_inv - a11
            P = -a12
            const = 0.5 * np.linalg.slogdet(total)[1] - 0.5 * np.linalg.slogdet(schur)[1]
            self._score_terms = (0.5 * (Q + Q.T), 0.5 * (P + P.T), const)
        return self._score_terms


def _class_log_likelihood(xc: np.ndarray, between, within, within_inv, within_logdet) -> float:
    n, R = xc.shape
    mean = xc.mean(axis=0)
    dev = xc - mean
    marg = between + within / n
    sign, logdet = np.linalg.slogdet(marg)
    quad = mean @ np.linalg.solve(marg, mean)
    ll = -0.5 * (R * LOG_2PI + logdet + quad)
    # within-class residual term h(X)
    ll += -0.5 * ((n - 1) * (R * LOG_2PI + within_logdet) + R * np.log(n)
                  + np.einsum("ij,jk,ik->", dev, within_inv, dev))
    return ll


def plda_log_likelihood(model: PldaModel, x: np.ndarray, labels) -> float:
    """Marginal log-likelihood of labelled training vectors under the model."""
    x = _as_matrix(x) - model.mean
    labels = np.asarray(labels)
    w_inv = np.linalg.inv(model.within)
    w_logdet = np.linalg.slogdet(model.within)[1]
    total = 0.0
    for lab in _ordered_unique(labels):
        total += _class_log_likelihood(x[labels == lab], model.between, model.within,
                                       w_inv, w_logdet)
    return float(total)


def _ordered_unique(labels):
    seen = {}
    for lab in labels.tolist():
        seen.setdefault(lab, None)
    return list(seen)


def train_plda(vectors, class_labels, iters: int = 10, seed: int | None = None,
               history: list | None = None, norm: SphericalNorm | None = None) -> PldaModel:
    """EM for the two-covariance model v = mu + y + e.

    Classes with a single vector contribute to the between-class statistics
    only. `seed` is accepted for interface symmetry; initialisation is
    data-driven and deterministic. `history` receives the training
    log-likelihood before each M-step and after the last one.
    """
    x = _as_matrix(vectors)
    labels = np.asarray(class_labels)
    if labels.shape[0] != x.shape[0]:
        raise PldaError(f"{x.shape[0]} vectors but {labels.shape[0]} labels")
    classes = _ordered_unique(labels)
    if len(classes) < 2:
        raise PldaError("PLDA training needs at least two classes")
    N, R = x.shape
    mu = x.mean(axis=0)
    xc = x - mu
    groups = [xc[labels == lab] for lab in classes]
    counts = np.array([g.shape[0] for g in groups])
    means = np.array([g.mean(axis=0) for g in groups])
    # within-class scatter is fixed across EM; only class-mean posteriors change
    scatter = sum((g - m).T @ (g - m) for g, m in zip(groups, means))

    n_within = N - len(classes)
    spread = np.trace(xc.T @ xc) / N / R
    load = 1e-6 * (spread if spread > 0 else 1.0)
    within = scatter / n_within if n_within > 0 else np.eye(R) * load
    within = within + load * np.eye(R)
    between = means.T @ means / len(classes)
    model = PldaModel(mu, between, within, norm)

    for it in range(iters):
        if history is not None:
            history.append((it, plda_log_likelihood(model, x, labels)))
        B, W = model.between, model.within
        acc_b = np.zeros((R, R))
        acc_w = scatter.copy()
        for n, m in zip(counts, means):
            # posterior of the class offset y: mean B (B + W/n)^-1 m, cov B - B (B + W/n)^-1 B
            gain = np.linalg.solve(B + W / n, B).T
            y = gain @ m
            cov = B - gain @ B
            cov = 0.5 * (cov + cov.T)
            second = cov + np.outer(y, y)
            acc_b += second
            d = m - y
            acc_w += n * (cov + np.outer(d, d))
        between = 0.5 * (acc_b + acc_b.T) / len(classes)
        # with singleton classes only, within-class spread is unidentifiable; keep the init
        if n_within > 0:
            within = 0.5 * (acc_w + acc_w.T) / N
        try:
            model = PldaModel(mu, between, within, norm)
        except PldaError as exc:
            raise PldaError(f"within-class covariance not PD after iteration {it}") from exc
    if history is not None:
        history.append((iters, plda_log_likelihood(model, x, labels)))
    return model


def plda_score(model: PldaModel, enroll, test) -> float:
    """Same-class vs different-class log-likelihood ratio for one pair."""
    e = np.asarray(getattr(enroll, "w", enroll), dtype=np.float64)
    t = np.asarray(getattr(test, "w", test), dtype=np.float64)
    if e.shape != (model.dim,) or t.shape != (model.dim,):
        raise PldaError(f"dimension mismatch: {e.shape}, {t.shape} vs model {model.dim}")
    return float(plda_score_batch(model, e[None, :], t[None, :])[0])


def plda_score_batch(model: PldaModel, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
    """Row-wise scores of paired (enroll[i], test[i])."""
    Q, P, const = model.score_terms()
    e = np.atleast_2d(enroll) - model.mean
    t = np.atleast_2d(test) - model.mean
    return (0.5 * np.einsum("ij,jk,ik->i", e, Q, e) + 0.5 * np.einsum("ij,jk,ik->i", t, Q, t)
            + np.einsum("ij,jk,ik->i", e, P, t) + const)

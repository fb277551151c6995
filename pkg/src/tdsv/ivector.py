"""Total-variability subspace (M = m + Tw) training and i-vector extraction."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .gmm import BaumWelchStats, DiagGmm

log = logging.getLogger(__name__)


class IvectorError(ValueError):
    pass


def ubm_hash(ubm: DiagGmm) -> str:
    h = hashlib.sha256()
    for arr in (ubm.weights, ubm.means, ubm.variances):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class IVector:
    """A fixed-dimension utterance or model embedding."""

    w: np.ndarray
    id: str = ""

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)

    @property
    def dim(self) -> int:
        return self.w.shape[0]


@dataclass
class TotalVariabilityModel:
    T: np.ndarray  # (C*D, R)
    ubm_means: np.ndarray  # (C, D)
    ubm_variances: np.ndarray  # (C, D)
    ubm_hash: str = ""

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        C, D = self.ubm_means.shape
        if self.T.shape[0] != C * D:
            raise IvectorError(f"T has {self.T.shape[0]} rows, expected C*D = {C * D}")
        if self.rank > C * D:
            raise IvectorError(f"rank {self.rank} exceeds supervector dim {C * D}")
        self._tsit = None

    @classmethod
    def from_ubm(cls, ubm: DiagGmm, T: np.ndarray) -> "TotalVariabilityModel":
        return cls(T, ubm.means.copy(), ubm.variances.copy(), ubm_hash(ubm))

    @property
    def n_components(self) -> int:
        return self.ubm_means.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.ubm_means.shape[1]

    @property
    def rank(self) -> int:
        return self.T.shape[1]

    def blocks(self) -> np.ndarray:
        """T reshaped to per-component blocks, (C, D, R)."""
        return self.T.reshape(self.n_components, self.feat_dim, self.rank)

    def tsit(self) -> np.ndarray:
        """Per-component T_c' Sigma_c^-1 T_c, shape (C, R, R)."""
        if self._tsit is None:
            Tb = self.blocks()
            self._tsit = np.einsum("cdr,cd,cds->crs", Tb, 1.0 / self.ubm_variances, Tb)
        return self._tsit


def _check_stats(model: TotalVariabilityModel, stats: BaumWelchStats):
    if stats.n.shape != (model.n_components,) or stats.f.shape != model.ubm_means.shape:
        raise IvectorError(
            f"stats shape {stats.n.shape}/{stats.f.shape} does not match model "
            f"(C={model.n_components}, D={model.feat_dim})")


def _spd_factor(a: np.ndarray, what: str):
    try:
        return cho_factor(a, lower=True)
    except LinAlgError:
        pass
    try:
        return cho_factor(a + 1e-8 * np.eye(a.shape[0]), lower=True)
    except LinAlgError as exc:
        raise IvectorError(f"degenerate statistics: {what}") from exc


def _posterior(model: TotalVariabilityModel, stats: BaumWelchStats):
    """Precision L = I + sum_c n_c T_c' S_c^-1 T_c, linear term b = T' S^-1 f~."""
    R = model.rank
    fc = stats.centered(model.ubm_means)
    b = model.T.T @ (fc / model.ubm_variances).reshape(-1)
    L = np.eye(R) + np.tensordot(stats.n, model.tsit(), axes=1)
    return L, b


def extract_ivector(model: TotalVariabilityModel, stats: BaumWelchStats) -> IVector:
    """Posterior mean of the latent factor for one utterance's statistics."""
    _check_stats(model, stats)
    L, b = _posterior(model, stats)
    w = cho_solve(_spd_factor(L, "posterior precision"), b)
    return IVector(w, stats.id)


def posterior_covariance(model: TotalVariabilityModel, stats: BaumWelchStats) -> np.ndarray:
    _check_stats(model, stats)
    L, _ = _posterior(model, stats)
    return cho_solve(_spd_factor(L, "posterior precision"), np.eye(model.rank))


def tv_objective(model: TotalVariabilityModel, stats_list) -> float:
    """Log-likelihood of the centered statistics, up to T-independent terms:
    sum over utterances of 0.5 b' L^-1 b - 0.5 log|L|."""
    total = 0.0
    for stats in stats_list:
        L, b = _posterior(model, stats)
        cf = _spd_factor(L, "posterior precision")
        total += 0.5 * b @ cho_solve(cf, b) - np.sum(np.log(np.diag(cf[0])))
    return float(total)


def train_tv_em(stats_list, ubm: DiagGmm, rank: int = 400, iters: int = 10, seed: int = 0,
                min_divergence: bool = False, history: list | None = None,
                init: np.ndarray | None = None) -> TotalVariabilityModel:
    """EM estimation of the total-variability matrix from Baum-Welch statistics.

    The covariance of the model is kept at the UBM variances. `history`
    receives the training objective before each M-step and once at the end.
    """
    stats_list = list(stats_list)
    if not stats_list:
        raise IvectorError("no training statistics")
    C, D = ubm.means.shape
    if rank > C * D:
        raise IvectorError(f"rank {rank} exceeds supervector dim {C * D}")
    if len(stats_list) < rank:
        log.warning("%d utterances for rank %d; subspace will be poorly determined",
                    len(stats_list), rank)
    if init is None:
        rng = np.random.default_rng(seed)
        init = 0.1 * rng.standard_normal((C * D, rank)) * np.sqrt(ubm.variances).reshape(-1, 1)
    model = TotalVariabilityModel.from_ubm(ubm, init)

    for it in range(iters):
        A = np.zeros((C, rank, rank))
        acc = np.zeros((C * D, rank))
        obj = 0.0
        w_sum = np.zeros(rank)
        ww_sum = np.zeros((rank, rank))
        for stats in stats_list:
            _check_stats(model, stats)
            L, b = _posterior(model, stats)
            cf = _spd_factor(L, f"posterior precision ({stats.id})")
            cov = cho_solve(cf, np.eye(rank))
            w = cov @ b
            obj += 0.5 * b @ w - np.sum(np.log(np.diag(cf[0])))
            second = cov + np.outer(w, w)
            A += stats.n[:, None, None] * second
            acc += np.outer(stats.centered(ubm.means).reshape(-1), w)
            w_sum += w
            ww_sum += second
        if history is not None:
            history.append((it, obj))
        log.debug("TV iteration %d objective %.6f", it, obj)

        T_new = np.empty_like(model.T)
        acc_b = acc.reshape(C, D, rank)
        for c in range(C):
            cf = _spd_factor(A[c], f"component {c}")
            T_new[c * D:(c + 1) * D] = cho_solve(cf, acc_b[c].T).T
        if min_divergence:
            n_utt = len(stats_list)
            mean_w = w_sum / n_utt
            cov_w = ww_sum / n_utt - np.outer(mean_w, mean_w)
            T_new = T_new @ np.linalg.cholesky(cov_w)
        model = TotalVariabilityModel.from_ubm(ubm, T_new)

    if history is not None:
        history.append((iters, tv_objective(model, stats_list)))
    return model


def enroll_average(vectors, id: str = "") -> IVector:
    """Arithmetic mean of a speaker's utterance embeddings."""
    vectors = list(vectors)
    if not vectors:
        raise IvectorError("cannot enroll from an empty collection")
    arrs = [v.w if isinstance(v, IVector) else np.asarray(v, dtype=np.float64) for v in vectors]
    dims = {a.shape for a in arrs}
    if len(dims) != 1:
        raise IvectorError(f"dimension mismatch among enrollment vectors: {sorted(dims)}")
    return IVector(np.mean(arrs, axis=0), id)

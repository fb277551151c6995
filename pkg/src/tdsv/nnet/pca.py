from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PcaError(ValueError):
    pass


@dataclass
class PcaProjection:
    mean: np.ndarray  # (H,)
    basis: np.ndarray  # (H, B), orthonormal columns
    eigenvalues: np.ndarray  # (B,)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) @ self.basis.T + self.mean


def train_pca(deep_features, dim: int, rank_tol: float = 1e-10) -> PcaProjection:
    """Top-`dim` principal directions of the (mean-centered) data, largest first.

    Each basis vector is sign-fixed so its largest-magnitude entry is positive.
    """
    if isinstance(deep_features, np.ndarray):
        x = np.asarray(deep_features, dtype=np.float64)
    else:
        x = np.vstack([np.asarray(f, dtype=np.float64) for f in deep_features])
    n, H = x.shape
    if dim > H:
        raise PcaError(f"requested {dim} components from {H}-dimensional data")
    if n < dim + 1:
        raise PcaError(f"need at least {dim + 1} frames, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dim]
    evals, evecs = evals[order], evecs[:, order]
    if evals[-1] <= rank_tol * max(evals[0], np.finfo(float).tiny):
        raise PcaError(f"data rank is below the requested {dim} components")
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(dim)])
    return PcaProjection(mean, evecs, evals)


def project_pca(pca: PcaProjection, feat):
    out = (np.asarray(feat, dtype=np.float64) - pca.mean) @ pca.basis
    if hasattr(feat, "with_frames"):
        return feat.with_frames(out)
    return out

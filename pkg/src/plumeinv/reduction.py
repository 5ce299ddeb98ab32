"""Centred PCA bases for state and wind snapshots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, RankTooLarge


@dataclass(frozen=True)
class PcaBasis:
    """Mean-centred truncated PCA basis.

    Attributes
    ----------
    mean : (m,) array
    basis : (m, r) array with orthonormal columns
    singular_values : (r,) array, non-increasing
    """

    mean: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def truncate(self, rank: int) -> "PcaBasis":
        if rank > self.rank:
            raise RankTooLarge(f"basis has rank {self.rank}, asked for {rank}")
        return PcaBasis(self.mean, self.basis[:, :rank], self.singular_values[:rank])


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _centered_svd(Y: np.ndarray, rank: int):
    """Leading left singular pairs of ``Y`` via the smaller Gram matrix."""
    m, K = Y.shape
    if K <= m:
        G = Y.T @ Y
        evals, V = np.linalg.eigh(G)
        order = np.argsort(evals)[::-1][:rank]
        evals = np.clip(evals[order], 0.0, None)
        s = np.sqrt(evals)
        V = V[:, order]
        U = Y @ V
        nz = s > s[0] * 1e-14 if rank else np.zeros(0, bool)
        U[:, nz] /= s[nz]
        if not np.all(nz):
            # null directions: complete with an orthonormal set
            Q, _ = np.linalg.qr(np.hstack([U[:, nz], np.random.default_rng(0).standard_normal((m, int((~nz).sum())))]))
            U[:, ~nz] = Q[:, int(nz.sum()):]
            s[~nz] = 0.0
    else:
        evals, U = np.linalg.eigh(Y @ Y.T)
        order = np.argsort(evals)[::-1][:rank]
        s = np.sqrt(np.clip(evals[order], 0.0, None))
        U = U[:, order]
    # one Gram-Schmidt pass keeps the columns orthonormal to rounding
    U, R = np.linalg.qr(U)
    U = U * np.sign(np.diag(R))
    return _fix_signs(U), s


def fit_pca(snapshots, rank: int) -> PcaBasis:
    """Fit a rank-``rank`` basis to the columns of an ``(m, K)`` snapshot matrix."""
    Y = np.asarray(snapshots, dtype=float)
    if Y.ndim != 2:
        raise DimensionMismatch("snapshots must be a 2-D (m, K) matrix")
    m, K = Y.shape
    if rank < 1 or rank > min(m, K):
        raise RankTooLarge(f"rank {rank} not in [1, {min(m, K)}]")
    mean = Y.mean(axis=1)
    U, s = _centered_svd(Y - mean[:, None], rank)
    return PcaBasis(mean, U, s)


def project(u, b: PcaBasis) -> np.ndarray:
    """Reduced coordinates ``basis^T (u - mean)``; accepts ``(m,)`` or ``(..., m)``."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] != b.dim:
        raise DimensionMismatch(f"expected state length {b.dim}, got {u.shape[-1]}")
    return (u - b.mean) @ b.basis


def reconstruct(c, b: PcaBasis) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != b.rank:
        raise DimensionMismatch(f"expected {b.rank} coordinates, got {c.shape[-1]}")
    return b.mean + c @ b.basis.T


def relative_errors(dataset, b: PcaBasis) -> np.ndarray:
    """Per-snapshot relative l2 reconstruction error; NaN for zero snapshots."""
    U = np.atleast_2d(np.asarray(dataset, dtype=float))
    err = np.linalg.norm(U - reconstruct(project(U, b), b), axis=1)
    norms = np.linalg.norm(U, axis=1)
    out = np.full(len(U), np.nan)
    nz = norms > 0
    out[nz] = err[nz] / norms[nz]
    return out


def reconstruction_error(dataset, b: PcaBasis) -> float:
    """Max relative l2 error over rows of ``dataset`` (zero rows skipped)."""
    errs = relative_errors(dataset, b)
    if np.all(np.isnan(errs)):
        return 0.0
    return float(np.nanmax(errs))


def select_rank(snapshots, target: float, check=None, max_rank: int | None = None) -> PcaBasis:
    """Smallest-rank basis whose reconstruction error on ``check`` is <= ``target``.

    ``snapshots`` is ``(m, K)`` as for :func:`fit_pca`; ``check`` holds rows
    to evaluate and defaults to the fitting snapshots. Falls back to the
    largest admissible rank when the target is never met.
    """
    Y = np.asarray(snapshots, dtype=float)
    rows = Y.T if check is None else np.atleast_2d(np.asarray(check, dtype=float))
    top = min(Y.shape) if max_rank is None else min(max_rank, *Y.shape)
    full = fit_pca(Y, top)
    lo, hi = 1, top
    if reconstruction_error(rows, full) > target:
        return full
    while lo < hi:
        mid = (lo + hi) // 2
        if reconstruction_error(rows, full.truncate(mid)) <= target:
            hi = mid
        else:
            lo = mid + 1
    return full.truncate(lo)

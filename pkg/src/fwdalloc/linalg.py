"""Small dense linear-algebra kernels: Cholesky, MVN sampling, cosines."""

from __future__ import annotations

import warnings

import numpy as np

from .rng import as_generator


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky factorization hits a non-positive pivot."""

    def __init__(self, index: int):
        super().__init__(f"matrix is not positive definite (failing pivot index {index})")
        self.index = index


def cholesky(mat: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == mat.

    Uses LAPACK on the fast path; on failure, reruns a scalar factorization
    to report which pivot went non-positive.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {mat.shape}")
    if not np.array_equal(mat, mat.T):
        raise ValueError("matrix is not symmetric")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    n = mat.shape[0]
    lower = np.zeros_like(mat)
    for j in range(n):
        pivot = mat[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise NotPositiveDefiniteError(j)
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (mat[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def chol_logdet(chol_lower: np.ndarray) -> float:
    """log det M from its Cholesky factor (= 2 * sum log diag L)."""
    return 2.0 * float(np.sum(np.log(np.diag(chol_lower))))


def sample_mvn(mu: np.ndarray, chol_lower: np.ndarray, rng, size: int | None = None) -> np.ndarray:
    """Draw mu + L @ u with u iid standard normal.

    With ``size`` set, returns a (size, dim) matrix whose row i equals the
    i-th sequential single draw from the same stream.
    """
    mu = np.asarray(mu, dtype=np.float64)
    dim = mu.shape[0]
    if chol_lower.shape != (dim, dim):
        raise ValueError(f"dimension mismatch: mu has {dim}, factor is {chol_lower.shape}")
    gen = as_generator(rng)
    if size is None:
        return mu + chol_lower @ gen.standard_normal(dim)
    u = gen.standard_normal((size, dim))
    return mu[None, :] + u @ chol_lower.T


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|), defined as 0 (with a warning) for zero vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine similarity of a zero vector is defined as 0", stacklevel=2)
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between row vectors; zero rows map to 0."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = rows / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    zero = norms == 0.0
    if np.any(zero):
        warnings.warn("zero embedding rows: cosine set to 0", stacklevel=2)
        sim[zero, :] = 0.0
        sim[:, zero] = 0.0
    np.fill_diagonal(sim, np.where(zero, 0.0, 1.0))
    return sim

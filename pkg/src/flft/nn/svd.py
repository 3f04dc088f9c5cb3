"""One-sided Jacobi SVD and truncated factorization of linear weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flft.errors import ConfigError, NumericalError

TOL = 1e-10
MAX_SWEEPS = 100


def jacobi_svd(a: np.ndarray, tol: float = TOL, max_sweeps: int = MAX_SWEEPS):
    """Thin SVD ``a = u @ diag(s) @ vt`` with singular values in descending order."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError("jacobi_svd expects a matrix")
    transposed = a.shape[0] < a.shape[1]
    work = (a.T if transposed else a).copy()
    n = work.shape[1]
    v = np.eye(n)
    # columns below this squared norm are numerically zero and never rotated
    negligible = (np.finfo(np.float64).eps * np.linalg.norm(work)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci, cj = work[:, i], work[:, j]
                alpha = ci @ ci
                beta = cj @ cj
                gamma = ci @ cj
                if alpha <= negligible or beta <= negligible:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wi = work[:, i].copy()
                work[:, i] = c * wi - s * work[:, j]
                work[:, j] = s * wi + c * work[:, j]
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sing = np.sqrt((work * work).sum(0))
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    nz = sing > 0
    u[:, nz] = work[:, nz] / sing[nz]
    if transposed:
        return v, sing, u.T
    return u, sing, v.T


@dataclass(frozen=True)
class LowRankFactorization:
    left: np.ndarray  # U * diag(S), P x z
    right: np.ndarray  # V^T, z x Q

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.left @ self.right


def svd_factorize(weight: np.ndarray, rank: int, svd=None) -> LowRankFactorization:
    """Best rank-``rank`` factor pair of ``weight``; ``svd`` may carry a precomputed (u, s, vt)."""
    p, q = weight.shape
    if not 1 <= rank <= min(p, q):
        raise ConfigError(f"rank {rank} outside [1, {min(p, q)}]")
    u, s, vt = svd if svd is not None else jacobi_svd(weight)
    return LowRankFactorization(
        (u[:, :rank] * s[:rank]).astype(weight.dtype), vt[:rank].astype(weight.dtype)
    )

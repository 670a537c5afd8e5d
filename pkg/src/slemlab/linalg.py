"""Cyclic Jacobi eigensolver and the smallest eigenvalue of ``P^T P / T``.

The solver uses round-robin (tournament) ordering: each round applies
``n/2`` disjoint plane rotations at once, and ``n-1`` rounds make one sweep
over all off-diagonal pairs. That keeps the classical convergence guarantee of
cyclic Jacobi while doing the work as whole-matrix numpy products.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "NotSymmetricError",
    "eigh_small",
    "sigma_min",
    "sigma_min_grad",
    "SigmaMinGrad",
    "MAX_DIM",
]

MAX_DIM = 256
SYMMETRY_RTOL = 1e-12
OFFDIAG_RTOL = 1e-12


class NotSymmetricError(ValueError):
    pass


@lru_cache(maxsize=32)
def _rounds(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Round-robin pairings of ``0..n-1``; a dummy slot is dropped for odd n."""
    m = n + (n % 2)
    players = list(range(m))
    out = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        out.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return tuple(out)


def _check_symmetric(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] > MAX_DIM:
        raise ValueError(f"dimension {a.shape[0]} exceeds {MAX_DIM}")
    if not np.isfinite(a).all():
        raise ValueError("matrix has non-finite entries")
    scale = max(np.max(np.abs(a), initial=0.0), 1.0)
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise NotSymmetricError("matrix is not symmetric within tolerance")


def eigh_small(
    a,
    vectors0: np.ndarray | None = None,
    max_sweeps: int = 60,
) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns) of ``a``.

    ``vectors0`` optionally warm-starts the rotation from a nearby orthonormal
    basis, e.g. the eigenvectors of the previous matrix in a slowly changing
    sequence. Sweeps stop once the off-diagonal Frobenius norm falls below
    ``1e-12 * ||a||_F``.
    """
    a = np.array(a, dtype=np.float64)
    _check_symmetric(a)
    n = a.shape[0]
    norm = np.linalg.norm(a)
    if vectors0 is None:
        v = np.eye(n)
        work = 0.5 * (a + a.T)
    else:
        v = np.array(vectors0, dtype=np.float64)
        work = v.T @ a @ v
        work = 0.5 * (work + work.T)
    if n == 1 or norm == 0.0:
        lam = np.diag(work).copy()
        order = np.argsort(lam, kind="stable")
        return lam[order], v[:, order]

    target = OFFDIAG_RTOL * norm
    rounds = _rounds(n)
    offdiag = ~np.eye(n, dtype=bool)
    eye = np.eye(n)
    for _ in range(max_sweeps):
        off = np.linalg.norm(work[offdiag])
        if off < target:
            break
        for p, q in rounds:
            apq = work[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            app, aqq = work[p, p], work[q, q]
            theta = (aqq - app) / (2.0 * apq)
            sgn = np.where(theta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = eye.copy()
            flat = rot.reshape(-1)
            flat[p * n + p] = c
            flat[q * n + q] = c
            flat[p * n + q] = s
            flat[q * n + p] = -s
            work = rot.T @ work @ rot
            v = v @ rot
        work = 0.5 * (work + work.T)
    lam = np.diag(work).copy()
    order = np.argsort(lam, kind="stable")
    return lam[order], v[:, order]


def _gram(p: np.ndarray, t: int) -> np.ndarray:
    k = p.T @ p / float(t)
    return 0.5 * (k + k.T)


def _validate(p, t: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
        raise ValueError("weight stack P must be a non-empty 2-D array")
    if t < 1:
        raise ValueError("T must be >= 1")
    if not np.isfinite(p).all():
        raise ValueError("weight stack P has non-finite entries")
    return p


def _resolved(lam: np.ndarray) -> float:
    """Smallest eigenvalue of a PSD Gram matrix, with round-off below the
    solver's resolution (``n * eps * lambda_max``) reported as exactly 0."""
    tol = lam.size * np.finfo(np.float64).eps * max(float(lam[-1]), 0.0)
    return 0.0 if lam[0] <= tol else float(lam[0])


def sigma_min(p, t: int, vectors0: np.ndarray | None = None) -> float:
    """Smallest eigenvalue of ``K = P^T P / T``; 0 when P has fewer rows than columns."""
    p = _validate(p, t)
    if p.shape[0] < p.shape[1]:
        return 0.0
    lam, _ = eigh_small(_gram(p, t), vectors0)
    return _resolved(lam)


@dataclass(frozen=True)
class SigmaMinGrad:
    value: float
    grad: np.ndarray
    eigvec: np.ndarray
    eigengap: float
    degenerate: bool
    vectors: np.ndarray | None = None


def sigma_min_grad(
    p,
    t: int,
    gap_tol: float = 1e-8,
    vectors0: np.ndarray | None = None,
) -> SigmaMinGrad:
    """Gradient of ``lambda_min(P^T P / T)`` with respect to ``P``: ``(2/T) P v v^T``.

    If the two smallest eigenvalues are within ``gap_tol`` the eigenvalue is not
    differentiable; the solver's eigenvector still yields a valid subgradient
    and ``degenerate`` is set.
    """
    p = _validate(p, t)
    rows, cols = p.shape
    if rows < cols:
        # null space of P contains the minimising direction, so P v = 0
        return SigmaMinGrad(0.0, np.zeros_like(p), np.zeros(cols), 0.0, True)
    lam, vecs = eigh_small(_gram(p, t), vectors0)
    v = vecs[:, 0]
    gap = float(lam[1] - lam[0]) if cols > 1 else float("inf")
    grad = (2.0 / t) * np.outer(p @ v, v)
    return SigmaMinGrad(_resolved(lam), grad, v, gap, gap <= gap_tol, vecs)

"""Dense real linear algebra used by the trainer and the verifiers.

All routines work in float64 and accept either a single matrix or a stack of
matrices with shape ``(..., rows, cols)``; reductions act on the last two axes.
"""
from __future__ import annotations

import operator
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DomainError

__all__ = [
    "SvdFactors",
    "as_matrix",
    "qr",
    "svd",
    "singular_values",
    "kyfan_antinorm_sq",
    "truncate_rank",
    "svd_of_product",
    "wedge_norm",
    "save_matrix_csv",
    "load_matrix_csv",
]

MAX_SWEEPS = 100


class SvdFactors(NamedTuple):
    """Thin SVD ``a = u @ diag(singular_values) @ vt``.

    ``u`` is ``rows x r``, ``vt`` is ``r x cols`` with ``r = min(rows, cols)``.
    Singular values are sorted non-increasing.
    """

    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values[..., None, :]) @ self.vt


def as_matrix(a, name="matrix") -> np.ndarray:
    """Validate and convert to a float64 array of at least two dimensions."""
    arr = np.array(a, dtype=np.float64)
    if arr.ndim < 2:
        raise DomainError(f"{name} must be at least 2-D, got shape {arr.shape}")
    if arr.shape[-1] == 0 or arr.shape[-2] == 0:
        raise DomainError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


def _check_rank_arg(k, a: np.ndarray) -> int:
    try:
        k = operator.index(k)
    except TypeError:
        raise DomainError(f"k must be an integer, got {k!r}") from None
    r = min(a.shape[-2:])
    if not 0 <= k <= r:
        raise DomainError(f"k={k} outside [0, {r}] for shape {a.shape[-2:]}")
    return k


def qr(a, mode: str = "reduced") -> tuple[np.ndarray, np.ndarray]:
    """Householder QR with a non-negative diagonal in ``R``.

    ``mode="reduced"`` returns ``Q`` with ``min(rows, cols)`` columns,
    ``mode="complete"`` returns the full square ``Q``.
    """
    if mode not in ("reduced", "complete"):
        raise DomainError(f"unknown QR mode {mode!r}")
    r = as_matrix(a).copy()
    m, n = r.shape[-2:]
    batch = r.shape[:-2]
    q = np.broadcast_to(np.eye(m), batch + (m, m)).copy()
    for j in range(min(m - 1, n)):
        x = r[..., j:, j]
        norm_x = np.linalg.norm(x, axis=-1)
        sign = np.where(x[..., 0] < 0, -1.0, 1.0)
        v = x.copy()
        v[..., 0] += sign * norm_x
        vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
        v = np.divide(v, vnorm, out=np.zeros_like(v), where=vnorm > 0)
        r[..., j:, :] -= 2.0 * v[..., :, None] * (v[..., None, :] @ r[..., j:, :])
        q[..., :, j:] -= 2.0 * (q[..., :, j:] @ v[..., :, None]) * v[..., None, :]
    p = min(m, n)
    diag = np.diagonal(r[..., :p, :p], axis1=-2, axis2=-1)
    signs = np.where(diag < 0, -1.0, 1.0)
    q[..., :, :p] *= signs[..., None, :]
    r[..., :p, :] *= signs[..., :, None]
    # below-diagonal entries are rounding residue after the reflections
    r = np.triu(r)
    if mode == "reduced":
        return q[..., :, :p], r[..., :p, :]
    return q, r


def _orthonormal_completion(basis: np.ndarray, count: int) -> np.ndarray:
    """Return ``count`` unit vectors orthogonal to the columns of ``basis``."""
    m = basis.shape[0]
    if basis.shape[1] == 0:
        return np.eye(m)[:, :count]
    q, _ = qr(basis, mode="complete")
    return q[:, basis.shape[1]:basis.shape[1] + count]


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    """Make the first significant entry of every left singular vector >= 0."""
    significant = np.abs(u) > 1e-10
    first = np.argmax(significant, axis=-2)
    lead = np.take_along_axis(u, first[..., None, :], axis=-2)[..., 0, :]
    flip = np.where(lead < 0, -1.0, 1.0)
    u *= flip[..., None, :]
    vt *= flip[..., :, None]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Column pairings covering every pair once, ``n // 2`` disjoint pairs per step."""
    players = list(range(n + n % 2))
    steps = []
    for _ in range(len(players) - 1):
        half = len(players) // 2
        pairs = [(min(a, b), max(a, b)) for a, b in zip(players[:half], reversed(players[half:]))]
        pairs = [pq for pq in pairs if pq[1] < n]
        if pairs:
            steps.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1], *players[1:-1]]
    return steps


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a stack of tall matrices (rows >= cols)."""
    m, n = a.shape[-2:]
    scale = np.linalg.norm(a, axis=(-2, -1))
    safe = np.where(scale > 0, scale, 1.0)
    w = a / safe[..., None, None]
    v = np.broadcast_to(np.eye(n), a.shape[:-2] + (n, n)).copy()
    tol = max(m, n) * np.finfo(np.float64).eps
    # w has unit Frobenius norm, so columns below this are rounding residue
    floor = tol * tol

    schedule = _round_robin(n)
    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        for p, q in schedule:
            wp = w[..., :, p]
            wq = w[..., :, q]
            alpha = np.sum(wp * wp, axis=-2)
            beta = np.sum(wq * wq, axis=-2)
            gamma = np.sum(wp * wq, axis=-2)
            need = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not np.any(need):
                continue
            rotated = True
            g = np.where(need, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta < 0, -1.0, 1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = np.where(need, c * t, 0.0)[..., None, :]
            cs = np.where(need, c, 1.0)[..., None, :]
            w[..., :, p], w[..., :, q] = cs * wp - sn * wq, sn * wp + cs * wq
            vp = v[..., :, p]
            vq = v[..., :, q]
            v[..., :, p], v[..., :, q] = cs * vp - sn * vq, sn * vp + cs * vq
        if not rotated:
            break
    else:
        raise ConvergenceError("one-sided Jacobi SVD did not converge", MAX_SWEEPS)

    sigma = np.linalg.norm(w, axis=-2)
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    w = np.take_along_axis(w, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)

    zero = sigma <= tol
    u = np.divide(w, sigma[..., None, :], out=np.zeros_like(w), where=~zero[..., None, :])
    if np.any(zero):
        flat_u = u.reshape((-1, m, n))
        flat_zero = zero.reshape((-1, n))
        for i in np.flatnonzero(flat_zero.any(axis=-1)):
            bad = flat_zero[i]
            flat_u[i][:, bad] = _orthonormal_completion(flat_u[i][:, ~bad], int(bad.sum()))
        u = flat_u.reshape(w.shape)
        sigma = np.where(zero, 0.0, sigma)
    return u, sigma * scale[..., None], np.swapaxes(v, -1, -2)


def svd(a) -> SvdFactors:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Deterministic for a fixed input. Singular values below
    ``max(rows, cols) * eps * |a|_F`` are returned as exact zeros with
    orthonormally completed singular vectors. Raises ``ConvergenceError`` if
    the rotations have not settled after ``MAX_SWEEPS`` sweeps.
    """
    a = as_matrix(a)
    m, n = a.shape[-2:]
    if m >= n:
        u, s, vt = _jacobi_tall(a)
    else:
        v, s, ut = _jacobi_tall(np.swapaxes(a, -1, -2))
        u, vt = np.swapaxes(ut, -1, -2), np.swapaxes(v, -1, -2)
    _fix_signs(u, vt)
    return SvdFactors(u, s, vt)


def singular_values(a) -> np.ndarray:
    return svd(a).singular_values


def kyfan_antinorm_sq(a, k) -> np.ndarray | float:
    """Sum of the squared singular values beyond the ``k`` largest.

    Zero exactly when ``rank(a) <= k``; equals the squared Frobenius distance
    from ``a`` to the nearest matrix of rank at most ``k``.
    """
    a = as_matrix(a)
    k = _check_rank_arg(k, a)
    s = svd(a).singular_values
    out = np.sum(s[..., k:] ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def truncate_rank(a, k) -> np.ndarray:
    """Best Frobenius-norm approximation of rank at most ``k``."""
    a = as_matrix(a)
    k = _check_rank_arg(k, a)
    return _truncate_factors(svd(a), k)


def _truncate_factors(f: SvdFactors, k: int) -> np.ndarray:
    return (f.u[..., :, :k] * f.singular_values[..., None, :k]) @ f.vt[..., :k, :]


def svd_of_product(jd, je) -> SvdFactors:
    """SVD of ``jd @ je`` without forming the product.

    ``jd`` is ``p x d`` and ``je`` is ``d x q`` with ``d <= min(p, q)``. Both
    factors are QR-reduced so only a ``d x d`` core is decomposed; the
    remaining singular values are zero and the singular bases are completed
    with orthonormal complements. When ``d`` exceeds ``min(p, q)`` the
    product is decomposed directly.
    """
    jd = as_matrix(jd, "jd")
    je = as_matrix(je, "je")
    p, d = jd.shape[-2:]
    d2, q = je.shape[-2:]
    if d != d2:
        raise DomainError(f"inner dimensions differ: jd is {p}x{d}, je is {d2}x{q}")
    r = min(p, q)
    if d > r:
        return svd(jd @ je)
    q1, r1 = qr(jd, mode="complete")
    q2, r2 = qr(np.swapaxes(je, -1, -2), mode="complete")
    core = r1[..., :d, :] @ np.swapaxes(r2[..., :d, :], -1, -2)
    uc, s, vct = svd(core)
    u = np.concatenate([q1[..., :, :d] @ uc, q1[..., :, d:r]], axis=-1)
    v = np.concatenate([q2[..., :, :d] @ np.swapaxes(vct, -1, -2), q2[..., :, d:r]], axis=-1)
    s = np.concatenate([s, np.zeros(s.shape[:-1] + (r - d,))], axis=-1)
    vt = np.swapaxes(v, -1, -2).copy()
    _fix_signs(u, vt)
    return SvdFactors(u, s, vt)


def wedge_norm(a, b) -> float:
    """Norm of the wedge product of two vectors.

    Uses ``||a ^ b|| = ||a|| * ||b - proj_a(b)||``, which equals the Lagrange
    identity ``sqrt(|a|^2 |b|^2 - (a.b)^2)`` but does not cancel for nearly
    parallel inputs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DomainError(f"wedge_norm needs equal-length vectors, got {a.shape} and {b.shape}")
    aa = a @ a
    if aa == 0.0:
        return 0.0
    resid = b - (a @ b / aa) * a
    return float(np.sqrt(aa) * np.linalg.norm(resid))


def save_matrix_csv(path, a) -> None:
    a = as_matrix(a)
    if a.ndim != 2:
        raise DomainError("only single matrices can be written to CSV")
    np.savetxt(Path(path), a, delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return as_matrix(np.loadtxt(Path(path), delimiter=",", ndmin=2))

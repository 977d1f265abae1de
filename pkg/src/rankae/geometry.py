"""Numerical curvature verifiers for smooth maps and trained autoencoders.

A map ``g`` with Jacobian ``J`` and component Hessians ``H_i`` bounds the
first principal curvature of its image at ``g(x)`` by

    sup over eps of  min_lambda |[eps^T H_i eps]_i - lambda J eps| / |J eps|^2

and the minimum over ``lambda`` is the residual of projecting the Hessian
vector off ``J eps``. The supremum is approximated over a finite direction
set, so every estimate here is a lower bound on that supremum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DegeneratePointError, DomainError, RankDeficientError
from .linalg import svd, wedge_norm
from .net import AutoencoderNet, apply_part, component_hessians, jacobian

DEFAULT_RANDOM_DIRECTIONS = 32
# sigma_k of the decoder Jacobian below this makes the encoder/decoder bound meaningless
DECODER_RANK_TOL = 1e-10


@runtime_checkable
class SmoothMap(Protocol):
    def __call__(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...

    def hessians(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class NetMap:
    """One part (``full``, ``encoder`` or ``decoder``) of an autoencoder as a map."""

    net: AutoencoderNet
    part: str = "full"
    hessian_step: float = 1e-4

    def __call__(self, x):
        return apply_part(self.net, np.asarray(x, dtype=np.float64), self.part)

    def jacobian(self, x):
        return jacobian(self.net, np.asarray(x, dtype=np.float64), self.part)

    def hessians(self, x):
        return component_hessians(self.net, x, self.part, step=self.hessian_step)


@dataclass(frozen=True)
class SphereMap:
    """Radial projection ``x -> radius * x / |x|`` onto a sphere."""

    radius: float = 1.0

    def _norm(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = np.linalg.norm(x)
        if r == 0.0:
            raise DomainError("radial projection is undefined at the origin")
        return x, r

    def __call__(self, x):
        x, r = self._norm(x)
        return self.radius * x / r

    def jacobian(self, x):
        x, r = self._norm(x)
        return self.radius * (np.eye(len(x)) / r - np.outer(x, x) / r**3)

    def hessians(self, x):
        x, r = self._norm(x)
        n = len(x)
        eye = np.eye(n)
        cross = (eye[:, :, None] * x[None, None, :] + x[None, :, None] * eye[:, None, :]) / r**3
        radial = x[:, None, None] * (eye / r**3 - 3.0 * np.outer(x, x) / r**5)[None]
        return self.radius * (-cross - radial)


@dataclass(frozen=True)
class CurvatureEstimate:
    value: float
    epsilon_scale: float
    direction_count: int
    convergence_trace: list = field(default_factory=list)


@dataclass(frozen=True)
class TangentBasis:
    vectors: np.ndarray
    at_point: np.ndarray

    def projector(self) -> np.ndarray:
        return self.vectors @ self.vectors.T


def default_scales(start=1e-1, stop=1e-4, factor=0.5) -> list[float]:
    """Geometric ladder ``start, start*factor, ...`` down to ``stop``."""
    out = [float(start)]
    while out[-1] * factor >= stop * (1 - 1e-12):
        out.append(out[-1] * factor)
    return out


def default_directions(n, seed=0, random_count=DEFAULT_RANDOM_DIRECTIONS) -> np.ndarray:
    """The ``2n`` signed axes followed by ``random_count`` seeded unit vectors."""
    eye = np.eye(n)
    rnd = np.random.default_rng(seed).standard_normal((random_count, n))
    rnd /= np.linalg.norm(rnd, axis=1, keepdims=True)
    return np.concatenate([eye, -eye, rnd])


def _check_ladder(scales):
    s = np.asarray(scales, dtype=np.float64).ravel()
    if len(s) == 0 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
        raise DomainError("scales must be a non-empty, strictly decreasing list of positive numbers")
    return s


def _check_directions(directions, n):
    u = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if u.shape[1] != n:
        raise DomainError(f"directions have length {u.shape[1]}, input dimension is {n}")
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0):
        raise DomainError("zero direction vector")
    return u / norms[:, None]


def projection_residual(a, b) -> np.ndarray:
    """``min_lambda |b - lambda a|`` row-wise, i.e. ``|b - (a.b / a.a) a|``."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    aa = np.sum(a * a, axis=1, keepdims=True)
    coef = np.divide(np.sum(a * b, axis=1, keepdims=True), aa, out=np.zeros_like(aa), where=aa > 0)
    return np.linalg.norm(b - coef * a, axis=1)


def curvature_quotients(smooth_map: SmoothMap, x, scales=None, directions=None,
                       mode="hessian") -> np.ndarray:
    """Curvature quotient for every (scale, direction) pair, shape ``(S, D)``.

    ``mode="hessian"`` uses ``eps^T H_i eps`` from ``smooth_map.hessians``;
    ``mode="taylor"`` replaces it by ``2 (g(x + eps) - g(x) - J eps)``, which
    only agrees in the limit. Directions with ``J eps`` numerically zero are
    NaN.
    """
    if mode not in ("hessian", "taylor"):
        raise DomainError(f"unknown quotient mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    s = _check_ladder(default_scales() if scales is None else scales)
    u = _check_directions(default_directions(len(x)) if directions is None else directions, len(x))
    jac = np.atleast_2d(smooth_map.jacobian(x))
    ju = u @ jac.T
    # kernel test on the unit direction so it does not depend on the scale
    kernel = np.linalg.norm(ju, axis=1) <= 1e-10 * max(1.0, np.linalg.norm(jac))
    out = np.full((len(s), len(u)), np.nan)
    if mode == "hessian":
        hess = np.asarray(smooth_map.hessians(x))
        uhu = np.einsum("oij,di,dj->do", hess, u, u)
    else:
        gx = np.asarray(smooth_map(x))
    for i, scale in enumerate(s):
        a = scale * ju
        if mode == "hessian":
            b = scale * scale * uhu
        else:
            b = np.array([2.0 * (np.asarray(smooth_map(x + scale * d)) - gx - ad) for d, ad in zip(u, a)])
        q = projection_residual(a, b) / np.where(kernel, 1.0, np.sum(a * a, axis=1))
        out[i] = np.where(kernel, np.nan, q)
    return out


def curvature_bound(smooth_map: SmoothMap, x, scales=None, directions=None,
                   mode="hessian") -> CurvatureEstimate:
    """Upper-bound estimate of the first principal curvature of the image at ``g(x)``.

    The value is the largest quotient over directions at the smallest scale;
    ``convergence_trace`` holds the per-scale maxima so drift is visible.
    """
    s = _check_ladder(default_scales() if scales is None else scales)
    q = curvature_quotients(smooth_map, x, s, directions, mode)
    live = ~np.isnan(q[-1])
    if not live.any():
        raise DegeneratePointError("degenerate point: every direction lies in the Jacobian kernel")
    trace = [(float(sc), float(np.nanmax(row))) for sc, row in zip(s, q)]
    return CurvatureEstimate(trace[-1][1], float(s[-1]), int(live.sum()), trace)


def encoder_decoder_bound(encoder_map: SmoothMap, decoder_map: SmoothMap, x, scales=None,
                 directions=None) -> float:
    """``(sigma_1 C(e) + sqrt(sum_i |H_{d_i}|_F^2)) / sigma_k^2`` at ``x``.

    ``sigma_1 >= ... >= sigma_k > 0`` are the singular values of the decoder
    Jacobian at the code ``e(x)`` (``k`` = code dimension) and ``C(e)`` is
    :func:`curvature_bound` of the encoder over the same scales and directions.
    """
    x = np.asarray(x, dtype=np.float64)
    code = np.asarray(encoder_map(x), dtype=np.float64)
    sig = svd(np.atleast_2d(decoder_map.jacobian(code))).singular_values
    if sig[-1] < DECODER_RANK_TOL:
        raise RankDeficientError("decoder rank-deficient", sig)
    c_e = curvature_bound(encoder_map, x, scales, directions).value
    h = np.asarray(decoder_map.hessians(code))
    return float((sig[0] * c_e + np.sqrt(np.sum(h * h))) / sig[-1] ** 2)


def encoder_decoder_check(net: AutoencoderNet, x, scales=None, directions=None) -> tuple[float, float]:
    """``(lhs, rhs)``: curvature estimate of the full net and its encoder/decoder bound."""
    lhs = curvature_bound(NetMap(net, "full"), x, scales, directions).value
    rhs = encoder_decoder_bound(NetMap(net, "encoder"), NetMap(net, "decoder"), x, scales, directions)
    return lhs, rhs


def curve_curvature(velocity, acceleration) -> float:
    """Curvature ``|v ^ a| / |v|^3`` of a curve with velocity ``v`` and acceleration ``a``."""
    v = np.asarray(velocity, dtype=np.float64)
    speed = np.linalg.norm(v)
    if speed == 0.0:
        raise DomainError("curvature is undefined at zero speed")
    return wedge_norm(v, np.asarray(acceleration, dtype=np.float64)) / speed**3


def curve_curvature_at(curve, t=0.0, step=1e-4) -> float:
    """:func:`curve_curvature` with derivatives from central differences of ``curve``."""
    c0 = np.asarray(curve(t), dtype=np.float64)
    cp = np.asarray(curve(t + step), dtype=np.float64)
    cm = np.asarray(curve(t - step), dtype=np.float64)
    return curve_curvature((cp - cm) / (2 * step), (cp - 2 * c0 + cm) / step**2)


def tangent_bases(net: AutoencoderNet, points, k) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` left singular vectors of the Jacobian at every row of ``points``.

    Returns ``(bases, ok, spectra)`` with ``bases`` of shape ``(N, n, k)``;
    rows where ``sigma_k`` is numerically zero have ``ok`` False.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    f = svd(jacobian(net, pts))
    s = f.singular_values
    if not 1 <= k <= s.shape[1]:
        raise DomainError(f"k={k} outside [1, {s.shape[1]}]")
    tol = max(f.u.shape[-2:]) * np.finfo(np.float64).eps * np.maximum(s[:, 0], np.finfo(np.float64).tiny)
    return f.u[:, :, :k].copy(), s[:, k - 1] > tol, s


def tangent_basis(net: AutoencoderNet, x, k) -> TangentBasis:
    """Top-``k`` left singular vectors of the autoencoder Jacobian at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    bases, ok, s = tangent_bases(net, x[None], k)
    if not ok[0]:
        raise RankDeficientError(f"Jacobian rank is below k={k}", s[0])
    return TangentBasis(bases[0], x.copy())

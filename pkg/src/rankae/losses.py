"""Objective terms for rank-regularized autoencoder training.

Every term comes in two flavours: a plain function returning a float
(``reconstruction_loss``, ``kappa_term``, ``rank_penalty``, ``objective``)
and a lower-level function with a ``grad`` flag returning a :class:`TermValue`
that carries the exact gradient over ``theta``. The latter plug straight into
:func:`rankae.net.loss_gradient` through ``functools.partial``.

Averaging follows the minibatch form used by the trainer: reconstruction and
curvature terms are means over the batch, the rank term is a sum over the
sampled anchors and ``objective`` divides it by the number of samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, NonFiniteError
from .linalg import singular_values
from .net import AutoencoderNet, Trace

KAPPA_MODES = ("kappa0", "kappa1", "kappa2")
# kappa2 skips an example when |J eps|^2 < KAPPA2_GUARD * |eps|^2
KAPPA2_GUARD = 1e-12


class TermValue(NamedTuple):
    value: float
    grad: np.ndarray | None = None
    guard_hits: int = 0
    parts: dict | None = None


@dataclass(frozen=True)
class CurvatureMode:
    mode: str = "kappa1"
    noise_sigma: float = 0.8

    def __post_init__(self):
        if self.mode not in KAPPA_MODES:
            raise DomainError(f"curvature mode must be one of {KAPPA_MODES}, got {self.mode!r}")
        if not self.noise_sigma > 0:
            raise DomainError(f"noise_sigma must be positive, got {self.noise_sigma}")


@dataclass(frozen=True, eq=False)
class RankTargets:
    """Rank-``k`` target matrices attached to fixed anchor points."""

    anchor_indices: np.ndarray
    matrices: np.ndarray
    k: int

    _pos: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        idx = np.asarray(self.anchor_indices, dtype=np.int64).ravel()
        mats = np.asarray(self.matrices, dtype=np.float64)
        if np.any(idx < 0):
            raise DomainError("anchor indices must be non-negative")
        if len(np.unique(idx)) != len(idx):
            raise DomainError("anchor indices must be distinct")
        if mats.ndim != 3 or mats.shape[0] != len(idx):
            raise DomainError(f"need one matrix per anchor, got {mats.shape} for {len(idx)} anchors")
        if not 0 <= self.k <= min(mats.shape[1:]):
            raise DomainError(f"k={self.k} outside [0, {min(mats.shape[1:])}]")
        object.__setattr__(self, "anchor_indices", idx)
        object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "_pos", {int(i): j for j, i in enumerate(idx)})

    @classmethod
    def zeros(cls, anchor_indices, n, k) -> "RankTargets":
        return cls(anchor_indices, np.zeros((len(anchor_indices), n, n)), k)

    def __len__(self):
        return len(self.anchor_indices)

    def positions(self, indices) -> np.ndarray:
        """Map dataset indices to rows of ``matrices``."""
        try:
            return np.array([self._pos[int(i)] for i in np.ravel(indices)], dtype=np.int64)
        except KeyError as e:
            raise DomainError(f"index {e.args[0]} is not an anchor") from None

    def max_excess_rank_ratio(self) -> float:
        """Largest ``sigma_{k+1} / sigma_1`` over the targets (0 for exact rank k)."""
        s = singular_values(self.matrices)
        if self.k >= s.shape[1]:
            return 0.0
        top = np.where(s[:, 0] > 0, s[:, 0], 1.0)
        return float(np.max(s[:, self.k] / top))


def _points(data) -> np.ndarray:
    return np.asarray(getattr(data, "points", data), dtype=np.float64)


def _check_batch(net, batch):
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise DomainError("empty batch")
    if batch.shape[1] != net.n:
        raise DomainError(f"batch rows have length {batch.shape[1]}, net expects {net.n}")
    return batch


def _finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(name)


def reconstruction(net: AutoencoderNet, batch, *, grad=False) -> TermValue:
    """Mean squared reconstruction error over the batch."""
    y = _check_batch(net, batch)
    tr = Trace(net, y)
    r = y - tr.output
    _finite("reconstruction", r)
    value = float(np.mean(np.sum(r * r, axis=1)))
    if not grad:
        return TermValue(value)
    g = tr.backward({tr.out_index: (-2.0 * r / len(y), None)})
    return TermValue(value, g)


def _jacobian_shift(net, y, noise, part, grad, scale, name):
    """Mean of ``|J(y + eps) - J(y)|_F^2`` for the chosen network part."""
    b = len(y)
    tr = Trace(net, np.concatenate([y, y + noise]), np.eye(net.n), part=part)
    d = tr.tangent[b:] - tr.tangent[:b]
    _finite(name, d)
    value = scale * float(np.mean(np.sum(d * d, axis=(1, 2))))
    if not grad:
        return TermValue(value)
    c = (2.0 * scale / b) * d
    g = tr.backward({tr.out_index: (None, np.concatenate([-c, c]))})
    return TermValue(value, g)


def _taylor_quotient(net, y, noise, grad):
    b, n = y.shape
    seeds = np.zeros((2 * b, n, 1))
    seeds[:b, :, 0] = noise
    tr = Trace(net, np.concatenate([y, y + noise]), seeds)
    g0, g1 = tr.output[:b], tr.output[b:]
    jeps = tr.tangent[:b, :, 0]
    r = g1 - g0 - jeps
    den = np.sum(jeps * jeps, axis=1)
    live = den >= KAPPA2_GUARD * np.sum(noise * noise, axis=1)
    safe = np.where(live, den, 1.0)
    num = np.sum(r * r, axis=1)
    q = np.where(live, num / safe, 0.0)
    _finite("kappa2", q)
    value = float(np.mean(q))
    hits = int(b - live.sum())
    if not grad:
        return TermValue(value, guard_hits=hits)
    w = (live / safe)[:, None] / b
    d_g1 = 2.0 * r * w
    d_jeps = -d_g1 - 2.0 * (num / safe)[:, None] * w * jeps
    out_cot = np.concatenate([-d_g1, d_g1])
    tan_cot = np.zeros_like(tr.tangent)
    tan_cot[:b, :, 0] = d_jeps
    g = tr.backward({tr.out_index: (out_cot, tan_cot)})
    return TermValue(value, g, hits)


def kappa(net: AutoencoderNet, batch, noise, mode="kappa1", *, grad=False,
          normalized=False) -> TermValue:
    """Curvature regularizer with one noise draw per example.

    ``kappa0``: encoder Jacobian shift; ``kappa1``: full Jacobian shift
    (times ``n**-2`` when ``normalized``); ``kappa2``: squared Taylor
    remainder over ``|J eps|^2``.
    """
    if isinstance(mode, CurvatureMode):
        mode = mode.mode
    if mode not in KAPPA_MODES:
        raise DomainError(f"unknown curvature mode {mode!r}")
    y = _check_batch(net, batch)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != y.shape:
        raise DomainError(f"noise shape {noise.shape} differs from batch shape {y.shape}")
    if mode == "kappa0":
        return _jacobian_shift(net, y, noise, "encoder", grad, 1.0, "kappa0")
    if mode == "kappa1":
        scale = net.n ** -2 if normalized else 1.0
        return _jacobian_shift(net, y, noise, "full", grad, scale, "kappa1")
    return _taylor_quotient(net, y, noise, grad)


def contractive(net: AutoencoderNet, batch, *, grad=False) -> TermValue:
    """Mean squared Frobenius norm of the encoder Jacobian."""
    y = _check_batch(net, batch)
    tr = Trace(net, y, np.eye(net.n), part="encoder")
    je = tr.tangent
    _finite("contractive", je)
    value = float(np.mean(np.sum(je * je, axis=(1, 2))))
    if not grad:
        return TermValue(value)
    g = tr.backward({tr.out_index: (None, 2.0 * je / len(y))})
    return TermValue(value, g)


def rank_term(net: AutoencoderNet, points, targets, *, grad=False) -> TermValue:
    """Sum over points of ``|J(z_i) - B_i|_F^2`` for explicit target matrices."""
    z = _check_batch(net, points)
    targets = np.asarray(targets, dtype=np.float64)
    tr = Trace(net, z, np.eye(net.n))
    d = tr.tangent - targets
    _finite("rank penalty", d)
    value = float(np.sum(d * d))
    if not grad:
        return TermValue(value)
    return TermValue(value, tr.backward({tr.out_index: (None, 2.0 * d)}))


def reconstruction_loss(net: AutoencoderNet, batch) -> float:
    return reconstruction(net, batch).value


def kappa_term(net: AutoencoderNet, batch, mode: CurvatureMode, noise, normalized=False) -> float:
    return kappa(net, batch, noise, mode, normalized=normalized).value


def rank_penalty(net: AutoencoderNet, dataset, targets: RankTargets, subsample=None) -> float:
    """``sum_j |J(x_{i_j}) - B_j|_F^2`` over the sampled anchors (all by default)."""
    pts = _points(dataset)
    idx = targets.anchor_indices if subsample is None else np.ravel(subsample)
    pos = targets.positions(idx)
    if len(pos) == 0:
        return 0.0
    return rank_term(net, pts[idx], targets.matrices[pos]).value


def _fused(net, y, *, gamma=0.0, mode="kappa1", noise=None, normalized=False,
           contract=0.0, lam=0.0, anchor_rows=None, anchor_targets=None, grad=False):
    """All weighted terms from a single traced pass over the stacked rows.

    Rows are ``[y, y + noise, anchors]`` (the last two only when needed), all
    seeded with the identity so every block carries its full Jacobian.
    """
    b, n = y.shape
    n_enc = len(net.encoder_layers)
    use_noise = gamma != 0.0
    use_rank = lam != 0.0 and anchor_rows is not None and len(anchor_rows) > 0
    if use_noise:
        if noise is None:
            raise DomainError("a curvature term needs a noise sample")
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != y.shape:
            raise DomainError(f"noise shape {noise.shape} differs from batch shape {y.shape}")
    blocks = [y] + ([y + noise] if use_noise else []) + ([anchor_rows] if use_rank else [])
    needs_tangent = use_noise or use_rank or contract != 0.0
    tr = Trace(net, np.concatenate(blocks), np.eye(n) if needs_tangent else None)
    out, tan, code_tan = tr.output, tr.tangent, tr.t[n_enc]
    cot_out = np.zeros_like(out)
    cot_tan = np.zeros_like(tan) if needs_tangent else None
    cot_code = np.zeros_like(code_tan) if needs_tangent else None
    parts, hits = {}, 0

    r = y - out[:b]
    _finite("reconstruction", r)
    parts["reconstruction"] = float(np.mean(np.sum(r * r, axis=1)))
    total = parts["reconstruction"]
    cot_out[:b] = -2.0 * r / b

    if contract != 0.0:
        je = code_tan[:b]
        _finite("contractive", je)
        parts["contractive"] = float(np.mean(np.sum(je * je, axis=(1, 2))))
        total += contract * parts["contractive"]
        cot_code[:b] += (2.0 * contract / b) * je

    if use_noise:
        sl0, sl1 = slice(0, b), slice(b, 2 * b)
        if mode in ("kappa0", "kappa1"):
            src, cot = (code_tan, cot_code) if mode == "kappa0" else (tan, cot_tan)
            scale = net.n ** -2 if (mode == "kappa1" and normalized) else 1.0
            d = src[sl1] - src[sl0]
            _finite(mode, d)
            parts["kappa"] = scale * float(np.mean(np.sum(d * d, axis=(1, 2))))
            c = (2.0 * gamma * scale / b) * d
            cot[sl1] += c
            cot[sl0] -= c
        else:
            jeps = np.matmul(tan[sl0], noise[:, :, None])[:, :, 0]
            r2 = out[sl1] - out[sl0] - jeps
            den = np.sum(jeps * jeps, axis=1)
            live = den >= KAPPA2_GUARD * np.sum(noise * noise, axis=1)
            safe = np.where(live, den, 1.0)
            num = np.sum(r2 * r2, axis=1)
            q = np.where(live, num / safe, 0.0)
            _finite("kappa2", q)
            parts["kappa"] = float(np.mean(q))
            hits = int(b - live.sum())
            w = gamma * (live / safe)[:, None] / b
            d_g1 = 2.0 * r2 * w
            d_jeps = -d_g1 - 2.0 * (num / safe)[:, None] * w * jeps
            cot_out[sl1] += d_g1
            cot_out[sl0] -= d_g1
            cot_tan[sl0] += d_jeps[:, :, None] * noise[:, None, :]
        total += gamma * parts["kappa"]

    if use_rank:
        start = 2 * b if use_noise else b
        d = tan[start:] - anchor_targets
        _finite("rank penalty", d)
        mz = len(anchor_rows)
        parts["rank"] = float(np.sum(d * d)) / mz
        total += lam * parts["rank"]
        cot_tan[start:] += (2.0 * lam / mz) * d

    if not grad:
        return TermValue(total, None, hits, parts)
    cots = {tr.out_index: (cot_out, cot_tan)}
    if needs_tangent:
        cots[n_enc] = (None, cot_code)
    return TermValue(total, tr.backward(cots), hits, parts)


def objective_terms(net: AutoencoderNet, batch, targets: RankTargets | None, *, lam=0.0, gamma=0.0,
                    mode="kappa1", noise=None, anchor_points=None, anchor_sample=None,
                    normalized=False, grad=False) -> TermValue:
    """``recon + gamma * kappa + lam * mean_i |J(z_i) - B_{z_i}|^2``.

    ``anchor_points`` holds the dataset rows of the anchors (aligned with
    ``targets.matrices``); ``anchor_sample`` holds positions into them.
    Terms with a zero weight are skipped entirely.
    """
    if isinstance(mode, CurvatureMode):
        mode = mode.mode
    if mode not in KAPPA_MODES:
        raise DomainError(f"unknown curvature mode {mode!r}")
    y = _check_batch(net, batch)
    rows = mats = None
    if lam != 0.0 and targets is not None:
        sample = np.arange(len(targets)) if anchor_sample is None else np.asarray(anchor_sample)
        rows = np.asarray(anchor_points, dtype=np.float64)[sample]
        mats = targets.matrices[sample]
    return _fused(net, y, gamma=gamma, mode=mode, noise=noise, normalized=normalized,
                  lam=lam, anchor_rows=rows, anchor_targets=mats, grad=grad)


def objective(net: AutoencoderNet, dataset, targets: RankTargets, config, noise=None,
              subsample=None, batch=None, grad=False):
    """Full objective for a config with ``lam``, ``gamma``, ``curvature_mode``.

    ``batch`` defaults to every row of ``dataset``; ``subsample`` (dataset
    indices, each an anchor) defaults to all anchors. Returns a float, or a
    :class:`TermValue` when ``grad`` is set.
    """
    pts = _points(dataset)
    y = pts if batch is None else batch
    idx = targets.anchor_indices if subsample is None else np.ravel(subsample)
    res = objective_terms(
        net, y, targets,
        lam=config.lam, gamma=config.gamma, mode=config.curvature_mode, noise=noise,
        anchor_points=pts[targets.anchor_indices], anchor_sample=targets.positions(idx),
        normalized=getattr(config, "kappa1_normalized", False), grad=grad,
    )
    return res if grad else res.value


def caeh_objective(net: AutoencoderNet, batch, noise, gamma, *, grad=False) -> TermValue:
    """Contractive baseline: ``recon + gamma * (|J_e|^2 + kappa0)``."""
    y = _check_batch(net, batch)
    return _fused(net, y, gamma=gamma, mode="kappa0", noise=noise, contract=gamma, grad=grad)

"""Self-contained numerical checks behind ``rankae verify``.

Each routine builds its own seeded fixtures and returns :class:`Check`
records naming the quantity, its tolerance and the observed value.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np

from . import losses
from .evaluate import mtc_loss
from .geometry import (NetMap, SphereMap, curvature_bound, curvature_quotients, default_directions,
                       default_scales, encoder_decoder_bound, tangent_bases)
from .linalg import kyfan_antinorm_sq, singular_values, truncate_rank
from .net import AutoencoderNet, build_autoencoder, fd_gradient, gradient_rel_error, jacobian
from .errors import RankDeficientError

GRAD_TOL = 1e-4
EY_TOL = 1e-9
SPHERE_TOL = 0.05
BOUND_TOL = 1e-3


@dataclass(frozen=True)
class Check:
    name: str
    quantity: str
    tolerance: float
    observed: float
    passed: bool

    def as_row(self) -> dict:
        return {"check": self.name, "quantity": self.quantity, "tolerance": self.tolerance,
                "observed": self.observed, "passed": self.passed}

    def describe(self) -> str:
        mark = "ok  " if self.passed else "FAIL"
        return f"{mark} {self.name}: {self.quantity} = {self.observed:.3e} (tolerance {self.tolerance:.1e})"


def sphere_checks(n=3, radius=1.0, x=None):
    """The radial projection onto a sphere of radius ``r`` has curvature ``1/r``."""
    x = np.eye(n)[0] * 2.0 if x is None else np.asarray(x, dtype=np.float64)
    g = SphereMap(radius)
    scales = default_scales()
    dirs = default_directions(n)
    est = curvature_bound(g, x, scales, dirs)
    err = abs(est.value - 1.0 / radius) * radius
    rows = curvature_quotients(g, x, scales, dirs)
    return [Check(f"sphere n={n} r={radius}", "relative error of curvature estimate", SPHERE_TOL, err,
                  err <= SPHERE_TOL)], rows


def quotient_rows(quotients, scales):
    """``(scale, direction_index, quotient)`` rows; kernel directions are omitted."""
    out = []
    for s, row in zip(scales, quotients):
        for j, q in enumerate(row):
            if not np.isnan(q):
                out.append({"scale": float(s), "direction_index": j, "quotient": float(q)})
    return out


def random_small_net(rng, max_params=500) -> AutoencoderNet:
    """A seeded encoder/decoder pair with at most ``max_params`` parameters."""
    while True:
        n = int(rng.integers(3, 6))
        code = int(rng.integers(2, n + 1))
        hidden = (int(rng.integers(3, 9)),)
        net = build_autoencoder(n, code, hidden, seed=int(rng.integers(1 << 30)))
        if net.n_params <= max_params:
            return net


def loss_terms(net: AutoencoderNet, rng) -> dict:
    """Every differentiable loss on seeded data, as ``name -> f(net, grad=...)``."""
    n = net.n
    y = rng.normal(size=(5, n))
    noise = 0.5 * rng.normal(size=(5, n))
    anchors = rng.normal(size=(4, n))
    targets = losses.RankTargets(np.arange(4), rng.normal(size=(4, n, n)), 1)
    sample = np.array([0, 2, 2, 3])
    terms = {
        "reconstruction": partial(losses.reconstruction, batch=y),
        "contractive": partial(losses.contractive, batch=y),
        "rank": partial(losses.rank_term, points=anchors[sample], targets=targets.matrices[sample]),
        "caeh objective": partial(losses.caeh_objective, batch=y, noise=noise, gamma=0.7),
        "kappa1 normalized": partial(losses.kappa, batch=y, noise=noise, mode="kappa1", normalized=True),
    }
    for mode in losses.KAPPA_MODES:
        terms[mode] = partial(losses.kappa, batch=y, noise=noise, mode=mode)
        terms[f"objective {mode}"] = partial(
            losses.objective_terms, batch=y, targets=targets, lam=1.3, gamma=0.4, mode=mode,
            noise=noise, anchor_points=anchors, anchor_sample=sample)
    return terms


def gradient_checks(seed=0, nets=5, coords=None):
    """Exact parameter gradients against central differences (step ``1e-5``)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(nets):
        net = random_small_net(rng)
        for name, fn in loss_terms(net, rng).items():
            exact = fn(net, grad=True).grad
            idx = range(net.n_params) if coords is None else rng.choice(net.n_params, coords, replace=False)
            fd = fd_gradient(net, lambda m: fn(m).value, 1e-5, idx)
            err = gradient_rel_error(exact[list(idx)], fd)
            out.append(Check(f"net {i} {name}", "max relative gradient error", GRAD_TOL, err, err < GRAD_TOL))
        out.append(_mtc_check(net, rng, i))
    return out


def _mtc_check(net, rng, i):
    x = rng.normal(size=(6, net.n))
    k = max(1, net.code_dim - 1)
    bases, ok, _ = tangent_bases(net, x, k)
    w = rng.normal(size=(3, net.code_dim))
    labels = rng.integers(0, 3, 6)
    _, gw, gt = mtc_loss(w, net, x, labels, bases, ok, 0.1, grad=True)
    enc = net.encoder_slice()
    fd_t = fd_gradient(net, lambda m: mtc_loss(w, m, x, labels, bases, ok, 0.1), 1e-5, range(enc.stop))
    fd_w = np.empty(w.size)
    flat = w.ravel().copy()
    for j in range(w.size):
        flat[j] += 1e-5
        up = mtc_loss(flat.reshape(w.shape), net, x, labels, bases, ok, 0.1)
        flat[j] -= 2e-5
        down = mtc_loss(flat.reshape(w.shape), net, x, labels, bases, ok, 0.1)
        flat[j] += 1e-5
        fd_w[j] = (up - down) / 2e-5
    err = gradient_rel_error(np.concatenate([gw.ravel(), gt[enc]]), np.concatenate([fd_w, fd_t]))
    return Check(f"net {i} tangent classifier", "max relative gradient error", GRAD_TOL, err, err < GRAD_TOL)


def eckart_young_checks(trials=50, seed=0, max_dim=12):
    """``kyfan_antinorm_sq(A, k) == |A - truncate_rank(A, k)|_F^2`` for all valid ``k``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        r, c = rng.integers(1, max_dim + 1, size=2)
        a = rng.normal(size=(r, c)) * 10.0 ** rng.uniform(-3, 3)
        scale = 1.0 + np.sum(a * a)
        for k in range(min(r, c) + 1):
            resid = a - truncate_rank(a, k)
            gap = abs(kyfan_antinorm_sq(a, k) - np.sum(resid * resid)) / scale
            worst = max(worst, gap)
    return [Check(f"eckart-young {trials} trials", "max |antinorm - residual| / (1 + |A|_F^2)",
                  EY_TOL, worst, worst < EY_TOL)]


def curvature_bound_checks(seed=0, pairs=5, min_sigma=0.1, net: AutoencoderNet | None = None):
    """Curvature estimate of ``d(e(x))`` against its encoder/decoder bound.

    Without ``net``, seeded small pairs are drawn and kept only when the
    decoder's smallest singular value exceeds ``min_sigma`` at the point.
    """
    rng = np.random.default_rng(seed)
    out = []
    attempts = 0
    while len(out) < pairs:
        attempts += 1
        if attempts > 100 * pairs:
            raise RuntimeError(f"found only {len(out)} well-conditioned pairs in {attempts} draws")
        cur = net if net is not None else random_small_net(rng)
        x = rng.normal(size=cur.n)
        code = NetMap(cur, "encoder")(x)
        sig = singular_values(jacobian(cur, code, "decoder"))
        if net is None and sig[-1] <= min_sigma:
            continue
        try:
            lhs = curvature_bound(NetMap(cur, "full"), x).value
            rhs = encoder_decoder_bound(NetMap(cur, "encoder"), NetMap(cur, "decoder"), x)
        except RankDeficientError:
            continue
        gap = lhs - rhs
        out.append(Check(f"pair {len(out)}", "curvature estimate minus bound", BOUND_TOL, gap,
                         gap <= BOUND_TOL))
    return out

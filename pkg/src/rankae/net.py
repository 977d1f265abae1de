"""Feedforward autoencoder with exact input Jacobians and parameter gradients.

The autoencoder is a single chain of dense layers; the first
``len(encoder_layers)`` layers form the encoder and the rest the decoder.
Parameters live in one flat vector ``theta``: for each layer in chain order,
the weight matrix ``W`` (``out_dim x in_dim``, row-major) followed by the bias.

Derivatives are computed by :class:`Trace`, which pushes a block of input
tangents through the chain alongside the values (forward mode) and can then
pull cotangents for both the values and the tangents back to ``theta``
(reverse mode over the forward-mode pass). This gives exact gradients for
losses that depend on the Jacobian ``d g / d x``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, NonFiniteError

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise DomainError(f"layer dims must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True, eq=False)
class AutoencoderNet:
    encoder_layers: tuple[LayerSpec, ...]
    decoder_layers: tuple[LayerSpec, ...]
    theta: np.ndarray

    def __post_init__(self):
        enc = tuple(self.encoder_layers)
        dec = tuple(self.decoder_layers)
        object.__setattr__(self, "encoder_layers", enc)
        object.__setattr__(self, "decoder_layers", dec)
        if not enc or not dec:
            raise DomainError("encoder and decoder need at least one layer each")
        layers = enc + dec
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DomainError(f"layer dims do not chain: {a} -> {b}")
        if enc[0].in_dim != dec[-1].out_dim:
            raise DomainError("encoder input dim must equal decoder output dim")
        theta = np.array(self.theta, dtype=np.float64).ravel()
        expected = sum(l.n_params for l in layers)
        if theta.size != expected:
            raise DomainError(f"theta has {theta.size} entries, layers need {expected}")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        return self.encoder_layers + self.decoder_layers

    @property
    def n(self) -> int:
        return self.encoder_layers[0].in_dim

    @property
    def code_dim(self) -> int:
        return self.encoder_layers[-1].out_dim

    @property
    def n_params(self) -> int:
        return self.theta.size

    @cached_property
    def param_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into ``theta`` for every layer."""
        out, pos = [], 0
        for l in self.layers:
            w = slice(pos, pos + l.in_dim * l.out_dim)
            pos = w.stop
            b = slice(pos, pos + l.out_dim)
            pos = b.stop
            out.append((w, b))
        return out

    def weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        l = self.layers[i]
        w, b = self.param_slices[i]
        return self.theta[w].reshape(l.out_dim, l.in_dim), self.theta[b]

    def encoder_slice(self) -> slice:
        return slice(0, sum(l.n_params for l in self.encoder_layers))

    def with_theta(self, theta) -> "AutoencoderNet":
        return AutoencoderNet(self.encoder_layers, self.decoder_layers, theta)


def mlp_layers(dims, activations) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(a, b, act) for a, b, act in zip(dims, dims[1:], activations))


def init_theta(layers, rng: np.random.Generator) -> np.ndarray:
    """Zero biases, weights uniform in +-sqrt(6 / (fan_in + fan_out))."""
    parts = []
    for l in layers:
        s = math.sqrt(6.0 / (l.in_dim + l.out_dim))
        parts.append(rng.uniform(-s, s, size=l.in_dim * l.out_dim))
        parts.append(np.zeros(l.out_dim))
    return np.concatenate(parts)


def build_autoencoder(n, code_dim, encoder_hidden=(), decoder_hidden=None, seed=0,
                      code_activation="tanh") -> AutoencoderNet:
    """Build ``n -> hidden... -> code_dim -> hidden... -> n``.

    Hidden layers use tanh, the last decoder layer is affine. The decoder
    mirrors the encoder's hidden widths unless ``decoder_hidden`` is given.
    """
    encoder_hidden = tuple(encoder_hidden)
    if decoder_hidden is None:
        decoder_hidden = encoder_hidden[::-1]
    enc_dims = (n,) + encoder_hidden + (code_dim,)
    dec_dims = (code_dim,) + tuple(decoder_hidden) + (n,)
    enc = mlp_layers(enc_dims, ["tanh"] * (len(enc_dims) - 2) + [code_activation])
    dec = mlp_layers(dec_dims, ["tanh"] * (len(dec_dims) - 2) + ["identity"])
    rng = np.random.default_rng(seed)
    return AutoencoderNet(enc, dec, init_theta(enc + dec, rng))


def _activate(kind, z):
    """Activation value and its first two derivatives."""
    if kind == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    a = np.tanh(z)
    d1 = 1.0 - a * a
    return a, d1, -2.0 * a * d1


def _layer_range(net: AutoencoderNet, part: str) -> range:
    n_enc = len(net.encoder_layers)
    if part == "full":
        return range(0, len(net.layers))
    if part == "encoder":
        return range(0, n_enc)
    if part == "decoder":
        return range(n_enc, len(net.layers))
    raise DomainError(f"unknown network part {part!r}")


class Trace:
    """One forward pass over a batch, carrying input tangents.

    ``x`` has shape ``(B, in)``; ``seeds`` has shape ``(B, in, p)`` (or
    ``(in, p)``, shared by the batch) and holds the input directions whose
    images are propagated. With identity seeds the propagated tangent is the
    Jacobian. Boundary ``i`` is the input of the ``i``-th traced layer;
    boundary ``len(layers)`` is the output.
    """

    def __init__(self, net: AutoencoderNet, x, seeds=None, part: str = "full"):
        self.net = net
        self.layer_ids = list(_layer_range(net, part))
        x = np.asarray(x, dtype=np.float64)
        in_dim = net.layers[self.layer_ids[0]].in_dim
        if x.ndim != 2 or x.shape[1] != in_dim:
            raise DomainError(f"expected input of shape (B, {in_dim}), got {x.shape}")
        batch = x.shape[0]
        if seeds is None:
            seeds = np.zeros((batch, in_dim, 0))
        seeds = np.asarray(seeds, dtype=np.float64)
        if seeds.ndim == 2:
            seeds = np.broadcast_to(seeds, (batch,) + seeds.shape)
        if seeds.shape[:2] != (batch, in_dim):
            raise DomainError(f"seeds of shape {seeds.shape} do not match input {x.shape}")

        self.h = [x]
        self.t = [seeds]
        self._z, self._tz, self._d1, self._d2 = [], [], [], []
        h, t = x, seeds
        for i in self.layer_ids:
            w, b = net.weights(i)
            z = h @ w.T + b
            tz = np.matmul(w, t)
            a, d1, d2 = _activate(net.layers[i].activation, z)
            h, t = a, d1[:, :, None] * tz
            self._z.append(z)
            self._tz.append(tz)
            self._d1.append(d1)
            self._d2.append(d2)
            self.h.append(h)
            self.t.append(t)

    @property
    def output(self) -> np.ndarray:
        return self.h[-1]

    @property
    def tangent(self) -> np.ndarray:
        return self.t[-1]

    @property
    def out_index(self) -> int:
        return len(self.layer_ids)

    def backward(self, cotangents: dict) -> np.ndarray:
        """Gradient over ``theta`` of a scalar whose partials are given.

        ``cotangents`` maps a boundary index to ``(d/dh, d/dt)``; either entry
        may be ``None``.
        """
        grad = np.zeros(self.net.n_params)
        slices = self.net.param_slices
        gh = gt = None
        for pos in range(self.out_index, 0, -1):
            inj = cotangents.get(pos)
            if inj is not None:
                ih, it = inj
                if ih is not None:
                    gh = ih if gh is None else gh + ih
                if it is not None:
                    gt = it if gt is None else gt + it
            if gh is None and gt is None:
                continue
            k = pos - 1
            layer = self.layer_ids[k]
            d1, d2, tz = self._d1[k], self._d2[k], self._tz[k]
            h_in, t_in = self.h[k], self.t[k]
            gz = np.zeros_like(d1) if gh is None else gh * d1
            if gt is not None:
                gz = gz + d2 * np.sum(gt * tz, axis=2)
                gtz = gt * d1[:, :, None]
            w, _ = self.net.weights(layer)
            gw = gz.T @ h_in
            if gt is not None:
                gw += np.tensordot(gtz, t_in, axes=([0, 2], [0, 2]))
            ws, bs = slices[layer]
            grad[ws] += gw.ravel()
            grad[bs] += gz.sum(axis=0)
            gh = gz @ w
            gt = None if gt is None else np.matmul(w.T, gtz)
        return grad


class JacobianPair(NamedTuple):
    j_encoder: np.ndarray
    j_decoder: np.ndarray

    def product(self) -> np.ndarray:
        return self.j_decoder @ self.j_encoder


def _batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DomainError(f"expected vectors of length {dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains NaN or Inf")
    return x, single


def forward(net: AutoencoderNet, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(code, output)`` for one input vector or a batch of rows."""
    xb, single = _batch(x, net.n)
    tr = Trace(net, xb)
    code, out = tr.h[len(net.encoder_layers)], tr.output
    return (code[0], out[0]) if single else (code, out)


def encode(net: AutoencoderNet, x) -> np.ndarray:
    return forward(net, x)[0]


def reconstruct(net: AutoencoderNet, x) -> np.ndarray:
    return forward(net, x)[1]


def apply_part(net: AutoencoderNet, x, part="full") -> np.ndarray:
    in_dim = net.layers[_layer_range(net, part)[0]].in_dim
    xb, single = _batch(x, in_dim)
    out = Trace(net, xb, part=part).output
    return out[0] if single else out


def jacobian(net: AutoencoderNet, x, part="full") -> np.ndarray:
    """Exact Jacobian of the chosen part (``full``, ``encoder``, ``decoder``)."""
    in_dim = net.layers[_layer_range(net, part)[0]].in_dim
    xb, single = _batch(x, in_dim)
    j = Trace(net, xb, np.eye(in_dim), part=part).tangent
    return j[0] if single else j


def input_jacobians(net: AutoencoderNet, x) -> JacobianPair:
    """Encoder Jacobian at ``x`` and decoder Jacobian at the code ``e(x)``."""
    xb, single = _batch(x, net.n)
    enc = Trace(net, xb, np.eye(net.n), part="encoder")
    dec = Trace(net, enc.output, np.eye(net.code_dim), part="decoder")
    je, jd = enc.tangent, dec.tangent
    return JacobianPair(je[0], jd[0]) if single else JacobianPair(je, jd)


def component_hessians(net: AutoencoderNet, x, part="full", step=1e-4) -> np.ndarray:
    """Hessians of every output component, shape ``(out, in, in)``.

    Central differences of the exact Jacobian, symmetrized.
    """
    x = np.asarray(x, dtype=np.float64)
    in_dim = x.shape[0]
    shifts = np.eye(in_dim) * step
    probes = np.concatenate([x + shifts, x - shifts])
    j = jacobian(net, probes, part=part)
    dj = (j[:in_dim] - j[in_dim:]) / (2.0 * step)  # dj[a, i, b] = d J[i, b] / d x_a
    h = np.transpose(dj, (1, 0, 2))
    return 0.5 * (h + np.transpose(h, (0, 2, 1)))


def loss_gradient(net: AutoencoderNet, loss: Callable) -> np.ndarray:
    """Gradient over ``theta`` of a loss term.

    ``loss`` is called as ``loss(net, grad=True)`` and must return a value
    with ``value`` and ``grad`` attributes (see :mod:`rankae.losses`).
    """
    res = loss(net, grad=True)
    if not np.isfinite(res.value):
        raise NonFiniteError(getattr(loss, "name", repr(loss)), "loss value")
    if not np.all(np.isfinite(res.grad)):
        raise NonFiniteError(getattr(loss, "name", repr(loss)), "gradient")
    return res.grad


def fd_gradient(net: AutoencoderNet, value_fn: Callable, step=1e-5, coords=None) -> np.ndarray:
    """Central finite differences of ``value_fn(net)`` over (some) coordinates of ``theta``."""
    coords = range(net.n_params) if coords is None else coords
    theta = net.theta.copy()
    out = []
    for i in coords:
        theta[i] += step
        up = value_fn(net.with_theta(theta))
        theta[i] -= 2 * step
        down = value_fn(net.with_theta(theta))
        theta[i] += step
        out.append((up - down) / (2 * step))
    return np.array(out)


def gradient_rel_error(exact, approx, floor=1e-3) -> float:
    """Largest per-coordinate ``|a - b| / max(|a|, |b|, floor * max|a|)``.

    The floor keeps coordinates whose gradient is tiny relative to the rest
    from being judged against finite-difference rounding noise.
    """
    exact = np.asarray(exact, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(exact), np.abs(approx)), floor * np.max(np.abs(exact), initial=0.0))
    scale = np.where(scale > 0, scale, 1.0)
    return float(np.max(np.abs(exact - approx) / scale, initial=0.0))


def net_to_dict(net: AutoencoderNet) -> dict:
    def specs(layers):
        return [[l.in_dim, l.out_dim, l.activation] for l in layers]
    return {
        "format": "rankae-autoencoder/1",
        "encoder_layers": specs(net.encoder_layers),
        "decoder_layers": specs(net.decoder_layers),
        "theta": net.theta.tolist(),
    }


def net_from_dict(d: dict) -> AutoencoderNet:
    if d.get("format") != "rankae-autoencoder/1":
        raise DomainError(f"unrecognized checkpoint format {d.get('format')!r}")
    return AutoencoderNet(
        tuple(LayerSpec(*s) for s in d["encoder_layers"]),
        tuple(LayerSpec(*s) for s in d["decoder_layers"]),
        np.array(d["theta"], dtype=np.float64),
    )


def save_net(net: AutoencoderNet, path) -> None:
    # json writes floats with repr(), which round-trips exactly
    Path(path).write_text(json.dumps(net_to_dict(net), indent=1) + "\n")


def load_net(path) -> AutoencoderNet:
    return net_from_dict(json.loads(Path(path).read_text()))

"""Quality metrics for trained autoencoders.

Stiefel-manifold recovery errors, K-nearest-neighbour accuracy on codes and
the manifold tangent classifier (a softmax layer on top of the encoder,
fine-tuned with a tangent-propagation penalty).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, StiefelSpec, matrix_to_vector, uniform_stiefel, vector_to_matrix
from .errors import DomainError, NonFiniteError
from .geometry import tangent_bases
from .net import AutoencoderNet, Trace, encode, reconstruct
from .trainer import AdamState, adam_step, window_settled

KNN_SWEEP = tuple(range(1, 20))
MTC_BETAS = (0.0, 0.01, 0.1)


def _as_map(model, part):
    if isinstance(model, AutoencoderNet):
        return (lambda x: encode(model, x)) if part == "encoder" else (lambda x: reconstruct(model, x))
    if not callable(model):
        raise DomainError(f"expected an AutoencoderNet or a callable, got {type(model).__name__}")
    return model


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    se = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(np.mean(values)), se


@dataclass(frozen=True)
class StiefelMetrics:
    e1: float
    e2: float
    one_i: float
    zero_i: float
    sample_count: int
    std_errors: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"e1": self.e1, "e2": self.e2, "one_i": self.one_i, "zero_i": self.zero_i,
               "sample_count": self.sample_count}
        row.update({f"{k}_se": v for k, v in self.std_errors.items()})
        return row


def stiefel_metrics_from_samples(outputs, clean, spec: StiefelSpec) -> StiefelMetrics:
    """Metrics from autoencoder outputs ``a(z + eps)`` and the clean ``z``.

    ``e1``: mean entrywise max of ``|A^T A - I|``; ``e2``: mean ``|a - z|``
    over ``sqrt(n delta^2)``; ``one_i = |A|_F^2 / n^2``; ``zero_i``: sum of
    the off-diagonal entries of ``A^T A`` over ``n^2 (n - 1)``; ``n = n1 n2``.
    With ``delta = 0`` the ``e2`` ratio is 0 for exact recovery and NaN
    otherwise.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    clean = np.atleast_2d(np.asarray(clean, dtype=np.float64))
    n = spec.ambient_dim
    if outputs.shape[1] != n or clean.shape != outputs.shape:
        raise DomainError(f"expected two ({len(clean)}, {n}) arrays, got {outputs.shape} and {clean.shape}")
    a = vector_to_matrix(outputs, spec.n1, spec.n2)
    gram = np.swapaxes(a, -1, -2) @ a
    e1 = np.max(np.abs(gram - np.eye(spec.n2)), axis=(1, 2))
    dist = np.linalg.norm(outputs - clean, axis=1)
    if spec.delta > 0:
        e2 = dist / math.sqrt(n * spec.delta**2)
    else:
        e2 = np.where(dist == 0, 0.0, np.nan)
    one = np.sum(a * a, axis=(1, 2)) / n**2
    zero = (np.sum(gram, axis=(1, 2)) - np.trace(gram, axis1=1, axis2=2)) / (n**2 * (n - 1))
    stats = {name: _mean_se(v) for name, v in (("e1", e1), ("e2", e2), ("one_i", one), ("zero_i", zero))}
    return StiefelMetrics(*(stats[k][0] for k in ("e1", "e2", "one_i", "zero_i")), len(outputs),
                          {k: v[1] for k, v in stats.items()})


def stiefel_metrics(autoencoder, spec: StiefelSpec, eval_samples=1000, seed=0) -> StiefelMetrics:
    """Monte-Carlo estimates on fresh seeded draws ``z`` and noise ``eps``."""
    if eval_samples < 1:
        raise DomainError("eval_samples must be positive")
    if isinstance(autoencoder, AutoencoderNet) and autoencoder.n != spec.ambient_dim:
        raise DomainError(f"autoencoder dimension {autoencoder.n} differs from n1*n2 = {spec.ambient_dim}")
    rng = np.random.default_rng(seed)
    z = matrix_to_vector(uniform_stiefel(spec.n1, spec.n2, eval_samples, rng))
    noisy = z + spec.delta * rng.standard_normal(z.shape)
    out = np.asarray(_as_map(autoencoder, "full")(noisy), dtype=np.float64)
    if out.shape != z.shape:
        raise DomainError(f"autoencoder returned shape {out.shape}, expected {z.shape}")
    return stiefel_metrics_from_samples(out, z, spec)


def _neighbour_order(train, query, k_max, exclude_self, chunk=512):
    """Indices of the ``k_max`` nearest training rows per query, stable in index."""
    order = np.empty((len(query), k_max), dtype=np.int64)
    for lo in range(0, len(query), chunk):
        q = query[lo:lo + chunk]
        diff = q[:, None, :] - train[None, :, :]
        dist = np.sum(diff * diff, axis=2)
        if exclude_self:
            rows = np.arange(len(q))
            dist[rows, lo + rows] = np.inf
        order[lo:lo + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k_max]
    return order


def _vote(neigh_labels, n_classes):
    counts = np.zeros((len(neigh_labels), n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(neigh_labels)), neigh_labels.shape[1]), neigh_labels.ravel()), 1)
    return np.argmax(counts, axis=1)


def knn_sweep(train_codes, train_labels, query_codes=None, query_labels=None, ks=KNN_SWEEP) -> dict:
    """Accuracy for every ``K`` in ``ks``.

    Euclidean distance; ties in distance go to the lower training index and
    ties in the vote to the lower class id. Without a query set the training
    set classifies itself with each point's own entry excluded.
    """
    train = np.atleast_2d(np.asarray(train_codes, dtype=np.float64))
    labels = np.asarray(train_labels)
    if labels.shape != (len(train),):
        raise DomainError("need one label per training code")
    self_eval = query_codes is None
    query = train if self_eval else np.atleast_2d(np.asarray(query_codes, dtype=np.float64))
    qlab = labels if self_eval else np.asarray(query_labels)
    if qlab is None or qlab.shape != (len(query),):
        raise DomainError("need one label per query code")
    ks = [int(k) for k in ks]
    avail = len(train) - (1 if self_eval else 0)
    if not ks or min(ks) < 1 or max(ks) > avail:
        raise DomainError(f"K must lie in [1, {avail}], got {ks}")
    classes, lab_idx = np.unique(labels, return_inverse=True)
    order = _neighbour_order(train, query, max(ks), self_eval)
    neigh = lab_idx[order]
    return {k: float(np.mean(classes[_vote(neigh[:, :k], len(classes))] == qlab)) for k in ks}


def knn_predict(train_codes, train_labels, query_codes, k, exclude_self=False) -> np.ndarray:
    train = np.atleast_2d(np.asarray(train_codes, dtype=np.float64))
    query = np.atleast_2d(np.asarray(query_codes, dtype=np.float64))
    classes, lab_idx = np.unique(np.asarray(train_labels), return_inverse=True)
    if not 1 <= k <= len(train) - (1 if exclude_self else 0):
        raise DomainError(f"K={k} is out of range for {len(train)} training codes")
    order = _neighbour_order(train, query, k, exclude_self)
    return classes[_vote(lab_idx[order], len(classes))]


def knn_on_codes(encoder, dataset: Dataset, K, query: Dataset | None = None) -> float:
    """K-NN accuracy in code space; ``query=None`` scores the dataset on itself."""
    if dataset.labels is None or (query is not None and query.labels is None):
        raise DomainError("K-NN evaluation needs labels")
    enc = _as_map(encoder, "encoder")
    train_codes = enc(dataset.points)
    if query is None:
        return knn_sweep(train_codes, dataset.labels, ks=[K])[K]
    return knn_sweep(train_codes, dataset.labels, enc(query.points), query.labels, ks=[K])[K]


@dataclass(frozen=True)
class MtcConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    m: int = 20
    max_epochs: int = 50
    tol: float = 1e-4
    window: int = 5
    steps_per_epoch: int = 0
    seed: int = 0
    freeze_encoder: bool = False


@dataclass(frozen=True)
class MtcModel:
    weights: np.ndarray
    net: AutoencoderNet
    beta: float
    classes: np.ndarray
    epoch_losses: tuple = ()
    skipped_bases: int = 0

    def logits(self, x) -> np.ndarray:
        return encode(self.net, np.atleast_2d(np.asarray(x, dtype=np.float64))) @ self.weights.T


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def classify(model: MtcModel, x):
    """``(class ids, probabilities)``; a single point gives a scalar id and a vector."""
    single = np.asarray(x).ndim == 1
    p = softmax(model.logits(x))
    ids = model.classes[np.argmax(p, axis=1)]
    return (ids[0], p[0]) if single else (ids, p)


def mtc_accuracy(model: MtcModel, dataset: Dataset) -> float:
    if dataset.labels is None:
        raise DomainError("accuracy needs labels")
    return float(np.mean(classify(model, dataset.points)[0] == dataset.labels))


def mtc_loss(weights, net: AutoencoderNet, x, label_idx, bases, valid, beta, *, grad=False):
    """Mean cross-entropy plus ``beta * mean_x sum_i |W J_e(x) u_i|^2``.

    ``bases`` is ``(B, n, k)``; rows with ``valid`` False contribute no
    tangent penalty. Returns ``value`` or ``(value, grad_weights, grad_theta)``
    with ``grad_theta`` over the full parameter vector of ``net``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = len(x)
    use_tan = beta != 0.0
    tr = Trace(net, x, bases if use_tan else None, part="encoder")
    code = tr.output
    logits = code @ weights.T
    p = softmax(logits)
    lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)), axis=1)) + logits.max(axis=1)
    value = float(np.mean(lse - logits[np.arange(b), label_idx]))
    if use_tan:
        t = tr.tangent
        wt = np.matmul(weights, t) * np.asarray(valid, dtype=np.float64)[:, None, None]
        value += beta * float(np.sum(wt * wt)) / b
    if not np.isfinite(value):
        raise NonFiniteError("mtc loss")
    if not grad:
        return value
    onehot = np.zeros_like(p)
    onehot[np.arange(b), label_idx] = 1.0
    g_logits = (p - onehot) / b
    g_w = g_logits.T @ code
    g_code = g_logits @ weights
    g_tan = None
    if use_tan:
        c = (2.0 * beta / b) * wt
        g_w += np.einsum("bck,bdk->cd", c, t)
        g_tan = np.matmul(weights.T, c)
    g_theta = tr.backward({tr.out_index: (g_code, g_tan)})
    return value, g_w, g_theta


def train_mtc(pretrained_net: AutoencoderNet, dataset: Dataset, beta, k, config: MtcConfig | None = None) -> MtcModel:
    """Fine-tune the pretrained encoder under a seeded softmax head with Adam.

    Tangent bases come from the pretrained autoencoder once, before training;
    points where the Jacobian rank falls below ``k`` keep no penalty and are
    counted in ``skipped_bases``.
    """
    config = config or MtcConfig()
    part = dataset.part("train")
    if part.labels is None:
        raise DomainError("MTC training needs labels")
    if beta < 0:
        raise DomainError("beta must be non-negative")
    pts, labels = part.points, part.labels
    classes, lab_idx = np.unique(labels, return_inverse=True)
    bases, valid, _ = tangent_bases(pretrained_net, pts, k)
    rng = np.random.default_rng(config.seed)
    d, c = pretrained_net.code_dim, len(classes)
    limit = math.sqrt(6.0 / (c + d))
    weights = rng.uniform(-limit, limit, size=(c, d))
    enc = pretrained_net.encoder_slice()
    freeze = config.freeze_encoder
    params = weights.ravel() if freeze else np.concatenate([weights.ravel(), pretrained_net.theta[enc]])
    adam = AdamState.zeros(len(params))
    steps = config.steps_per_epoch or math.ceil(len(pts) / config.m)
    losses = []
    net = pretrained_net
    for _ in range(config.max_epochs):
        total = 0.0
        for _ in range(steps):
            idx = rng.integers(0, len(pts), config.m)
            w = params[: c * d].reshape(c, d)
            if not freeze:
                theta = net.theta.copy()
                theta[enc] = params[c * d:]
                net = net.with_theta(theta)
            value, g_w, g_theta = mtc_loss(w, net, pts[idx], lab_idx[idx], bases[idx], valid[idx], beta, grad=True)
            g = g_w.ravel() if freeze else np.concatenate([g_w.ravel(), g_theta[enc]])
            params, adam = adam_step(params, g, adam, config.alpha, config.beta1, config.beta2, config.adam_eps)
            total += value
        losses.append(total / steps)
        if window_settled(losses, config.window, config.tol):
            break
    if not freeze:
        theta = net.theta.copy()
        theta[enc] = params[c * d:]
        net = net.with_theta(theta)
    return MtcModel(params[: c * d].reshape(c, d).copy(), net, float(beta), classes, tuple(losses),
                    int(np.sum(~valid)))


def write_metrics_csv(path, rows: list[dict]) -> Path:
    """Write dict rows as CSV; columns are the union of keys in first-seen order."""
    path = Path(path)
    cols: list[str] = []
    for row in rows:
        cols.extend(k for k in row if k not in cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path

from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import linear_net
from rankae.data import Dataset, StiefelSpec, sample_stiefel
from rankae.errors import DomainError
from rankae.evaluate import (KNN_SWEEP, MTC_BETAS, MtcConfig, MtcModel, classify, knn_on_codes, knn_predict,
                             knn_sweep, mtc_accuracy, mtc_loss, softmax, stiefel_metrics,
                             stiefel_metrics_from_samples, train_mtc, write_metrics_csv)
from rankae.geometry import tangent_bases
from rankae.net import build_autoencoder, encode, fd_gradient, gradient_rel_error
from rankae.trainer import AdamState, adam_step

SPEC = StiefelSpec(4, 2, 1, 0.05)


def chi_mean_ratio(n):
    """E|eps| / sqrt(n delta^2) for eps ~ N(0, delta^2 I_n)."""
    return math.sqrt(2.0 / n) * math.exp(math.lgamma((n + 1) / 2) - math.lgamma(n / 2))


def test_exact_recovery():
    clean, _ = sample_stiefel(StiefelSpec(4, 2, 200, 0.05, seed=1))
    m = stiefel_metrics_from_samples(clean.points, clean.points, SPEC)
    assert m.e1 == pytest.approx(0, abs=1e-14) and m.e2 == 0.0
    assert m.one_i == pytest.approx(2 / 64) and m.zero_i == pytest.approx(0, abs=1e-15)
    assert m.sample_count == 200


def test_zero_autoencoder():
    m = stiefel_metrics(lambda x: np.zeros_like(x), SPEC, 300, seed=0)
    assert (m.e1, m.one_i, m.zero_i) == (1.0, 0.0, 0.0)


def test_identity_autoencoder_noise_ratio():
    m = stiefel_metrics(lambda x: x, SPEC, 20_000, seed=3)
    assert abs(m.e2 - chi_mean_ratio(8)) < 3 * m.std_errors["e2"]
    assert m.e2 == pytest.approx(1.0, abs=0.06)


def test_noise_free_evaluation():
    spec = StiefelSpec(3, 1, 1, 0.0)
    assert stiefel_metrics(lambda x: x, spec, 50).e2 == 0.0
    assert math.isnan(stiefel_metrics(lambda x: 0.5 * x, spec, 50).e2)


def test_metric_formulas_on_one_matrix():
    a = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
    out = a.T.reshape(1, -1)
    clean = np.zeros_like(out)
    m = stiefel_metrics_from_samples(out, clean, StiefelSpec(3, 2, 1, 0.5))
    gram = a.T @ a
    assert m.e1 == np.max(np.abs(gram - np.eye(2)))
    assert m.e2 == pytest.approx(np.linalg.norm(out) / math.sqrt(6 * 0.25))
    assert m.one_i == pytest.approx(np.sum(a * a) / 36)
    assert m.zero_i == pytest.approx(2 * gram[0, 1] / (36 * 5))


def test_stiefel_metric_errors():
    with pytest.raises(DomainError):
        stiefel_metrics(build_autoencoder(5, 2), SPEC)
    with pytest.raises(DomainError):
        stiefel_metrics(lambda x: x[:, :3], SPEC, 10)
    with pytest.raises(DomainError):
        stiefel_metrics(lambda x: x, SPEC, 0)
    with pytest.raises(DomainError):
        stiefel_metrics("not a map", SPEC)


# ---- K-NN

def brute_knn(train, labels, query, k, exclude_self):
    out = []
    for qi, q in enumerate(query):
        dist = [(float(np.sum((t - q) ** 2)), i) for i, t in enumerate(train) if not (exclude_self and i == qi)]
        nearest = [labels[i] for _, i in sorted(dist)[:k]]
        counts = {c: nearest.count(c) for c in sorted(set(labels))}
        best = max(counts.values())
        out.append(min(c for c, v in counts.items() if v == best))
    return np.array(out)


def test_sweep_has_nineteen_entries(rng):
    x, y = rng.normal(size=(40, 2)), rng.integers(0, 3, 40)
    acc = knn_sweep(x, y)
    assert list(acc) == list(KNN_SWEEP) == list(range(1, 20))
    assert all(0 <= v <= 1 for v in acc.values())


def test_duplicated_query_is_perfect_at_k1(rng):
    x, y = rng.normal(size=(30, 3)), rng.integers(0, 2, 30)
    assert knn_sweep(x, y, x.copy(), y, ks=[1])[1] == 1.0


def test_separated_blobs(rng):
    x = np.concatenate([rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + 20])
    y = np.repeat([0, 1], 50)
    assert all(v == 1.0 for v in knn_sweep(x, y).values())


def test_matches_brute_force_with_ties():
    grid = np.array([[i, j] for i in range(4) for j in range(4)], dtype=float)
    labels = np.array([(i * 7 + 3) % 3 for i in range(16)])
    queries = np.array([[0.5, 0.5], [1.5, 1.0], [3.0, 3.0], [2.0, 0.5]])
    for k in (1, 2, 3, 4, 6):
        np.testing.assert_array_equal(knn_predict(grid, labels, queries, k), brute_knn(grid, labels, queries, k, False))
        np.testing.assert_array_equal(knn_predict(grid, labels, grid, k, exclude_self=True),
                                      brute_knn(grid, labels, grid, k, True))


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_self_sweep_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    x, y = rng.integers(0, 3, size=(12, 2)).astype(float), rng.integers(0, 3, 12)
    expected = np.mean(brute_knn(x, y, x, k, True) == y)
    assert knn_sweep(x, y, ks=[k])[k] == pytest.approx(expected)


def test_vote_tie_goes_to_lowest_class():
    train = np.array([[1.0], [-1.0]])
    assert knn_predict(train, [5, 2], [[0.0]], 2)[0] == 2


def test_knn_on_codes(rng):
    net = linear_net(np.eye(2), np.eye(2))
    ds = Dataset(rng.normal(size=(30, 2)), rng.integers(0, 2, 30))
    assert knn_on_codes(net, ds, 3) == knn_sweep(ds.points, ds.labels, ks=[3])[3]
    assert knn_on_codes(lambda x: x, ds, 1, query=ds) == 1.0
    with pytest.raises(DomainError):
        knn_on_codes(net, Dataset(ds.points), 1)


def test_knn_errors(rng):
    x, y = rng.normal(size=(5, 2)), np.array([0, 1, 0, 1, 0])
    with pytest.raises(DomainError):
        knn_sweep(x, y, ks=[5])
    with pytest.raises(DomainError):
        knn_sweep(x, y[:3])
    with pytest.raises(DomainError):
        knn_predict(x, y, x, 0)


# ---- tangent classifier

def labeled_blobs(rng, n_dim=3, per=40):
    x = np.concatenate([rng.normal(size=(per, n_dim)) * 0.3 - 1, rng.normal(size=(per, n_dim)) * 0.3 + 1])
    return Dataset(x, np.repeat([3, 7], per))


def test_softmax_and_uniform_classify(rng):
    p = softmax(np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]]))
    np.testing.assert_allclose(p, [[0.5, 0.5], [0.25, 0.75]])
    net = build_autoencoder(3, 2, (4,))
    model = MtcModel(np.zeros((3, 2)), net, 0.0, np.array([0, 1, 2]))
    _, probs = classify(model, rng.normal(size=(4, 3)))
    np.testing.assert_allclose(probs, 1 / 3)
    ident, single = classify(model, np.zeros(3))
    assert single.shape == (3,) and ident == 0


def test_beta_zero_frozen_is_softmax_regression(rng):
    ds = labeled_blobs(rng)
    net = build_autoencoder(3, 2, (4,), seed=1)
    cfg = MtcConfig(max_epochs=7, freeze_encoder=True, seed=5, alpha=1e-2)
    model = train_mtc(net, ds, 0.0, 2, cfg)
    np.testing.assert_array_equal(model.net.theta, net.theta)
    # independent replay: multinomial logistic regression on fixed codes
    codes, y = encode(net, ds.points), np.searchsorted([3, 7], ds.labels)
    r = np.random.default_rng(5)
    lim = math.sqrt(6 / 4)
    w = r.uniform(-lim, lim, size=(2, 2))
    adam = AdamState.zeros(4)
    for _ in range(7 * math.ceil(80 / 20)):
        idx = r.integers(0, 80, 20)
        p = softmax(codes[idx] @ w.T)
        p[np.arange(20), y[idx]] -= 1
        flat, adam = adam_step(w.ravel(), (p.T @ codes[idx] / 20).ravel(), adam, 1e-2, 0.9, 0.999)
        w = flat.reshape(2, 2)
    assert len(model.epoch_losses) == 7
    np.testing.assert_allclose(model.weights, w, atol=1e-12)


def test_separable_codes_reach_full_accuracy(rng):
    ds = labeled_blobs(rng)
    model = train_mtc(build_autoencoder(3, 4, (6,), seed=0), ds, 0.0, 2, MtcConfig(max_epochs=60, alpha=1e-2))
    assert mtc_accuracy(model, ds) == 1.0
    ids, _ = classify(model, ds.points[:1])
    assert ids[0] == ds.labels[0]


@pytest.mark.parametrize("beta", MTC_BETAS)
def test_mtc_gradients(rng, beta):
    net = build_autoencoder(3, 4, (5,), seed=2)
    x = rng.normal(size=(6, 3))
    bases, ok, _ = tangent_bases(net, x, 2)
    w, lab = rng.normal(size=(2, 4)), rng.integers(0, 2, 6)
    _, gw, gt = mtc_loss(w, net, x, lab, bases, ok, beta, grad=True)
    enc = net.encoder_slice()
    assert np.all(gt[enc.stop:] == 0)
    fd_t = fd_gradient(net, lambda m: mtc_loss(w, m, x, lab, bases, ok, beta), 1e-5, range(enc.stop))
    assert gradient_rel_error(gt[enc], fd_t) < 1e-4
    fd_w = np.zeros(w.size)
    for j in range(w.size):
        e = np.zeros(w.size)
        e[j] = 1e-5
        fd_w[j] = (mtc_loss(w + e.reshape(w.shape), net, x, lab, bases, ok, beta)
                   - mtc_loss(w - e.reshape(w.shape), net, x, lab, bases, ok, beta)) / 2e-5
    assert gradient_rel_error(gw.ravel(), fd_w) < 1e-4


def test_tangent_penalty_value(rng):
    net = build_autoencoder(3, 4, (5,), seed=2)
    x = rng.normal(size=(2, 3))
    bases, ok, _ = tangent_bases(net, x, 2)
    w, lab = rng.normal(size=(2, 4)), np.array([0, 1])
    from rankae.net import jacobian
    je = jacobian(net, x, "encoder")
    omega = sum(np.sum((w @ je[i] @ bases[i]) ** 2) for i in range(2)) / 2
    gap = mtc_loss(w, net, x, lab, bases, ok, 0.3) - mtc_loss(w, net, x, lab, bases, ok, 0.0)
    assert gap == pytest.approx(0.3 * omega, rel=1e-12)
    ok[1] = False
    gap = mtc_loss(w, net, x, lab, bases, ok, 0.3) - mtc_loss(w, net, x, lab, bases, ok, 0.0)
    assert gap == pytest.approx(0.3 * np.sum((w @ je[0] @ bases[0]) ** 2) / 2, rel=1e-12)


def test_rank_deficient_points_are_counted(rng):
    net = linear_net(rng.normal(size=(1, 3)), rng.normal(size=(3, 1)))
    model = train_mtc(net, labeled_blobs(rng), 0.1, 2, MtcConfig(max_epochs=2))
    assert model.skipped_bases == 80


def test_mtc_errors(rng):
    net = build_autoencoder(3, 2)
    with pytest.raises(DomainError):
        train_mtc(net, Dataset(rng.normal(size=(5, 3))), 0.0, 1)
    with pytest.raises(DomainError):
        train_mtc(net, labeled_blobs(rng), -1.0, 1)


def test_metrics_csv(tmp_path):
    rows = [{"metric": "knn", "K": 1, "accuracy": 0.1}, {"metric": "mtc", "beta": 0.01, "accuracy": 2 / 3}]
    path = write_metrics_csv(tmp_path / "m.csv", rows)
    back = list(csv.DictReader(path.open()))
    assert list(back[0]) == ["metric", "K", "accuracy", "beta"]
    assert float(back[1]["accuracy"]) == 2 / 3 and back[0]["beta"] == ""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayeshar.data import ImuWindow, SyntheticSpec, generate_synthetic
from bayeshar.encoder import (EmbeddingDistribution, EncoderModel, MetricConfig, MiningError,
                              encode, latent_kl_loss, metric_loss_batch, mine_pairs,
                              quadruplet_loss, reconstruction_loss, reparameterized_latent,
                              sample_batch, total_loss, train_encoder, triplet_loss)
from bayeshar.nncore import NumericalError, ShapeError

import oracles


# --- losses ---------------------------------------------------------------------

def test_triplet_examples():
    z = np.zeros(2)
    assert triplet_loss(z, z, np.array([2.0, 0.0]), 0.5) == 0.0
    assert triplet_loss(z, z, z, 0.5) == 0.5
    assert triplet_loss(np.array([0.0, 0.0]), np.array([0.0, 1.0]), np.array([3.0, 0.0]), 0.5) == 0.0


def test_quadruplet_examples():
    z = np.zeros(2)
    far1, far2 = np.array([5.0, 0.0]), np.array([0.0, -5.0])
    assert quadruplet_loss(z, z, far1, far2, 0.5, 0.25) == 0.0
    assert quadruplet_loss(z, z, z, z, 0.5, 0.25) == 0.75
    zi, zj, zk, zl = (np.array(p, dtype=float) for p in ([0, 0], [0, 1], [3, 0], [0, 3]))
    assert quadruplet_loss(zi, zj, zk, zl, 0.5, 0.5) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 3.0))
def test_triplet_rigid_invariance(seed, margin):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(3, 4))
    q, _ = np.linalg.qr(r.normal(size=(4, 4)))
    moved = pts @ q.T + r.normal(size=4)
    assert triplet_loss(*pts, margin) == pytest.approx(triplet_loss(*moved, margin), abs=1e-9)
    assert triplet_loss(*pts, margin) >= 0


def test_latent_kl_examples():
    assert latent_kl_loss(EmbeddingDistribution(np.zeros(3), np.ones(3))) == 0.0
    assert latent_kl_loss(EmbeddingDistribution(np.ones(1), np.ones(1))) == pytest.approx(0.5)


def test_latent_kl_matches_monte_carlo(rng):
    for _ in range(3):
        assert oracles.latent_kl_z(rng) < 3.0


def test_reconstruction_examples():
    w = np.arange(12.0).reshape(6, 2)
    assert reconstruction_loss(w, w) == 0.0
    assert reconstruction_loss(w, w + 1) == pytest.approx(1.0)
    r = w.copy()
    r[0, 0] += 2.0
    r[5, 1] -= 1.0
    assert reconstruction_loss(w, r) == pytest.approx(5.0 / 12.0)
    with pytest.raises(ShapeError):
        reconstruction_loss(w, w[:, :1])


def test_total_loss_weights():
    assert total_loss(1, 0, 0) == pytest.approx(0.7)
    assert total_loss(0, 1, 1) == pytest.approx(0.6)
    assert total_loss(0, 0, 0) == 0.0


def test_reparameterized_latent():
    d = EmbeddingDistribution(np.array([1.0, -2.0]), np.array([1.0, 4.0]))
    assert np.array_equal(reparameterized_latent(d, np.zeros(2)), d.mean)
    np.testing.assert_allclose(reparameterized_latent(d, np.ones(2)), [2.0, 0.0])


def test_embedding_validation():
    with pytest.raises(ValueError):
        EmbeddingDistribution(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(NumericalError):
        EmbeddingDistribution(np.array([np.nan, 0.0]), np.ones(2))


@pytest.mark.parametrize("name", ["triplet", "quadruplet", "latent KL"])
def test_loss_gradients(name, rng):
    worst = max(oracles.GRADIENT_CASES[name](rng) for _ in range(10))
    assert worst < 1e-4


@pytest.mark.parametrize("mode", ["triplet", "quadruplet"])
def test_encoder_objective_gradient(mode, rng):
    assert max(oracles.grad_encoder_total(rng, mode) for _ in range(3)) < 1e-4


# --- mining ---------------------------------------------------------------------

def test_semi_hard_picks_the_window_negative():
    # anchor 0; positive at d^2 = 0.5; negatives at d^2 = 1 and d^2 = 4
    z = np.array([[0.0], [np.sqrt(0.5)], [2.0], [1.0]])
    labels = np.array([0, 0, 1, 1])
    cfg = MetricConfig(mode="triplet", alpha_margin=2.0, mining="semi-hard")
    rows = mine_pairs(z, labels, cfg)
    row = rows[rows[:, 0] == 0][0]
    assert tuple(row) == (0, 1, 3)


def test_semi_hard_falls_back_to_hardest():
    z = np.array([[0.0], [0.1], [5.0], [9.0]])
    labels = np.array([0, 0, 1, 1])
    cfg = MetricConfig(mode="triplet", alpha_margin=0.5, mining="semi-hard")
    rows = mine_pairs(z, labels, cfg)
    assert tuple(rows[rows[:, 0] == 0][0]) == (0, 1, 2)


def test_hard_mining_one_tuple_per_anchor(rng):
    z = rng.normal(size=(12, 3))
    labels = np.repeat(np.arange(3), 4)
    rows = mine_pairs(z, labels, MetricConfig(mode="triplet", mining="hard"))
    assert sorted(rows[:, 0].tolist()) == list(range(12))
    d = ((z[:, None] - z[None]) ** 2).sum(-1)
    for a, p, n in rows:
        same = (labels == labels[a]) & (np.arange(12) != a)
        assert d[a, p] == d[a, same].max()
        assert d[a, n] == d[a, labels != labels[a]].min()


def test_quadruplet_label_constraints(rng):
    z = rng.normal(size=(16, 4))
    labels = np.repeat(np.arange(4), 4)
    rows = mine_pairs(z, labels, MetricConfig())
    assert len(rows) == 16
    for i, j, k, l in rows:
        assert labels[i] == labels[j] and i != j
        assert labels[k] != labels[i] and labels[l] != labels[i] and labels[l] != labels[k]


def test_separated_clusters_give_zero_loss():
    z = np.array([[0.0, 0.0]] * 3 + [[10.0, 0.0]] * 3 + [[0.0, 10.0]] * 3)
    labels = np.repeat(np.arange(3), 3)
    for mode in ("triplet", "quadruplet"):
        cfg = MetricConfig(mode=mode)
        loss, grad = metric_loss_batch(z, mine_pairs(z, labels, cfg), cfg)
        assert loss == 0.0 and np.all(grad == 0)


def test_mining_needs_class_diversity(rng):
    with pytest.raises(MiningError):
        mine_pairs(rng.normal(size=(4, 2)), np.zeros(4, int), MetricConfig(mode="triplet"))
    with pytest.raises(MiningError):
        mine_pairs(rng.normal(size=(4, 2)), np.array([0, 0, 1, 1]), MetricConfig())


def test_metric_config_validation():
    with pytest.raises(ValueError):
        MetricConfig(alpha1=0.0)
    with pytest.raises(ValueError):
        MetricConfig(mode="contrastive")
    with pytest.raises(ValueError):
        MetricConfig(mode="quadruplet", classes_per_batch=2)


def test_sample_batch_composition(rng):
    labels = np.repeat(np.arange(5), 10)
    idx = sample_batch(labels, MetricConfig(), rng)
    counts = np.bincount(labels[idx])
    assert sorted(counts[counts > 0].tolist()) == [8, 8, 8, 8]


# --- model and training ---------------------------------------------------------

def test_encode_is_deterministic_and_positive(rng):
    model = EncoderModel((6, 16), latent_dim=4, hidden=(8, 8), rng=rng)
    w = ImuWindow(rng.normal(size=(6, 16)))
    a, b = encode(model, w), encode(model, w)
    assert np.array_equal(a.mean, b.mean)
    assert np.all(a.variance > 0)
    with pytest.raises(ShapeError):
        encode(model, ImuWindow(rng.normal(size=(6, 15))))


def test_decoder_output_shape(rng):
    model = EncoderModel((6, 16), latent_dim=4, hidden=(8, 8), rng=rng)
    assert model.decode(np.zeros((3, 4))).shape == (3, 6, 16)


@pytest.fixture(scope="module")
def small_data():
    return generate_synthetic(SyntheticSpec(windows_per_class=80, hop=32, seed=5))


@pytest.fixture(scope="module")
def trained(small_data):
    return train_encoder(small_data, MetricConfig(), epochs=8, seed=2, hidden=(64, 32), lr=3e-4)


def test_training_trace(trained):
    assert len(trained.trace) == 8
    assert trained.trace[-1]["total"] < trained.trace[0]["total"]
    assert set(trained.trace[0]) == {"epoch", "recon", "kl", "metric", "total"}


def test_training_deterministic(small_data, trained):
    again = train_encoder(small_data, MetricConfig(), epochs=8, seed=2, hidden=(64, 32), lr=3e-4)
    assert again.trace == trained.trace


def test_embeddings_cluster_by_class(small_data, trained):
    mu, _ = trained.model.encode_batch(small_data.test.x)
    y = small_data.test.y
    d = np.sqrt(((mu[:, None] - mu[None]) ** 2).sum(-1))
    same = y[:, None] == y[None]
    off = ~np.eye(len(y), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_checkpoint_round_trip(tmp_path, trained, small_data):
    trained.model.save(tmp_path / "enc.ckpt")
    back = EncoderModel.load(tmp_path / "enc.ckpt")
    a = trained.model.encode_batch(small_data.test.x[:5])
    b = back.encode_batch(small_data.test.x[:5])
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()

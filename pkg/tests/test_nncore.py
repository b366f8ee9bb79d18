import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayeshar.nncore import (Adam, BayesianDenseLayer, CheckpointError, DenseLayer,
                             GaussianPosterior, NumericalError, ShapeError, backward, collect,
                             forward_deterministic, inverse_softplus, kl_gaussian_to_prior,
                             kl_gaussian_to_prior_grad, load_checkpoint, numerical_gradient,
                             optimizer_step, relative_error, sample_weights, sample_weights_grad,
                             save_checkpoint, sigmoid, softplus)

import oracles


def test_dense_examples():
    assert np.allclose(forward_deterministic(DenseLayer(np.eye(3), np.zeros(3)), [1, -2, 3]), [1, -2, 3])
    relu = DenseLayer(np.eye(2), np.zeros(2), "relu")
    assert np.array_equal(forward_deterministic(relu, [-1.0, 2.0]), [0.0, 2.0])
    assert np.allclose(forward_deterministic(DenseLayer([[2.0]], [1.0]), [3.0]), [7.0])


def test_dense_shape_errors():
    with pytest.raises(ShapeError):
        DenseLayer(np.eye(2), np.zeros(3))
    with pytest.raises(ShapeError):
        forward_deterministic(DenseLayer(np.eye(2), np.zeros(2)), [1.0, 2.0, 3.0])


def test_softplus_and_inverse():
    assert softplus(0.0) == pytest.approx(0.6931471805599453)
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(inverse_softplus(softplus(x[x > -20])), x[x > -20], rtol=1e-8)
    assert np.all(softplus(np.array([-700.0, -50.0, 0.0, 50.0])) > 0)
    np.testing.assert_allclose(sigmoid(np.array([-800.0, 0.0, 800.0])), [0.0, 0.5, 1.0])


def test_sample_weights_examples():
    post = GaussianPosterior(np.array([0.3, -1.0]), np.array([0.0, 0.0]))
    assert np.array_equal(sample_weights(post, np.zeros(2)), post.mu)
    assert sample_weights(GaussianPosterior([0.0], [0.0]), [1.0])[0] == pytest.approx(0.6931, abs=1e-4)
    tiny = GaussianPosterior([0.5], [-800.0])
    assert sample_weights(tiny, [5.0])[0] == pytest.approx(0.5, abs=1e-300)
    with pytest.raises(ShapeError):
        sample_weights(post, np.zeros(3))


def test_sample_weights_grad_matches_fd(rng):
    mu, rho = rng.normal(size=4), rng.normal(size=4)
    eps, up = rng.normal(size=4), rng.normal(size=4)

    def f():
        return float(up @ sample_weights(GaussianPosterior(mu, rho), eps))
    g_mu, g_rho = sample_weights_grad(GaussianPosterior(mu, rho), eps, up)
    num = numerical_gradient(f, [mu, rho])
    assert relative_error([g_mu, g_rho], num) < 1e-7


def test_reparameterisation_unbiased(rng):
    post = GaussianPosterior(np.array([0.2, -1.5]), np.array([0.5, -1.0]))
    n = 100_000
    w = sample_weights(GaussianPosterior(np.tile(post.mu, (n, 1)), np.tile(post.rho, (n, 1))),
                       rng.standard_normal((n, 2)))
    se = post.sigma / np.sqrt(n)
    assert np.all(np.abs(w.mean(axis=0) - post.mu) < 3 * se)


def test_kl_closed_form_examples():
    sigma1 = inverse_softplus(1.0)
    assert kl_gaussian_to_prior(GaussianPosterior([0.0], [sigma1]), 1.0) == pytest.approx(0.0, abs=1e-12)
    assert kl_gaussian_to_prior(GaussianPosterior([1.0], [sigma1]), 1.0) == pytest.approx(0.5)
    g_mu, _ = kl_gaussian_to_prior_grad(GaussianPosterior([1.0], [sigma1]), 1.0)
    assert g_mu[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        kl_gaussian_to_prior(GaussianPosterior([0.0], [0.0]), 0.0)


def test_kl_hand_case_against_monte_carlo(rng):
    post = GaussianPosterior([0.3], [inverse_softplus(0.5)])
    est, se = oracles.mc_kl_prior(post.mu, post.sigma, 1.0, 100_000, rng)
    assert abs(kl_gaussian_to_prior(post, 1.0) - est) < 3 * se


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-6, 4), st.floats(0.1, 5))
def test_kl_non_negative(mu, rho, prior):
    post = GaussianPosterior(np.array(mu), np.full(len(mu), rho))
    assert kl_gaussian_to_prior(post, prior) >= -1e-12


def test_kl_grad_matches_fd(rng):
    mu, rho = rng.normal(size=5), rng.normal(size=5)
    f = lambda: kl_gaussian_to_prior(GaussianPosterior(mu, rho), 1.7)  # noqa: E731
    analytic = kl_gaussian_to_prior_grad(GaussianPosterior(mu, rho), 1.7)
    assert relative_error(analytic, numerical_gradient(f, [mu, rho])) < 1e-7


def _dense_net(rng):
    return [DenseLayer.init(4, 5, "tanh", rng), DenseLayer.init(5, 3, "tanh", rng),
            DenseLayer.init(3, 2, "identity", rng)]


def _bayes_net(rng):
    return [BayesianDenseLayer.init(3, 4, "tanh", rng, rho_init=-1.0),
            BayesianDenseLayer.init(4, 2, "identity", rng, rho_init=-1.0)]


@pytest.mark.parametrize("seed", range(5))
def test_network_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = _dense_net(rng)
    x, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))

    def loss():
        h = x
        for l in layers:
            h = l.forward(h)
        return 0.5 * np.sum((h - t) ** 2), h
    _, h = loss()
    backward(layers, h - t)
    params, grads = collect(layers)
    analytic = [g.copy() for g in grads]
    assert relative_error(analytic, numerical_gradient(lambda: loss()[0], params)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_bayesian_network_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = _bayes_net(rng)
    noise = [l.draw_noise(rng) for l in layers]
    x, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))

    def loss():
        h = x
        for l, e in zip(layers, noise):
            h = l.forward(h, e)
        return 0.5 * np.sum((h - t) ** 2) + 0.3 * sum(l.kl() for l in layers), h
    _, h = loss()
    backward(layers, h - t)
    for l in layers:
        l.add_kl_grad(0.3)
    params, grads = collect(layers)
    analytic = [g.copy() for g in grads]
    assert relative_error(analytic, numerical_gradient(lambda: loss()[0], params)) < 1e-4


def test_constant_loss_gives_zero_gradients(rng):
    layers = _dense_net(rng)
    h = rng.normal(size=(3, 4))
    for l in layers:
        h = l.forward(h)
    backward(layers, np.zeros_like(h))
    _, grads = collect(layers)
    assert all(np.all(g == 0) for g in grads)


def test_backward_names_failing_layer(rng):
    layers = _dense_net(rng)
    h = rng.normal(size=(2, 4))
    for l in layers:
        h = l.forward(h)
    with pytest.raises(NumericalError, match="layer 2"):
        backward(layers, np.full_like(h, np.nan))


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    optimizer_step(Adam(), p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    opt = Adam()
    assert (opt.lr, opt.betas, opt.eps) == (1e-3, (0.9, 0.999), 1e-8)
    opt.step(w, [2 * w[0]])
    assert abs(w[0][0]) < 1.0
    for _ in range(3000):
        opt.step(w, [2 * w[0]])
    assert abs(w[0][0]) < 0.05


def test_adam_deterministic():
    def run():
        r = np.random.default_rng(7)
        w = [r.normal(size=3)]
        opt = Adam(lr=0.01)
        for _ in range(50):
            opt.step(w, [r.normal(size=3) + w[0]])
        return w[0].tobytes()
    assert run() == run()


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(np.pi)}
    save_checkpoint(tmp_path / "m.ckpt", "demo", tensors, {"hidden": [3, 2]})
    kind, back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert kind == "demo" and meta == {"hidden": [3, 2]}
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_checkpoint_corruption_detected(tmp_path, rng):
    save_checkpoint(tmp_path / "m.ckpt", "demo", {"a": rng.normal(size=3)})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")

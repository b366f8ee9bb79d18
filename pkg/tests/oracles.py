"""Reference checks shared by the unit tests and the acceptance suite.

Each ``grad_*`` helper builds one random small instance, computes the
analytic gradient, and returns its relative error against central finite
differences (step 1e-5).
"""
import numpy as np

from bayeshar.bnn import build_fcbnn, elbo_loss
from bayeshar.encoder import (EmbeddingDistribution, EncoderModel, MetricConfig, latent_kl_grad,
                              latent_kl_loss, quadruplet_loss, quadruplet_loss_grad, triplet_loss,
                              triplet_loss_grad)
from bayeshar.nncore import (GaussianPosterior, collect, kl_gaussian_to_prior, numerical_gradient,
                             relative_error)

HINGE_CLEARANCE = 1e-2


def _active_points(rng, n, d, margin_fn):
    # keep every hinge argument away from its kink so FD sees a smooth function
    while True:
        pts = [rng.normal(size=d) for _ in range(n)]
        if all(abs(u) > HINGE_CLEARANCE for u in margin_fn(*pts)):
            return pts


def grad_triplet(rng):
    margin = rng.uniform(0.2, 2.0)

    def args(za, zp, zn):
        return [np.sum((za - zp) ** 2) - np.sum((za - zn) ** 2) + margin]
    pts = _active_points(rng, 3, 4, args)
    analytic = triplet_loss_grad(*pts, margin)
    numeric = numerical_gradient(lambda: triplet_loss(*pts, margin), pts)
    return relative_error(analytic, numeric)


def grad_quadruplet(rng):
    a1, a2 = rng.uniform(0.2, 2.0, size=2)

    def args(zi, zj, zk, zl):
        dij = np.sum((zi - zj) ** 2)
        return [dij - np.sum((zi - zk) ** 2) + a1, dij - np.sum((zl - zk) ** 2) + a2]
    pts = _active_points(rng, 4, 4, args)
    analytic = quadruplet_loss_grad(*pts, a1, a2)
    numeric = numerical_gradient(lambda: quadruplet_loss(*pts, a1, a2), pts)
    return relative_error(analytic, numeric)


def grad_latent_kl(rng):
    mean = rng.normal(size=5)
    logvar = rng.normal(0, 0.7, size=5)
    analytic = latent_kl_grad(mean, logvar)
    numeric = numerical_gradient(
        lambda: latent_kl_loss(EmbeddingDistribution(mean, np.exp(logvar))), [mean, logvar])
    return relative_error(analytic, numeric)


def grad_encoder_total(rng, mode="quadruplet"):
    """Full encoder objective (reconstruction + KL + mined metric loss)."""
    cfg = MetricConfig(mode=mode, mining="semi-hard", classes_per_batch=3, samples_per_class=2)
    model = EncoderModel((6, 4), latent_dim=3, hidden=(6, 5), rng=rng)
    # tanh trunk: smooth, so FD is not spoiled by relu kinks
    for layer in model.trunk:
        layer.activation = "tanh"
    for layer in model.decoder[:-1]:
        layer.activation = "tanh"
    x = rng.normal(size=(6, 6, 4))
    labels = np.repeat(np.arange(3), 2)
    noise = rng.normal(size=(6, 3))
    model.loss_and_grad(x, labels, noise, cfg)
    params, grads = collect(model.layers)
    analytic = [g.copy() for g in grads]
    numeric = numerical_gradient(lambda: model.loss_and_grad(x, labels, noise, cfg)["total"], params)
    return relative_error(analytic, numeric)


def grad_elbo(rng):
    """Minibatch free energy with frozen weight noise."""
    model = build_fcbnn(3, 3, hidden=(4, 4, 3), rng=rng, rho_init=-1.0)
    for layer in model.layers[:-1]:
        layer.activation = "tanh"
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, size=5)
    noise = [model.draw_noise(rng) for _ in range(2)]
    kl_scale = rng.uniform(0.1, 1.0)
    elbo_loss(model, x, y, noise, kl_scale)
    params, grads = collect(model.layers)
    analytic = [g.copy() for g in grads]
    numeric = numerical_gradient(lambda: elbo_loss(model, x, y, noise, kl_scale, grad=False), params)
    return relative_error(analytic, numeric)


GRADIENT_CASES = {
    "triplet": grad_triplet,
    "quadruplet": grad_quadruplet,
    "encoder composite": grad_encoder_total,
    "latent KL": grad_latent_kl,
    "ELBO": grad_elbo,
}


# --- Monte-Carlo KL ---------------------------------------------------------------

def mc_kl_prior(mu, sigma, prior_sigma, n, rng):
    """(estimate, standard error) of E_q[log q(w) - log p(w)], summed over elements."""
    w = mu[None, :] + sigma[None, :] * rng.standard_normal((n, mu.size))
    log_q = -0.5 * ((w - mu) / sigma) ** 2 - np.log(sigma)
    log_p = -0.5 * (w / prior_sigma) ** 2 - np.log(prior_sigma)
    samples = (log_q - log_p).sum(axis=1)
    return samples.mean(), samples.std(ddof=1) / np.sqrt(n)


def mc_latent_kl(mean, var, n, rng):
    z = mean[None, :] + np.sqrt(var)[None, :] * rng.standard_normal((n, mean.size))
    log_q = -0.5 * (z - mean) ** 2 / var - 0.5 * np.log(var)
    log_p = -0.5 * z ** 2
    samples = (log_q - log_p).sum(axis=1)
    return samples.mean(), samples.std(ddof=1) / np.sqrt(n)


def kl_prior_z(rng, n=100_000):
    """Standardised deviation of analytic vs MC KL(q || prior) on one random posterior."""
    mu = rng.normal(0, 1, size=4)
    rho = rng.normal(-0.5, 0.7, size=4)
    prior = rng.uniform(0.5, 2.0)
    post = GaussianPosterior(mu, rho)
    est, se = mc_kl_prior(mu, post.sigma, prior, n, rng)
    return abs(kl_gaussian_to_prior(post, prior) - est) / se


def latent_kl_z(rng, n=100_000):
    mean = rng.normal(0, 1, size=4)
    var = np.exp(rng.normal(0, 0.7, size=4))
    est, se = mc_latent_kl(mean, var, n, rng)
    return abs(latent_kl_loss(EmbeddingDistribution(mean, var)) - est) / se


# --- random networks for SHAP -----------------------------------------------------

def random_mlp(M, K, rng, hidden=(8, 6)):
    """Deterministic 2-hidden-layer tanh network mapping (N, M) -> (N, K)."""
    W1 = rng.normal(size=(hidden[0], M))
    W2 = rng.normal(size=(hidden[1], hidden[0])) / np.sqrt(hidden[0])
    W3 = rng.normal(size=(K, hidden[1])) / np.sqrt(hidden[1])
    b1, b2 = rng.normal(size=hidden[0]), rng.normal(size=hidden[1])

    def f(x):
        x = np.atleast_2d(x)
        return np.tanh(np.tanh(x @ W1.T + b1) @ W2.T + b2) @ W3.T
    return f

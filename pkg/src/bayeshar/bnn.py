"""Fully-connected Bayesian classifier over embedding distributions.

Inputs are ``mean || log1p(variance)``. Training minimises the variational
free energy per minibatch::

    kl_scale * KL(q(w) || p(w)) + mean_s sum_i NLL(y_i | x_i, w_s)

with ``kl_scale = 1 / num_batches`` so that one epoch adds up to the full
objective. Prediction averages softmax outputs over T weight draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nncore import (Adam, BayesianDenseLayer, GaussianPosterior, NumericalError, backward,
                     collect, load_checkpoint, save_checkpoint, softplus)

DEFAULT_HIDDEN = (32, 32, 16)


def bnn_features(means, variances):
    """Classifier input: mean concatenated with log(1 + variance)."""
    return np.concatenate([np.asarray(means, dtype=np.float64),
                           np.log1p(np.asarray(variances, dtype=np.float64))], axis=-1)


class FcBnnModel:
    def __init__(self, layers, latent_dim, n_classes):
        self.layers = list(layers)
        self.latent_dim = latent_dim
        self.n_classes = n_classes

    @property
    def hidden(self):
        return tuple(layer.shape[0] for layer in self.layers[:-1])

    @property
    def input_dim(self):
        return self.layers[0].shape[1]

    def n_params(self):
        return sum(layer.n_params() for layer in self.layers)

    def draw_noise(self, rng):
        return [layer.draw_noise(rng) for layer in self.layers]

    def zero_noise(self):
        return [(np.zeros(l.wq.shape), np.zeros(l.bq.shape)) for l in self.layers]

    def logits(self, x, noise):
        h = x
        for layer, eps in zip(self.layers, noise):
            h = layer.forward(h, eps)
        return h

    def kl(self):
        return sum(layer.kl() for layer in self.layers)

    def state(self):
        tensors = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                tensors[f"{i}.{k}"] = v
        meta = {"latent_dim": self.latent_dim, "n_classes": self.n_classes,
                "hidden": list(self.hidden), "prior_sigma": self.layers[0].prior_sigma}
        return tensors, meta

    def save(self, path, extra_meta=None):
        tensors, meta = self.state()
        meta.update(extra_meta or {})
        save_checkpoint(path, "fcbnn", tensors, meta)

    @classmethod
    def load(cls, path):
        kind, tensors, meta = load_checkpoint(path)
        if kind != "fcbnn":
            raise ValueError(f"{path}: expected an fcbnn checkpoint, got {kind!r}")
        layers = []
        n = len(meta["hidden"]) + 1
        for i in range(n):
            act = "relu" if i < n - 1 else "identity"
            layers.append(BayesianDenseLayer(
                GaussianPosterior(tensors[f"{i}.w_mu"], tensors[f"{i}.w_rho"]),
                GaussianPosterior(tensors[f"{i}.b_mu"], tensors[f"{i}.b_rho"]),
                meta["prior_sigma"], act))
        model = cls(layers, meta["latent_dim"], meta["n_classes"])
        model.meta = meta
        return model


def build_fcbnn(d: int, K: int, hidden=DEFAULT_HIDDEN, rng=None, prior_sigma=1.0,
                rho_init=-5.0) -> FcBnnModel:
    """Four Bayesian dense layers: 2d -> h1 -> h2 -> h3 -> K."""
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = (2 * d,) + tuple(hidden) + (K,)
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        act = "relu" if i < len(widths) - 2 else "identity"
        layers.append(BayesianDenseLayer.init(a, b, act, rng, prior_sigma, rho_init))
    return FcBnnModel(layers, d, K)


def param_count(d, K, hidden):
    widths = (2 * d,) + tuple(hidden) + (K,)
    return sum(2 * (a + 1) * b for a, b in zip(widths[:-1], widths[1:]))


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def elbo_loss(model: FcBnnModel, x, y, noise_sets, kl_scale=1.0, grad=True):
    """Minibatch free energy; fills layer grads when ``grad`` is true.

    ``noise_sets`` holds one noise list per weight sample.
    """
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= model.n_classes):
        raise ValueError("labels out of range")
    if len(noise_sets) < 1:
        raise ValueError("need at least one weight sample")
    n_s = len(noise_sets)
    nll = 0.0
    acc = None
    for noise in noise_sets:
        z = model.logits(x, noise)
        lp = log_softmax(z)
        nll += -lp[np.arange(len(y)), y].sum() / n_s
        if grad:
            g = np.exp(lp)
            g[np.arange(len(y)), y] -= 1.0
            backward(model.layers, g / n_s)
            _, gs = collect(model.layers)
            acc = [a + b for a, b in zip(acc, gs)] if acc is not None else [g_.copy() for g_ in gs]
    kl = model.kl()
    loss = kl_scale * kl + nll
    if not np.isfinite(loss):
        raise NumericalError("ELBO is not finite")
    if grad:
        i = 0
        for layer in model.layers:
            for k in layer.params:
                layer.grads[k] = acc[i]
                i += 1
            layer.add_kl_grad(kl_scale)
    return float(loss)


@dataclass
class PredictiveResult:
    prob_mean: np.ndarray  # (N, K) or (K,)
    prob_std: np.ndarray
    entropy: np.ndarray
    samples_used: int

    @property
    def argmax(self):
        return np.argmax(self.prob_mean, axis=-1)


@dataclass
class OodDecision:
    score: float
    threshold: float
    is_ood: bool


def predict(model: FcBnnModel, x, T: int = 100, seed=0) -> PredictiveResult:
    """Posterior predictive from T weight draws shared across the batch."""
    if T < 2:
        raise ValueError("T must be >= 2")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    probs = np.empty((T, x2.shape[0], model.n_classes))
    for t in range(T):
        probs[t] = softmax(model.logits(x2, model.draw_noise(rng)))
    pm = probs.mean(axis=0)
    ps = probs.std(axis=0)
    ent = -np.sum(pm * np.log(np.clip(pm, 1e-300, None)), axis=-1)
    if single:
        pm, ps, ent = pm[0], ps[0], ent[0]
    return PredictiveResult(pm, ps, ent, T)


def predict_fn(model: FcBnnModel, T: int = 50, seed=0):
    """Deterministic f(x) -> prob_mean with the T weight draws frozen."""
    rng = np.random.default_rng(seed)
    draws = [model.draw_noise(rng) for _ in range(T)]

    def f(x):
        x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros((x2.shape[0], model.n_classes))
        for noise in draws:
            out += softmax(model.logits(x2, noise))
        return out / T
    return f


def ood_score(result: PredictiveResult):
    """Mean per-class predictive std; larger means more alien."""
    return np.mean(result.prob_std, axis=-1)


def calibrate_ood_threshold(scores, percentile=99.0) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no validation scores")
    return float(np.percentile(scores, percentile))


def ood_decisions(scores, threshold):
    return [OodDecision(float(s), float(threshold), bool(s > threshold)) for s in np.atleast_1d(scores)]


@dataclass
class BnnTrainResult:
    model: FcBnnModel
    trace: list = field(default_factory=list)


def train_fcbnn(model: FcBnnModel, x, y, epochs=100, seed=0, x_val=None, y_val=None,
                batch_size=64, lr=1e-2, n_weight_samples=1, eval_T=20) -> BnnTrainResult:
    """Minibatch Adam on the free energy; records loss and validation accuracy."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    n_batches = max(1, int(np.ceil(n / batch_size)))
    kl_scale = 1.0 / n_batches
    opt = Adam(lr=lr)
    params, _ = collect(model.layers)
    trace = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * batch_size:(b + 1) * batch_size]
            noise = [model.draw_noise(rng) for _ in range(n_weight_samples)]
            total += elbo_loss(model, x[idx], y[idx], noise, kl_scale)
            _, grads = collect(model.layers)
            opt.step(params, grads)
        row = {"epoch": epoch, "loss": total}
        if x_val is not None and len(y_val):
            res = predict(model, x_val, T=eval_T, seed=rng.integers(2**32))
            row["val_accuracy"] = float(np.mean(res.argmax == y_val))
        trace.append(row)
    return BnnTrainResult(model, trace)


def accuracy(model, x, y, T=100, seed=0):
    return float(np.mean(predict(model, x, T, seed).argmax == np.asarray(y)))


def weight_variability_summary(model: FcBnnModel, bins=20):
    """Per-layer histogram of learned sigmas and their standard deviation."""
    out = []
    for i, layer in enumerate(model.layers):
        sig = np.concatenate([softplus(layer.wq.rho).ravel(), softplus(layer.bq.rho).ravel()])
        counts, edges = np.histogram(sig, bins=bins)
        out.append({"layer": i, "n": int(sig.size), "sigma_mean": float(sig.mean()),
                    # shifting by one element leaves the std unchanged but makes a
                    # constant layer come out exactly 0
                    "sigma_std": float((sig - sig[0]).std()), "counts": counts.tolist(),
                    "edges": edges.tolist()})
    return out


def embed_windows(encoder, windows, tracker_config=None):
    """Encoder (mean, variance) per window; Kalman-tracked per recording
    segment when ``tracker_config`` is given."""
    from .tracker import track_arrays

    mu, var = encoder.encode_batch(windows.x)
    if tracker_config is not None:
        for idx in windows.segments():
            mu[idx], var[idx] = track_arrays(mu[idx], var[idx], tracker_config)
    return mu, var


def classify_pipeline(encoder, tracker_config, model: FcBnnModel, windows, T=100, seed=0,
                      threshold=float("inf")):
    """Per-window (PredictiveResult, OodDecision) pairs, in input order.

    ``tracker_config=None`` feeds raw encoder embeddings to the classifier;
    otherwise embeddings are Kalman-tracked first.
    """
    mu, var = embed_windows(encoder, windows, tracker_config)
    res = predict(model, bnn_features(mu, var), T, seed)
    scores = ood_score(res)
    return [(PredictiveResult(res.prob_mean[i], res.prob_std[i], res.entropy[i], T),
             OodDecision(float(scores[i]), float(threshold), bool(scores[i] > threshold)))
            for i in range(len(scores))]

"""Variational encoder-decoder trained with a metric-learning objective.

Objective per batch::

    total = 0.7 * reconstruction + 0.3 * (latent KL + metric)

The metric term (triplet or quadruplet hinge on squared Euclidean
distances) is applied to the mean embedding, with online hard or
semi-hard mining inside each P x S batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import DatasetSplit, ImuWindow, WindowSet
from .nncore import (Adam, DenseLayer, NumericalError, ShapeError, backward, collect,
                     load_checkpoint, save_checkpoint)

LOGVAR_MIN, LOGVAR_MAX = -18.0, 9.0
VAR_MIN, VAR_MAX = 1e-8, 1e4
RECON_WEIGHT = 0.7
REG_WEIGHT = 0.3


@dataclass(frozen=True)
class EmbeddingDistribution:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        v = np.asarray(self.variance, dtype=np.float64)
        if m.shape != v.shape or m.ndim != 1:
            raise ShapeError("mean and variance must be matching vectors")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise NumericalError("embedding contains non-finite values")
        if np.any(v <= 0):
            raise ValueError("variance must be strictly positive")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", v)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class MetricConfig:
    mode: str = "quadruplet"
    alpha_margin: float = 0.5
    alpha1: float = 0.5
    alpha2: float = 0.25
    mining: str = "semi-hard"
    classes_per_batch: int = 4
    samples_per_class: int = 8

    def __post_init__(self):
        if self.mode not in ("triplet", "quadruplet"):
            raise ValueError(f"unknown metric mode {self.mode!r}")
        if self.mining not in ("hard", "semi-hard"):
            raise ValueError(f"unknown mining strategy {self.mining!r}")
        if min(self.alpha_margin, self.alpha1, self.alpha2) <= 0:
            raise ValueError("margins must be positive")
        if self.samples_per_class < 2 or self.classes_per_batch < 2:
            raise ValueError("batches need >= 2 classes and >= 2 samples per class")
        if self.mode == "quadruplet" and self.classes_per_batch < 3:
            raise ValueError("quadruplet batches need >= 3 classes")

    @property
    def margin(self) -> float:
        return self.alpha_margin if self.mode == "triplet" else self.alpha1


# ---------------------------------------------------------------------------
# losses; every *_grad returns gradients w.r.t. the loss inputs
# ---------------------------------------------------------------------------

def _sq(u):
    return np.sum(u * u, axis=-1)


def triplet_loss(za, zp, zn, margin):
    return float(np.maximum(_sq(za - zp) - _sq(za - zn) + margin, 0.0))


def triplet_loss_grad(za, zp, zn, margin):
    za, zp, zn = (np.asarray(v, dtype=np.float64) for v in (za, zp, zn))
    active = _sq(za - zp) - _sq(za - zn) + margin > 0
    if not active:
        z = np.zeros_like(za)
        return z, z.copy(), z.copy()
    return 2 * (zn - zp), -2 * (za - zp), 2 * (za - zn)


def quadruplet_loss(zi, zj, zk, zl, alpha1, alpha2):
    dij = _sq(zi - zj)
    t1 = max(dij - _sq(zi - zk) + alpha1, 0.0)
    t2 = max(dij - _sq(zl - zk) + alpha2, 0.0)
    return float(t1 + t2)


def quadruplet_loss_grad(zi, zj, zk, zl, alpha1, alpha2):
    zi, zj, zk, zl = (np.asarray(v, dtype=np.float64) for v in (zi, zj, zk, zl))
    gi, gj, gk, gl = (np.zeros_like(zi) for _ in range(4))
    dij = _sq(zi - zj)
    if dij - _sq(zi - zk) + alpha1 > 0:
        gi += 2 * (zk - zj)
        gj += -2 * (zi - zj)
        gk += 2 * (zi - zk)
    if dij - _sq(zl - zk) + alpha2 > 0:
        gi += 2 * (zi - zj)
        gj += -2 * (zi - zj)
        gl += -2 * (zl - zk)
        gk += 2 * (zl - zk)
    return gi, gj, gk, gl


def latent_kl_loss(dist: EmbeddingDistribution) -> float:
    """KL(N(mean, diag(variance)) || N(0, I))."""
    v, m = dist.variance, dist.mean
    return float(0.5 * np.sum(v + m * m - 1.0 - np.log(v)))


def latent_kl_grad(mean, logvar):
    """Gradient of the latent KL w.r.t. (mean, log-variance)."""
    return np.asarray(mean, dtype=np.float64), 0.5 * (np.exp(logvar) - 1.0)


def reconstruction_loss(window, reconstructed) -> float:
    w = np.asarray(getattr(window, "samples", window), dtype=np.float64)
    r = np.asarray(getattr(reconstructed, "samples", reconstructed), dtype=np.float64)
    if w.shape != r.shape:
        raise ShapeError("reconstruction shape mismatch")
    return float(np.mean((w - r) ** 2))


def total_loss(recon, kl, metric):
    return RECON_WEIGHT * recon + REG_WEIGHT * (kl + metric)


def reparameterized_latent(dist: EmbeddingDistribution, noise):
    return dist.mean + np.sqrt(dist.variance) * np.asarray(noise, dtype=np.float64)


# ---------------------------------------------------------------------------
# online mining
# ---------------------------------------------------------------------------

class MiningError(ValueError):
    pass


def mine_pairs(embeddings, labels, config: MetricConfig) -> np.ndarray:
    """Tuples of batch indices, one row per usable anchor.

    Rows are (anchor, positive, negative) for triplet mode and
    (i, j, k, l) for quadruplet mode, where (i, j) share a class and k, l
    come from two further distinct classes.
    """
    z = np.ascontiguousarray(embeddings, dtype=np.float64)
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    n_classes = len(np.unique(lab))
    if n_classes < 2:
        raise MiningError("batch needs at least two classes")
    if config.mode == "quadruplet" and n_classes < 3:
        raise MiningError("quadruplet mining needs at least three classes")
    d = _kernels.pairwise_sqdist(z)
    if config.mining == "hard":
        pos, neg = _kernels.mine_hard(d, lab)
    else:
        pos, neg = _kernels.mine_semihard(d, lab, float(config.margin))
    anchors = np.arange(len(lab), dtype=np.int64)
    ok = (pos >= 0) & (neg >= 0)
    if config.mode == "triplet":
        return np.stack([anchors[ok], pos[ok], neg[ok]], axis=1)
    second = _kernels.mine_second_negative(d, lab, anchors, neg)
    ok &= second >= 0
    return np.stack([anchors[ok], pos[ok], neg[ok], second[ok]], axis=1)


def metric_loss_batch(z, tuples, config: MetricConfig):
    """Mean hinge loss over mined tuples and its gradient w.r.t. ``z``."""
    grad = np.zeros_like(z)
    if len(tuples) == 0:
        return 0.0, grad
    n = len(tuples)
    if config.mode == "triplet":
        a, p, q = z[tuples[:, 0]], z[tuples[:, 1]], z[tuples[:, 2]]
        u = _sq(a - p) - _sq(a - q) + config.alpha_margin
        act = (u > 0)[:, None] / n
        np.add.at(grad, tuples[:, 0], act * 2 * (q - p))
        np.add.at(grad, tuples[:, 1], act * -2 * (a - p))
        np.add.at(grad, tuples[:, 2], act * 2 * (a - q))
        return float(np.maximum(u, 0).sum() / n), grad
    i, j, k, l = (z[tuples[:, c]] for c in range(4))
    dij = _sq(i - j)
    u1 = dij - _sq(i - k) + config.alpha1
    u2 = dij - _sq(l - k) + config.alpha2
    a1 = (u1 > 0)[:, None] / n
    a2 = (u2 > 0)[:, None] / n
    np.add.at(grad, tuples[:, 0], a1 * 2 * (k - j) + a2 * 2 * (i - j))
    np.add.at(grad, tuples[:, 1], -(a1 + a2) * 2 * (i - j))
    np.add.at(grad, tuples[:, 2], a1 * 2 * (i - k) + a2 * 2 * (l - k))
    np.add.at(grad, tuples[:, 3], a2 * -2 * (l - k))
    return float((np.maximum(u1, 0) + np.maximum(u2, 0)).sum() / n), grad


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class EncoderModel:
    """Dense encoder trunk with mean / log-variance heads and a mirrored decoder."""

    def __init__(self, input_shape, latent_dim=16, hidden=(128, 64), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_shape = tuple(input_shape)
        self.latent_dim = latent_dim
        self.hidden = tuple(hidden)
        n_in = int(np.prod(self.input_shape))
        widths = (n_in,) + self.hidden
        self.trunk = [DenseLayer.init(a, b, "relu", rng) for a, b in zip(widths[:-1], widths[1:])]
        self.mean_head = DenseLayer.init(widths[-1], latent_dim, "identity", rng)
        self.logvar_head = DenseLayer.init(widths[-1], latent_dim, "identity", rng)
        dec = (latent_dim,) + self.hidden[::-1]
        self.decoder = [DenseLayer.init(a, b, "relu", rng) for a, b in zip(dec[:-1], dec[1:])]
        self.decoder.append(DenseLayer.init(dec[-1], n_in, "identity", rng))

    @property
    def layers(self):
        return self.trunk + [self.mean_head, self.logvar_head] + self.decoder

    def _flatten(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-len(self.input_shape):] != self.input_shape:
            raise ShapeError(f"window shape {x.shape} does not match model {self.input_shape}")
        return x.reshape(x.shape[:-len(self.input_shape)] + (-1,))

    def encode_batch(self, x):
        """(means, variances) for a stack of windows."""
        h = self._flatten(x)
        for layer in self.trunk:
            h = layer.forward(h)
        mu = self.mean_head.forward(h)
        lv = np.clip(self.logvar_head.forward(h), LOGVAR_MIN, LOGVAR_MAX)
        return mu, np.clip(np.exp(lv), VAR_MIN, VAR_MAX)

    def decode(self, z):
        h = z
        for layer in self.decoder:
            h = layer.forward(h)
        return h.reshape(h.shape[:-1] + self.input_shape)

    def loss_and_grad(self, x, labels, noise, config: MetricConfig):
        """Batch objective; fills layer grads. Returns the four loss terms."""
        n = x.shape[0]
        flat = self._flatten(x)
        h = flat
        for layer in self.trunk:
            h = layer.forward(h)
        mu = self.mean_head.forward(h)
        lv_raw = self.logvar_head.forward(h)
        lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
        std = np.exp(0.5 * lv)
        z = mu + std * noise
        r = z
        for layer in self.decoder:
            r = layer.forward(r)

        diff = r - flat
        recon = float(np.mean(diff * diff))
        kl = float(0.5 * np.sum(np.exp(lv) + mu * mu - 1.0 - lv) / n)
        tuples = mine_pairs(mu, labels, config)
        metric, g_metric = metric_loss_batch(mu, tuples, config)
        total = total_loss(recon, kl, metric)
        if not np.isfinite(total):
            raise NumericalError("encoder loss diverged")

        g_r = RECON_WEIGHT * 2.0 * diff / diff.size
        g_z = backward(self.decoder, g_r)
        g_mu = g_z + REG_WEIGHT * (mu / n + g_metric)
        g_lv = g_z * noise * std * 0.5 + REG_WEIGHT * 0.5 * (np.exp(lv) - 1.0) / n
        g_lv = g_lv * ((lv_raw >= LOGVAR_MIN) & (lv_raw <= LOGVAR_MAX))
        g_h = self.mean_head.backward(g_mu, "mean head") + self.logvar_head.backward(g_lv, "log-variance head")
        backward(self.trunk, g_h)
        return {"recon": recon, "kl": kl, "metric": metric, "total": total}

    def state(self):
        tensors = {}
        for i, layer in enumerate(self.layers):
            tensors[f"{i}.W"] = layer.W
            tensors[f"{i}.b"] = layer.b
        meta = {"input_shape": list(self.input_shape), "latent_dim": self.latent_dim,
                "hidden": list(self.hidden)}
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state()
        save_checkpoint(path, "encoder", tensors, meta)

    @classmethod
    def load(cls, path):
        kind, tensors, meta = load_checkpoint(path)
        if kind != "encoder":
            raise ValueError(f"{path}: expected an encoder checkpoint, got {kind!r}")
        model = cls(meta["input_shape"], meta["latent_dim"], meta["hidden"])
        for i, layer in enumerate(model.layers):
            layer.W[...] = tensors[f"{i}.W"]
            layer.b[...] = tensors[f"{i}.b"]
        return model


def encode(model: EncoderModel, window: ImuWindow) -> EmbeddingDistribution:
    mu, var = model.encode_batch(np.asarray(window.samples)[None])
    return EmbeddingDistribution(mu[0], var[0])


def sample_batch(labels, config: MetricConfig, rng):
    """Indices of a P-classes x S-samples batch."""
    classes = np.unique(labels)
    p = min(config.classes_per_batch, len(classes))
    chosen = rng.choice(classes, size=p, replace=False)
    out = []
    for c in np.sort(chosen):
        pool = np.flatnonzero(labels == c)
        out.append(rng.choice(pool, size=config.samples_per_class,
                              replace=len(pool) < config.samples_per_class))
    return np.concatenate(out)


@dataclass
class EncoderTrainResult:
    model: EncoderModel
    trace: list = field(default_factory=list)


def train_encoder(dataset: DatasetSplit | WindowSet, config: MetricConfig | None = None,
                  epochs: int = 30, seed: int = 0, latent_dim: int = 16,
                  hidden=(128, 64), lr: float = 1e-3) -> EncoderTrainResult:
    """Train on the known training windows; deterministic for a given seed."""
    config = config or MetricConfig()
    train = dataset.train if isinstance(dataset, DatasetSplit) else dataset
    rng = np.random.default_rng(seed)
    model = EncoderModel(train.x.shape[1:], latent_dim, hidden, rng)
    opt = Adam(lr=lr)
    params, _ = collect(model.layers)
    batch = config.classes_per_batch * config.samples_per_class
    n_batches = max(1, len(train) // batch)
    trace = []
    for epoch in range(1, epochs + 1):
        sums = {"recon": 0.0, "kl": 0.0, "metric": 0.0, "total": 0.0}
        for _ in range(n_batches):
            idx = sample_batch(train.y, config, rng)
            noise = rng.standard_normal((len(idx), latent_dim))
            parts = model.loss_and_grad(train.x[idx], train.y[idx], noise, config)
            _, grads = collect(model.layers)
            opt.step(params, grads)
            for k in sums:
                sums[k] += parts[k] / n_batches
        trace.append({"epoch": epoch, **sums})
    return EncoderTrainResult(model, trace)


def write_trace_csv(path, trace):
    keys = ("epoch", "recon", "kl", "metric", "total")
    lines = [",".join(keys)]
    for row in trace:
        lines.append(",".join(str(row["epoch"]) if k == "epoch" else f"{row[k]:.10g}" for k in keys))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

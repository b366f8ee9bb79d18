"""Small reverse-mode network substrate.

Layers cache their forward inputs and expose ``backward(grad_out)``, which
fills ``.grads`` (same keys as ``.params``) and returns the gradient with
respect to the layer input. There is no general graph engine; models chain
layers explicitly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


class NumericalError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _activate(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, a, g):
    if name == "identity":
        return g
    if name == "relu":
        return g * (z > 0)
    return g * (1.0 - a * a)


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {where}")


class DenseLayer:
    """activation(x W^T + b) on a vector or a batch of row vectors."""

    def __init__(self, weights, bias, activation="identity"):
        self.W = np.array(weights, dtype=np.float64)
        self.b = np.array(bias, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent shapes W{self.W.shape} b{self.b.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.grads = {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b)}
        self._cache = None

    @classmethod
    def init(cls, n_in, n_out, activation, rng):
        scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        return cls(rng.normal(0.0, scale, (n_out, n_in)), np.zeros(n_out), activation)

    @property
    def params(self):
        return {"W": self.W, "b": self.b}

    @property
    def shape(self):
        return self.W.shape

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W.shape[1]:
            raise ShapeError(f"input dim {x.shape[-1]} != layer input {self.W.shape[1]}")
        z = x @ self.W.T + self.b
        a = _activate(self.activation, z)
        self._cache = (x, z, a)
        return a

    def backward(self, grad_out, name="dense"):
        x, z, a = self._cache
        gz = _activation_grad(self.activation, z, a, grad_out)
        _check_finite(gz, name)
        x2 = np.atleast_2d(x)
        gz2 = np.atleast_2d(gz)
        self.grads["W"] = gz2.T @ x2
        self.grads["b"] = gz2.sum(axis=0)
        return gz @ self.W


def forward_deterministic(layer: DenseLayer, x):
    return layer.forward(x)


@dataclass
class GaussianPosterior:
    """Factorised Gaussian over a tensor, sigma = softplus(rho)."""
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.rho = np.array(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ShapeError("mu and rho must share a shape")

    @property
    def sigma(self):
        return softplus(self.rho)

    @property
    def shape(self):
        return self.mu.shape


def sample_weights(posterior: GaussianPosterior, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.mu.shape:
        raise ShapeError("noise shape must match the posterior")
    return posterior.mu + posterior.sigma * noise


def sample_weights_grad(posterior: GaussianPosterior, noise, grad_w):
    """Chain rule through the reparameterised sample: (d/dmu, d/drho)."""
    return grad_w, grad_w * noise * sigmoid(posterior.rho)


def kl_gaussian_to_prior(posterior: GaussianPosterior, prior_sigma=1.0):
    """KL(q || N(0, prior_sigma^2)) summed over all elements."""
    if not prior_sigma > 0:
        raise ValueError("prior_sigma must be positive")
    s = posterior.sigma
    mu = posterior.mu
    v = np.log(prior_sigma / s) + (s * s + mu * mu) / (2.0 * prior_sigma ** 2) - 0.5
    return float(np.sum(v))


def kl_gaussian_to_prior_grad(posterior: GaussianPosterior, prior_sigma=1.0):
    s = posterior.sigma
    p2 = prior_sigma ** 2
    g_mu = posterior.mu / p2
    g_rho = (-1.0 / s + s / p2) * sigmoid(posterior.rho)
    return g_mu, g_rho


class BayesianDenseLayer:
    """Dense layer whose weights and biases are Gaussian posteriors."""

    def __init__(self, weight_posterior, bias_posterior, prior_sigma=1.0, activation="identity"):
        if not prior_sigma > 0:
            raise ValueError("prior sigma must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.wq = weight_posterior
        self.bq = bias_posterior
        if self.wq.mu.ndim != 2 or self.bq.mu.shape != (self.wq.mu.shape[0],):
            raise ShapeError("inconsistent posterior shapes")
        self.prior_sigma = float(prior_sigma)
        self.activation = activation
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @classmethod
    def init(cls, n_in, n_out, activation, rng, prior_sigma=1.0, rho_init=-5.0):
        scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(1.0 / n_in)
        wq = GaussianPosterior(rng.normal(0.0, scale, (n_out, n_in)),
                               np.full((n_out, n_in), rho_init))
        bq = GaussianPosterior(np.zeros(n_out), np.full(n_out, rho_init))
        return cls(wq, bq, prior_sigma, activation)

    @property
    def params(self):
        return {"w_mu": self.wq.mu, "w_rho": self.wq.rho,
                "b_mu": self.bq.mu, "b_rho": self.bq.rho}

    @property
    def shape(self):
        return self.wq.shape

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def draw_noise(self, rng):
        return rng.standard_normal(self.wq.shape), rng.standard_normal(self.bq.shape)

    def forward(self, x, noise):
        eps_w, eps_b = noise
        W = sample_weights(self.wq, eps_w)
        b = sample_weights(self.bq, eps_b)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != W.shape[1]:
            raise ShapeError(f"input dim {x.shape[-1]} != layer input {W.shape[1]}")
        z = x @ W.T + b
        a = _activate(self.activation, z)
        self._cache = (x, z, a, W, eps_w, eps_b)
        return a

    def backward(self, grad_out, name="bayes-dense"):
        x, z, a, W, eps_w, eps_b = self._cache
        gz = _activation_grad(self.activation, z, a, grad_out)
        _check_finite(gz, name)
        x2, gz2 = np.atleast_2d(x), np.atleast_2d(gz)
        gW = gz2.T @ x2
        gb = gz2.sum(axis=0)
        self.grads["w_mu"], self.grads["w_rho"] = sample_weights_grad(self.wq, eps_w, gW)
        self.grads["b_mu"], self.grads["b_rho"] = sample_weights_grad(self.bq, eps_b, gb)
        return gz @ W

    def kl(self):
        return (kl_gaussian_to_prior(self.wq, self.prior_sigma)
                + kl_gaussian_to_prior(self.bq, self.prior_sigma))

    def add_kl_grad(self, scale):
        gwm, gwr = kl_gaussian_to_prior_grad(self.wq, self.prior_sigma)
        gbm, gbr = kl_gaussian_to_prior_grad(self.bq, self.prior_sigma)
        self.grads["w_mu"] = self.grads["w_mu"] + scale * gwm
        self.grads["w_rho"] = self.grads["w_rho"] + scale * gwr
        self.grads["b_mu"] = self.grads["b_mu"] + scale * gbm
        self.grads["b_rho"] = self.grads["b_rho"] + scale * gbr


def backward(layers, grad_out):
    """Propagate ``grad_out`` through ``layers`` in reverse order.

    Each layer must have run ``forward`` since the last parameter change.
    Returns the gradient with respect to the network input.
    """
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        g = layers[i].backward(g, name=f"layer {i} ({type(layers[i]).__name__})")
    return g


def collect(layers):
    """Flat (params, grads) lists, stable order, for the optimiser."""
    ps, gs = [], []
    for layer in layers:
        for k, v in layer.params.items():
            ps.append(v)
            gs.append(layer.grads[k])
    return ps, gs


@dataclass
class Adam:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """In-place Adam update of every array in ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m):
            raise ShapeError("parameter list changed between steps")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def optimizer_step(state: Adam, params, grads):
    return state.step(params, grads)


def numerical_gradient(f, params, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. arrays in ``params``.

    The arrays are perturbed in place and restored.
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(max|a|, max|n|, floor) over all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


# ---------------------------------------------------------------------------
# checkpoint format (all little-endian)
#   magic   b"BHARCKPT"
#   version uint16
#   kind    uint16 length + utf-8
#   meta    uint32 length + utf-8 JSON
#   count   uint32
#   per tensor: uint16 name length + utf-8 name, uint8 ndim, ndim x uint32 dims
#   then every tensor's float64 data, in header order, C-order
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"BHARCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, tensors: dict, meta: dict | None = None) -> None:
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    kind_b = kind.encode()
    head = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION),
            struct.pack("<H", len(kind_b)), kind_b,
            struct.pack("<I", len(meta_b)), meta_b,
            struct.pack("<I", len(tensors))]
    blocks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        head.append(struct.pack("<H", len(nb)) + nb)
        head.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        blocks.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(head) + b"".join(blocks))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (kind, tensors, meta)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 8
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<H", raw, off)
    off += 2
    kind = raw[off:off + n].decode()
    off += n
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    specs = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        specs.append((name, shape))
    tensors = {}
    for name, shape in specs:
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return kind, tensors, meta

"""Shapley attributions, class similarity and SHAP-driven compression.

Masked features take the background mean value, so every explanation is
the Shapley decomposition of ``v(S) = f(x_S, mean(background)_{not S})``.
KernelSHAP solves the Shapley-kernel weighted least-squares problem with
the efficiency constraint eliminated exactly (the last feature's
attribution is the residual), which makes it exact when all coalitions
are enumerated.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .bnn import FcBnnModel, accuracy, bnn_features, build_fcbnn, predict_fn, train_fcbnn

EXHAUSTIVE_LIMIT = 4096


class ShapError(ValueError):
    pass


@dataclass
class ShapExplanation:
    base_value: np.ndarray  # (K,)
    phi: np.ndarray  # (M, K)
    output: np.ndarray  # (K,) f(x)
    feature_names: list = field(default_factory=list)

    def efficiency_gap(self) -> float:
        return float(np.max(np.abs(self.phi.sum(axis=0) - (self.output - self.base_value))))


@dataclass
class CoalitionSample:
    mask: np.ndarray
    weight: float


def shapley_kernel_weight(M: int, s: int) -> float:
    if not 0 < s < M:
        raise ShapError(f"coalition size {s} of {M} is a constraint, not a weighted sample")
    return (M - 1) / (math.comb(M, s) * s * (M - s))


def _groups(n_columns, feature_groups):
    if feature_groups is None:
        return [np.array([i]) for i in range(n_columns)]
    return [np.atleast_1d(np.asarray(g, dtype=np.int64)) for g in feature_groups]


def _masked_inputs(x, reference, masks, groups):
    """Rows of x with features outside each mask replaced by ``reference``."""
    col_mask = np.zeros((masks.shape[0], x.shape[0]), dtype=bool)
    for j, g in enumerate(groups):
        col_mask[:, g] = masks[:, j:j + 1]
    return np.where(col_mask, x[None, :], reference[None, :])


def _eval(model_fn, rows):
    out = np.asarray(model_fn(rows), dtype=np.float64)
    return out.reshape(rows.shape[0], -1)


def all_coalitions(M: int) -> list[CoalitionSample]:
    """Every proper non-empty coalition with its Shapley-kernel weight."""
    out = []
    for s in range(1, M):
        w = shapley_kernel_weight(M, s)
        for combo in itertools.combinations(range(M), s):
            mask = np.zeros(M, dtype=bool)
            mask[list(combo)] = True
            out.append(CoalitionSample(mask, w))
    return out


def sample_coalitions(M: int, n: int, rng) -> list[CoalitionSample]:
    """Paired sampling; sizes drawn with probability proportional to kernel mass.

    With that size distribution and uniform subsets within a size, each
    sampled coalition carries unit weight.
    """
    sizes = np.arange(1, M)
    p = (M - 1) / (sizes * (M - sizes))
    p = p / p.sum()
    out = []
    for _ in range(max(1, n // 2)):
        s = rng.choice(sizes, p=p)
        mask = np.zeros(M, dtype=bool)
        mask[rng.choice(M, size=s, replace=False)] = True
        out.append(CoalitionSample(mask, 1.0))
        out.append(CoalitionSample(~mask, 1.0))
    return out


def kernel_shap(model_fn, x, background, n_coalitions: int = 2048, feature_groups=None,
                feature_names=None, seed=0) -> ShapExplanation:
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if background.shape[0] == 0:
        raise ShapError("background must not be empty")
    reference = background.mean(axis=0)
    groups = _groups(x.shape[0], feature_groups)
    M = len(groups)
    if M < 1:
        raise ShapError("need at least one feature")
    ends = _eval(model_fn, np.stack([reference, x]))
    base, fx = ends[0], ends[1]
    delta = fx - base
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(M)]
    if M == 1:
        return ShapExplanation(base, delta[None, :], fx, names)

    if 2 ** M <= EXHAUSTIVE_LIMIT:
        coalitions = all_coalitions(M)
    else:
        coalitions = sample_coalitions(M, n_coalitions, np.random.default_rng(seed))
    Z = np.array([c.mask for c in coalitions], dtype=np.float64)
    w = np.array([c.weight for c in coalitions])
    y = _eval(model_fn, _masked_inputs(x, reference, Z.astype(bool), groups)) - base

    # efficiency: phi_M = delta - sum(phi_<M)
    A = Z[:, :-1] - Z[:, -1:]
    t = y - Z[:, -1:] * delta[None, :]
    sw = np.sqrt(w)[:, None]
    A_w, t_w = A * sw, t * sw
    sol, _, rank, _ = np.linalg.lstsq(A_w, t_w, rcond=None)
    if rank < M - 1:
        # ridge jitter for coalition sets that do not span all features
        reg = 1e-10 * np.eye(M - 1)
        try:
            sol = np.linalg.solve(A_w.T @ A_w + reg, A_w.T @ t_w)
        except np.linalg.LinAlgError as exc:
            raise ShapError("degenerate coalition regression") from exc
        if not np.all(np.isfinite(sol)):
            raise ShapError("degenerate coalition regression")
    phi = np.vstack([sol, delta[None, :] - sol.sum(axis=0, keepdims=True)])
    return ShapExplanation(base, phi, fx, names)


def exact_shapley(model_fn, x, background, feature_groups=None) -> np.ndarray:
    """Brute-force Shapley values over all 2^M coalitions; (M, K)."""
    x = np.asarray(x, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    reference = background.mean(axis=0)
    groups = _groups(x.shape[0], feature_groups)
    M = len(groups)
    if M > 12:
        raise ShapError("exact enumeration is limited to M <= 12")
    codes = np.arange(2 ** M)
    masks = ((codes[:, None] >> np.arange(M)[None, :]) & 1).astype(bool)
    v = _eval(model_fn, _masked_inputs(x, reference, masks, groups))
    sizes = masks.sum(axis=1)
    fact = [math.factorial(k) for k in range(M + 1)]
    phi = np.zeros((M, v.shape[1]))
    for i in range(M):
        without = codes[~masks[:, i]]
        with_i = without | (1 << i)
        s = sizes[without]
        wts = np.array([fact[k] * fact[M - k - 1] for k in s], dtype=np.float64) / fact[M]
        phi[i] = (wts[:, None] * (v[with_i] - v[without])).sum(axis=0)
    return phi


def pearson(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.size < 2:
        raise ValueError("pearson needs two equal-length vectors with n >= 2")
    du, dv = u - u.mean(), v - v.mean()
    nu, nv = np.linalg.norm(du), np.linalg.norm(dv)
    if nu == 0 or nv == 0:
        raise ValueError("pearson is undefined for a constant vector")
    return float(np.clip(du @ dv / (nu * nv), -1.0, 1.0))


@dataclass
class SimilarityMatrix:
    mode: str
    r: np.ndarray  # one coefficient per known class

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.r))


def class_similarity(known_means, unknown_mean, mode="tracked") -> SimilarityMatrix:
    known_means = np.atleast_2d(known_means)
    return SimilarityMatrix(mode, np.array([pearson(unknown_mean, k) for k in known_means]))


def class_means(embeddings, labels, n_classes):
    return np.array([embeddings[labels == k].mean(axis=0) for k in range(n_classes)])


def global_shap_summary(explanations, feature_values=None):
    """Ranking by mean |phi| plus beeswarm and force-plot rows.

    ``mean_abs`` averages |phi| over explanations and classes. Force rows
    use each explanation's argmax class.
    """
    phis = np.stack([e.phi for e in explanations])  # (N, M, K)
    mean_abs = np.abs(phis).mean(axis=(0, 2))
    ranking = np.argsort(-mean_abs, kind="stable")
    names = explanations[0].feature_names
    beeswarm = []
    force = []
    for n, e in enumerate(explanations):
        k = int(np.argmax(e.output))
        for i in range(phis.shape[1]):
            val = float(feature_values[n][i]) if feature_values is not None else float("nan")
            beeswarm.append({"input": n, "feature": names[i], "value": val,
                             "phi": float(e.phi[i, k]), "class": k})
        force.append({"input": n, "class": k, "base_value": float(e.base_value[k]),
                      "contributions": e.phi[:, k].tolist(), "output": float(e.output[k])})
    return {"mean_abs": mean_abs, "ranking": ranking, "feature_names": names,
            "beeswarm": beeswarm, "force": force}


def explain_fcbnn(model: FcBnnModel, means, variances, background_means, background_vars,
                  T=50, seed=0, n_coalitions=1024, feature_names=None):
    """One explanation per row; each latent dimension (mean and variance) is a feature."""
    d = means.shape[1]
    f = predict_fn(model, T=T, seed=seed)
    bg = bnn_features(background_means, background_vars)
    X = bnn_features(means, variances)
    groups = [[i, i + d] for i in range(d)]
    names = feature_names or [f"z{i}" for i in range(d)]
    return [kernel_shap(f, X[n], bg, n_coalitions, groups, names, seed=seed + n)
            for n in range(len(X))]


def write_explanations_csv(path, explanations, input_ids=None, feature_values=None):
    with open(path, "w") as fh:
        fh.write("input_id,class,feature,value,phi\n")
        for n, e in enumerate(explanations):
            iid = input_ids[n] if input_ids is not None else n
            for i, name in enumerate(e.feature_names):
                val = feature_values[n][i] if feature_values is not None else float("nan")
                for k in range(e.phi.shape[1]):
                    fh.write(f"{iid},{k},{name},{val:.10g},{e.phi[i, k]:.10g}\n")


# ---------------------------------------------------------------------------
# closed-loop compression
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingData:
    """Embedding (mean, variance) arrays with labels for the three known splits."""
    train: tuple
    validation: tuple
    test: tuple

    @property
    def latent_dim(self):
        return self.train[0].shape[1]


@dataclass
class CompressionConfig:
    keep_fraction: float = 0.2
    tolerance: float = 0.02
    min_width: int = 4
    n_explain: int = 48
    n_coalitions: int = 1024
    shap_T: int = 50
    eval_T: int = 100
    epochs: int = 100
    lr: float = 1e-2
    prior_sigma: float = 1.0
    seed: int = 0


@dataclass
class CompressionIteration:
    kept: list
    hidden: list
    param_count: int
    val_accuracy: float
    test_accuracy: float
    accepted: bool
    shap_mean_abs: list = field(default_factory=list)


@dataclass
class CompressionReport:
    iterations: list
    stop_reason: str
    baseline_val_accuracy: float
    final_kept: list = field(default_factory=list)
    final_model: FcBnnModel | None = None

    @property
    def final(self) -> CompressionIteration:
        return [it for it in self.iterations if it.accepted][-1]

    def to_dict(self):
        return {"stop_reason": self.stop_reason,
                "baseline_val_accuracy": self.baseline_val_accuracy,
                "final_kept": list(self.final_kept),
                "iterations": [{"kept": it.kept, "hidden": it.hidden,
                                "param_count": it.param_count,
                                "val_accuracy": it.val_accuracy,
                                "test_accuracy": it.test_accuracy,
                                "accepted": it.accepted,
                                "shap_mean_abs": it.shap_mean_abs} for it in self.iterations]}


def _features(split, keep):
    m, v, _ = split
    return bnn_features(m[:, keep], v[:, keep])


def compress_loop(data: EmbeddingData, baseline: FcBnnModel, config: CompressionConfig | None = None,
                  kept=None) -> CompressionReport:
    """Drop latent features whose global SHAP importance falls below
    ``keep_fraction * max``, shrink the hidden widths in proportion, retrain,
    and repeat while validation accuracy stays within ``tolerance`` of the
    baseline.
    """
    cfg = config or CompressionConfig()
    rng = np.random.default_rng(cfg.seed)
    keep = np.arange(data.latent_dim) if kept is None else np.asarray(kept)
    model = baseline
    K = model.n_classes
    val_y, test_y = data.validation[2], data.test[2]

    def acc(m, keep_, split, y):
        return accuracy(m, _features(split, keep_), y, cfg.eval_T, seed=int(rng.integers(2**32)))

    base_val = acc(model, keep, data.validation, val_y)
    its = [CompressionIteration(keep.tolist(), list(model.hidden), model.n_params(), base_val,
                                acc(model, keep, data.test, test_y), True)]
    stop = "iteration limit"
    n_val = len(val_y)
    for _ in range(data.latent_dim):
        pick = np.sort(rng.choice(n_val, size=min(cfg.n_explain, n_val), replace=False))
        vm, vv, _ = data.validation
        tm, tv, _ = data.train
        expl = explain_fcbnn(model, vm[pick][:, keep], vv[pick][:, keep], tm[:, keep], tv[:, keep],
                             T=cfg.shap_T, seed=int(rng.integers(2**31)),
                             n_coalitions=cfg.n_coalitions)
        imp = global_shap_summary(expl)["mean_abs"]
        its[-1].shap_mean_abs = imp.tolist()
        threshold = cfg.keep_fraction * imp.max()
        new_keep = keep[imp >= threshold]
        if len(new_keep) == 0:
            stop = "would drop all features"
            break
        if len(new_keep) == len(keep):
            stop = "all features above threshold"
            break
        ratio = len(new_keep) / len(keep)
        hidden = [max(cfg.min_width, int(round(h * ratio))) for h in model.hidden]
        cand = build_fcbnn(len(new_keep), K, hidden, rng, cfg.prior_sigma)
        train_fcbnn(cand, _features(data.train, new_keep), data.train[2], epochs=cfg.epochs,
                    seed=int(rng.integers(2**31)), lr=cfg.lr)
        val = acc(cand, new_keep, data.validation, val_y)
        ok = val >= base_val - cfg.tolerance
        its.append(CompressionIteration(new_keep.tolist(), hidden, cand.n_params(), val,
                                        acc(cand, new_keep, data.test, test_y), ok))
        if not ok:
            stop = "validation accuracy dropped"
            break
        keep, model = new_keep, cand
    return CompressionReport(its, stop, base_val, keep.tolist(), model)

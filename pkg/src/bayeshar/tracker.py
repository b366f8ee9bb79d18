"""Kalman tracking of embedding distributions.

The encoder mean is the measurement and its variance the (diagonal)
measurement noise. State dynamics are a random walk (F = I, H = I,
Q = q I). A single track per stream is kept, gated by the Mahalanobis
distance, and re-initialised after ``max_misses`` consecutive rejections.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from statistics import NormalDist

import numpy as np

from .encoder import EmbeddingDistribution

JITTER = 1e-9


class CovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class KalmanConfig:
    process_noise_q: float = 1e-3
    gate_prob: float = 0.99
    init_variance: float = 1.0
    max_misses: int = 5

    def __post_init__(self):
        if self.process_noise_q < 0:
            raise ValueError("process_noise_q must be >= 0")
        if not 0.0 < self.gate_prob < 1.0:
            raise ValueError("gate_prob must lie in (0, 1)")
        if not self.init_variance > 0:
            raise ValueError("init_variance must be positive")
        if self.max_misses < 1:
            raise ValueError("max_misses must be >= 1")


@dataclass(frozen=True)
class TrackState:
    x: np.ndarray
    P: np.ndarray
    age: int = 0
    misses: int = 0

    @property
    def dim(self):
        return self.x.shape[0]

    def as_distribution(self) -> EmbeddingDistribution:
        return EmbeddingDistribution(self.x.copy(), np.diag(self.P).copy())


def init_track(meas: EmbeddingDistribution, config: KalmanConfig) -> TrackState:
    d = meas.dim
    return TrackState(meas.mean.copy(), config.init_variance * np.eye(d))


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _cholesky(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.cholesky(S + JITTER * np.eye(S.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise CovarianceError("innovation covariance is not positive definite") from exc


def predict(track: TrackState, config: KalmanConfig) -> TrackState:
    P = _symmetrize(track.P + config.process_noise_q * np.eye(track.dim))
    return replace(track, P=P, age=track.age + 1)


def innovation_covariance(track: TrackState, meas: EmbeddingDistribution):
    if meas.dim != track.dim:
        raise ValueError(f"measurement dim {meas.dim} != state dim {track.dim}")
    return track.P + np.diag(meas.variance)


def mahalanobis(track: TrackState, meas: EmbeddingDistribution) -> float:
    L = _cholesky(innovation_covariance(track, meas))
    r = np.linalg.solve(L, meas.mean - track.x)
    return float(np.sqrt(r @ r))


def chi2_quantile(prob: float, dof: int) -> float:
    """Wilson-Hilferty approximation of the chi-square quantile."""
    z = NormalDist().inv_cdf(prob)
    h = 2.0 / (9.0 * dof)
    return float(dof * (1.0 - h + z * np.sqrt(h)) ** 3)


def gate(distance: float, d: int, gate_prob: float) -> bool:
    return bool(distance ** 2 <= chi2_quantile(gate_prob, d))


def update(track: TrackState, meas: EmbeddingDistribution) -> TrackState:
    S = innovation_covariance(track, meas)
    _cholesky(S)  # raises if S is not positive definite
    # K = P S^-1  ->  K^T = S^-1 P  (S, P symmetric); one LU solve keeps
    # simple cases exact where two triangular solves through sqrt(S) would not
    K = np.linalg.solve(S, track.P).T
    x = track.x + K @ (meas.mean - track.x)
    P = _symmetrize((np.eye(track.dim) - K) @ track.P)
    return replace(track, x=x, P=P, misses=0)


@dataclass(frozen=True)
class TraceRow:
    step: int
    accepted: bool
    mahalanobis: float
    trace_p: float


def track_stream(embeddings, config: KalmanConfig | None = None, trace: list | None = None):
    """Tracked distributions, one per input measurement.

    Pass a list as ``trace`` to collect per-step ``TraceRow`` records.
    """
    config = config or KalmanConfig()
    out = []
    track = None
    for step, meas in enumerate(embeddings):
        if track is None:
            track = init_track(meas, config)
            out.append(track.as_distribution())
            if trace is not None:
                trace.append(TraceRow(step, True, 0.0, float(np.trace(track.P))))
            continue
        track = predict(track, config)
        dist = mahalanobis(track, meas)
        accepted = gate(dist, meas.dim, config.gate_prob)
        if accepted:
            track = update(track, meas)
        else:
            track = replace(track, misses=track.misses + 1)
            if track.misses >= config.max_misses:
                track = init_track(meas, config)
        out.append(track.as_distribution())
        if trace is not None:
            trace.append(TraceRow(step, accepted, dist, float(np.trace(track.P))))
    return out


def track_arrays(means, variances, config: KalmanConfig | None = None):
    """Array front-end of ``track_stream``: (N, d) in, (N, d) means and variances out."""
    meas = [EmbeddingDistribution(m, v) for m, v in zip(means, variances)]
    tracked = track_stream(meas, config)
    if not tracked:
        d = np.shape(means)[-1] if np.ndim(means) == 2 else 0
        return np.zeros((0, d)), np.zeros((0, d))
    return np.array([t.mean for t in tracked]), np.array([t.variance for t in tracked])


def write_trace_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("step,accepted,mahalanobis,trace_p\n")
        for r in rows:
            fh.write(f"{r.step},{int(r.accepted)},{r.mahalanobis:.10g},{r.trace_p:.10g}\n")

"""IMU series, preprocessing, synthetic activity data and dataset I/O.

The synthetic generator stands in for a recorded dataset: every activity
class is a continuous 6-channel recording (3 accelerometer + 3 gyroscope
axes) built from a class-specific sinusoid mixture plus Gaussian noise.
Each recording is high-pass filtered, cut into overlapping windows and each
window is z-scored per channel.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import _kernels

N_CHANNELS = 6
UNKNOWN = -1
ZSCORE_EPS = 1e-9
GRAVITY = 9.81

ACTIVITY_NAMES = ("idle", "jump", "sit", "squat", "stairs", "stand", "walk", "kick")

# split proportions of the known windows (train / validation / test)
SPLIT_RATIOS = (0.52, 0.23, 0.25)


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ImuSeries:
    samples: np.ndarray  # (6, T)
    sample_rate_hz: float = 100.0

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != N_CHANNELS or s.shape[1] < 1:
            raise InvalidParameterError(f"expected (6, T>=1) samples, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise InvalidParameterError("series contains non-finite values")
        if not self.sample_rate_hz > 0:
            raise InvalidParameterError("sample_rate_hz must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ImuWindow:
    samples: np.ndarray  # (6, W)
    label: int | None = None
    window_id: int = -1
    segment: int = -1


@dataclass(frozen=True)
class FilterCoefficients:
    b: np.ndarray
    a: np.ndarray

    @property
    def order(self) -> int:
        return len(self.a) - 1

    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freq_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response H(e^{jw}) at the given frequencies."""
        w = 2.0 * np.pi * np.atleast_1d(np.asarray(freq_hz, dtype=np.float64)) / sample_rate_hz
        zinv = np.exp(-1j * w)
        num = np.polyval(self.b[::-1], zinv)
        den = np.polyval(self.a[::-1], zinv)
        return num / den


def design_butterworth(order: int = 3, corner_hz: float = 0.3,
                       sample_rate_hz: float = 100.0) -> FilterCoefficients:
    """Digital high-pass Butterworth via the bilinear transform.

    The analog corner is pre-warped so the -3 dB point lands exactly on
    ``corner_hz`` after discretisation. Pass-band gain (at Nyquist) is 1.
    """
    if order != 3:
        raise InvalidParameterError("only third-order designs are supported")
    nyq = sample_rate_hz / 2.0
    if not (0.0 < corner_hz < nyq):
        raise InvalidParameterError(
            f"corner {corner_hz} Hz must lie strictly inside (0, {nyq}) Hz")
    fs2 = 2.0 * sample_rate_hz
    wc = fs2 * np.tan(np.pi * corner_hz / sample_rate_hz)
    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # low-pass prototype -> high-pass: s -> wc / s; zeros all at s = 0
    analog_poles = wc / proto
    z_poles = (fs2 + analog_poles) / (fs2 - analog_poles)
    a = np.real(np.poly(z_poles))
    b = np.real(np.poly(np.ones(order)))
    # unit gain at Nyquist, z = -1
    gain = np.abs(np.polyval(a, -1.0) / np.polyval(b, -1.0))
    b = b * gain
    return FilterCoefficients(b=b, a=a)


def apply_filter(coeffs: FilterCoefficients, series: ImuSeries) -> ImuSeries:
    """Causal per-channel filtering from zero initial state."""
    if not coeffs.is_stable():
        raise InvalidParameterError("unstable filter coefficients")
    y = _kernels.iir_filter(coeffs.b, coeffs.a, series.samples)
    return ImuSeries(y, series.sample_rate_hz)


def zscore(samples: np.ndarray) -> np.ndarray:
    """Per-channel z-score along the last axis, population std."""
    x = np.asarray(samples, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    safe = np.where(std < ZSCORE_EPS, 1.0, std)
    return np.where(std < ZSCORE_EPS, 0.0, (x - mean) / safe)


def zscore_normalize(window: ImuWindow) -> ImuWindow:
    if window.samples.shape[-1] < 2:
        raise InvalidParameterError("z-score needs at least two samples")
    return ImuWindow(zscore(window.samples), window.label, window.window_id, window.segment)


def window_stream(series: ImuSeries, length: int, hop: int, label: int | None = None,
                  segment: int = -1) -> list[ImuWindow]:
    if hop < 1:
        raise InvalidParameterError("hop must be >= 1")
    T = series.length
    if length > T or length < 1:
        return []
    count = (T - length) // hop + 1
    return [ImuWindow(series.samples[:, i * hop:i * hop + length].copy(), label,
                      window_id=i, segment=segment)
            for i in range(count)]


@dataclass
class ClassSignal:
    """Signal recipe for one activity class."""
    freq_hz: float
    amplitude: list[float]  # per channel
    phase: list[float]  # per-channel phase offset, radians
    harmonics: list[float]  # weights of the 2nd and 3rd harmonic
    noise_std: float = 0.2
    freq_jitter: float = 0.02  # relative random-walk drift of the fundamental


def default_classes() -> list[ClassSignal]:
    """Eight activity recipes; class 7 ("kick") is an unknown near class 1."""
    def c(f, amp, ph, h, noise=0.25):
        return ClassSignal(f, list(amp), list(ph), list(h), noise)
    return [
        c(0.8, [0.3, 0.2, 0.2, 0.05, 0.05, 0.03], [0.0, 1.6, 3.1, 0.4, 2.2, 4.0], [0.1, 0.0], 0.04),
        c(2.2, [1.0, 0.8, 3.0, 0.6, 0.4, 0.3], [0.0, 0.0, 0.3, 1.5, 1.6, 3.0], [0.6, 0.2]),
        c(1.4, [0.4, 1.0, 0.6, 0.3, 0.8, 0.2], [0.0, 2.5, 5.0, 1.2, 3.7, 0.6], [0.0, 0.3], 0.1),
        c(0.6, [0.5, 0.4, 2.0, 0.8, 0.2, 0.2], [0.0, 3.1, 0.2, 4.5, 1.0, 2.0], [0.3, 0.0], 0.1),
        c(1.7, [1.2, 0.6, 1.5, 0.4, 0.9, 0.5], [0.0, 4.0, 2.0, 5.5, 0.8, 3.3], [0.2, 0.4]),
        c(1.15, [0.2, 0.3, 0.1, 0.1, 0.1, 0.2], [0.0, 5.2, 1.1, 2.7, 4.4, 0.9], [0.5, 0.4], 0.02),
        c(2.8, [2.0, 1.0, 1.5, 0.7, 1.2, 0.9], [0.0, 1.0, 2.0, 3.0, 4.0, 5.0], [0.3, 0.1]),
        # near class 1 in (frequency, amplitude); harmonic mix and gyro
        # phases differ
        c(2.5, [1.0, 0.8, 3.0, 0.6, 0.4, 0.3], [0.0, 1.5, 0.3, 3.8, 0.4, 4.4], [0.0, 0.8]),
    ]


@dataclass
class SyntheticSpec:
    classes: list[ClassSignal] = field(default_factory=default_classes)
    unknown_class: int | None = 7
    window_length: int = 128
    hop: int = 64
    windows_per_class: int = 200
    sample_rate_hz: float = 100.0
    corner_hz: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        n = len(self.classes)
        if n < 2:
            raise InvalidParameterError("need at least two classes")
        if self.unknown_class is not None and not 0 <= self.unknown_class < n:
            raise InvalidParameterError("unknown_class out of range")
        if n - (self.unknown_class is not None) < 2:
            raise InvalidParameterError("need at least two known classes")
        for c in self.classes:
            if c.noise_std < 0:
                raise InvalidParameterError("noise std must be >= 0")
            if len(c.amplitude) != N_CHANNELS or len(c.phase) != N_CHANNELS:
                raise InvalidParameterError("amplitude/phase need one entry per channel")
        keys = [(c.freq_hz, tuple(c.amplitude)) for c in self.classes]
        if len(set(keys)) != len(keys):
            raise InvalidParameterError("classes must differ in (frequency, amplitude)")
        if self.window_length < 2 or self.hop < 1 or self.windows_per_class < 1:
            raise InvalidParameterError("bad windowing parameters")

    @property
    def known_classes(self) -> list[int]:
        return [k for k in range(len(self.classes)) if k != self.unknown_class]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        allowed = set(cls.__dataclass_fields__)
        extra = set(d) - allowed
        if extra:
            raise InvalidParameterError(f"unknown synthetic spec keys: {sorted(extra)}")
        if "classes" in d:
            d["classes"] = [ClassSignal(**c) for c in d["classes"]]
        spec = cls(**d)
        spec.validate()
        return spec

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class WindowSet:
    """A bag of equally sized windows stored as stacked arrays.

    ``segment`` identifies the source recording; within a segment windows
    are in temporal order.
    """
    x: np.ndarray  # (N, 6, W)
    y: np.ndarray  # (N,), UNKNOWN for unlabelled / held-out
    ids: np.ndarray  # (N,) global window ids
    segment: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.y)

    def windows(self) -> Iterator[ImuWindow]:
        for i in range(len(self)):
            lab = int(self.y[i])
            yield ImuWindow(self.x[i], lab, int(self.ids[i]), int(self.segment[i]))

    def segments(self) -> list[np.ndarray]:
        """Index arrays of each recording, in order of first appearance."""
        out = []
        _, first = np.unique(self.segment, return_index=True)
        for seg in self.segment[np.sort(first)]:
            out.append(np.flatnonzero(self.segment == seg))
        return out

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.x[idx], self.y[idx], self.ids[idx], self.segment[idx])

    @staticmethod
    def empty(channels: int = N_CHANNELS, width: int = 0) -> "WindowSet":
        return WindowSet(np.zeros((0, channels, width)), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), np.zeros(0, np.int64))

    @staticmethod
    def concat(sets: Sequence["WindowSet"]) -> "WindowSet":
        return WindowSet(np.concatenate([s.x for s in sets]),
                         np.concatenate([s.y for s in sets]),
                         np.concatenate([s.ids for s in sets]),
                         np.concatenate([s.segment for s in sets]))


SPLIT_NAMES = ("train", "validation", "test", "unknown")


@dataclass(frozen=True)
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    unknown: WindowSet
    seed: int = 0
    n_classes: int = 7
    sample_rate_hz: float = 100.0

    def __getitem__(self, name: str) -> WindowSet:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def manifest(self) -> dict:
        m = {"seed": self.seed, "n_classes": self.n_classes,
             "sample_rate_hz": self.sample_rate_hz,
             "window_length": int(self.train.x.shape[-1]),
             "channels": int(self.train.x.shape[1])}
        for name in SPLIT_NAMES:
            m[f"count_{name}"] = len(self[name])
        return m


def synthesize_recording(sig: ClassSignal, n_samples: int, fs: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Raw (6, n) recording with gravity on the accel z axis."""
    t = np.arange(n_samples) / fs
    drift = np.cumsum(rng.normal(0.0, sig.freq_jitter / np.sqrt(fs), n_samples))
    drift = np.clip(drift, -3 * sig.freq_jitter, 3 * sig.freq_jitter)
    phase_t = 2 * np.pi * np.cumsum(sig.freq_hz * (1.0 + drift)) / fs
    phase_t = phase_t + rng.uniform(0, 2 * np.pi)
    out = np.empty((N_CHANNELS, n_samples))
    for c in range(N_CHANNELS):
        base = phase_t + sig.phase[c]
        s = np.sin(base)
        for h, w in enumerate(sig.harmonics, start=2):
            s = s + w * np.sin(h * base + 0.5 * c)
        out[c] = sig.amplitude[c] * s
    out += rng.normal(0.0, 1.0, out.shape) * sig.noise_std
    out[2] += GRAVITY
    return out


def generate_synthetic(spec: SyntheticSpec | None = None) -> DatasetSplit:
    """Deterministic synthetic dataset; one recording per class.

    Known classes are split contiguously in time (train, then validation,
    then test) so each split holds an ordered stream per class.
    """
    spec = spec or SyntheticSpec()
    spec.validate()
    fs = spec.sample_rate_hz
    coeffs = design_butterworth(3, spec.corner_hz, fs)
    warmup = int(round(10 * fs / spec.corner_hz))
    n_total = (spec.windows_per_class - 1) * spec.hop + spec.window_length
    ss = np.random.SeedSequence(spec.seed)
    child = ss.spawn(len(spec.classes))

    parts = {name: [] for name in SPLIT_NAMES}
    next_id = 0
    for k, sig in enumerate(spec.classes):
        rng = np.random.default_rng(child[k])
        raw = synthesize_recording(sig, warmup + n_total, fs, rng)
        filtered = _kernels.iir_filter(coeffs.b, coeffs.a, raw)[:, warmup:]
        count = spec.windows_per_class
        starts = np.arange(count) * spec.hop
        idx = starts[:, None] + np.arange(spec.window_length)[None, :]
        x = zscore(np.transpose(filtered[:, idx], (1, 0, 2)))
        ids = np.arange(next_id, next_id + count)
        next_id += count
        if k == spec.unknown_class:
            y = np.full(count, UNKNOWN, dtype=np.int64)
            parts["unknown"].append(WindowSet(x, y, ids, np.full(count, k)))
            continue
        label = spec.known_classes.index(k)
        y = np.full(count, label, dtype=np.int64)
        n_tr = int(round(SPLIT_RATIOS[0] * count))
        n_va = int(round(SPLIT_RATIOS[1] * count))
        bounds = [0, n_tr, n_tr + n_va, count]
        for name, lo, hi in zip(SPLIT_NAMES[:3], bounds[:-1], bounds[1:]):
            sl = slice(lo, hi)
            # one segment id per (class, split) stream
            parts[name].append(WindowSet(x[sl], y[sl], ids[sl],
                                         np.full(hi - lo, k * 4 + SPLIT_NAMES.index(name))))
    merged = {name: (WindowSet.concat(p) if p else WindowSet.empty(N_CHANNELS, spec.window_length))
              for name, p in parts.items()}
    return DatasetSplit(seed=spec.seed, n_classes=len(spec.known_classes),
                        sample_rate_hz=fs, **merged)


# ---------------------------------------------------------------------------
# on-disk formats
#
# manifest.txt   key = value lines
# <split>.csv    window_id,label,segment,channel,t,value  (long format)
# <split>.bin    little-endian:
#                  magic  b"BHARWIN1"           8 bytes
#                  N, C, W                      3 x uint32
#                  ids      N x int64
#                  labels   N x int64
#                  segments N x int64
#                  values   N*C*W x float64 (C-order, window-major)
# ---------------------------------------------------------------------------

BIN_MAGIC = b"BHARWIN1"


def write_manifest(path, items: dict) -> None:
    lines = [f"{k} = {v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        value = value.strip()
        for conv in (int, float):
            try:
                value = conv(value)
                break
            except ValueError:
                pass
        out[key.strip()] = value
    return out


def write_csv(path, ws: WindowSet) -> None:
    n, c, w = ws.x.shape
    with open(path, "w") as fh:
        fh.write("window_id,label,segment,channel,t,value\n")
        for i in range(n):
            head = f"{ws.ids[i]},{ws.y[i]},{ws.segment[i]},"
            for ch in range(c):
                fh.writelines(f"{head}{ch},{t},{float(ws.x[i, ch, t])!r}\n" for t in range(w))


def read_csv(path, channels: int = N_CHANNELS) -> WindowSet:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2,
                      dtype=[("id", "i8"), ("lab", "i8"), ("seg", "i8"),
                             ("ch", "i8"), ("t", "i8"), ("v", "f8")])
    if data.size == 0:
        return WindowSet.empty(channels, 0)
    data = data.ravel()
    ids, first = np.unique(data["id"], return_index=True)
    order = np.argsort(first)
    ids = ids[order]
    width = int(data["t"].max()) + 1
    pos = {wid: i for i, wid in enumerate(ids)}
    x = np.zeros((len(ids), channels, width))
    y = np.zeros(len(ids), np.int64)
    seg = np.zeros(len(ids), np.int64)
    rows = np.array([pos[v] for v in data["id"]])
    x[rows, data["ch"], data["t"]] = data["v"]
    y[rows] = data["lab"]
    seg[rows] = data["seg"]
    return WindowSet(x, y, ids.astype(np.int64), seg)


def write_binary(path, ws: WindowSet) -> None:
    n, c, w = ws.x.shape
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC)
        fh.write(struct.pack("<3I", n, c, w))
        for arr in (ws.ids, ws.y, ws.segment):
            fh.write(np.asarray(arr, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ws.x, dtype="<f8").tobytes())


def read_binary(path) -> WindowSet:
    raw = Path(path).read_bytes()
    if raw[:8] != BIN_MAGIC:
        raise InvalidParameterError(f"{path}: not a window file")
    n, c, w = struct.unpack_from("<3I", raw, 8)
    off = 20
    ints = []
    for _ in range(3):
        ints.append(np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64))
        off += 8 * n
    x = np.frombuffer(raw, dtype="<f8", count=n * c * w, offset=off).reshape(n, c, w)
    return WindowSet(x.astype(np.float64), ints[1], ints[0], ints[2])


def save_dataset(ds: DatasetSplit, directory, fmt: str = "bin") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = ds.manifest()
    manifest["format"] = fmt
    for name in SPLIT_NAMES:
        if fmt == "csv":
            write_csv(d / f"{name}.csv", ds[name])
        elif fmt == "bin":
            write_binary(d / f"{name}.bin", ds[name])
        else:
            raise InvalidParameterError(f"unknown dataset format {fmt!r}")
    write_manifest(d / "manifest.txt", manifest)
    return d


def load_dataset(directory) -> DatasetSplit:
    d = Path(directory)
    m = read_manifest(d / "manifest.txt")
    fmt = m.get("format", "bin")
    sets = {}
    for name in SPLIT_NAMES:
        if fmt == "csv":
            ws = read_csv(d / f"{name}.csv", int(m["channels"]))
            if len(ws) == 0:
                ws = WindowSet.empty(int(m["channels"]), int(m["window_length"]))
        else:
            ws = read_binary(d / f"{name}.bin")
        if len(ws) != m[f"count_{name}"]:
            raise InvalidParameterError(f"{name}: manifest count mismatch")
        sets[name] = ws
    return DatasetSplit(seed=int(m["seed"]), n_classes=int(m["n_classes"]),
                        sample_rate_hz=float(m["sample_rate_hz"]), **sets)


def generate_embedding_task(n_classes=4, latent_dim=16, informative=(2, 7, 11),
                            per_class=(120, 60, 60), separation=2.5, seed=0):
    """Embedding pairs where only ``informative`` dimensions carry class signal.

    Class centres are drawn on the informative dimensions; every other
    dimension is class-independent N(0, 1) noise. Variances are
    class-independent too. Returns {split: (means, variances, labels)}.
    """
    rng = np.random.default_rng(seed)
    informative = np.asarray(informative)
    centres = rng.normal(0.0, 1.0, (n_classes, len(informative)))
    centres *= separation / np.linalg.norm(centres, axis=1, keepdims=True).clip(1e-9)
    # centres spread on a sphere: every informative dimension matters
    out = {}
    for name, n in zip(("train", "validation", "test"), per_class):
        y = np.repeat(np.arange(n_classes), n)
        means = rng.normal(0.0, 1.0, (len(y), latent_dim))
        means[:, informative] = centres[y] + rng.normal(0.0, 0.5, (len(y), len(informative)))
        variances = rng.uniform(0.2, 1.0, (len(y), latent_dim))
        out[name] = (means, variances, y)
    return out

"""Sensor windows, statistical features, synthetic activity data and CSV I/O.

Channel order is fixed: ``triaxial_sensors`` groups of (x, y, z) first, then
the scalar sensors. The feature vector layout is

    [channel means | channel variances | triaxial jerk means | triaxial jerk variances]

which gives 22 + 22 + 18 + 18 = 80 features under the default layout.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensorLayout:
    triaxial_sensors: int = 6
    scalar_sensors: int = 4
    sample_rate: float = 120.0

    def __post_init__(self):
        if self.triaxial_sensors < 0 or self.scalar_sensors < 0 or self.channels < 1:
            raise DataError("layout needs at least one channel")
        if not self.sample_rate > 0:
            raise DataError("sample_rate must be positive")

    @property
    def channels(self):
        return 3 * self.triaxial_sensors + self.scalar_sensors

    @property
    def triaxial_channels(self):
        return 3 * self.triaxial_sensors

    @property
    def feature_count(self):
        return 2 * self.channels + 2 * self.triaxial_channels

    def feature_names(self):
        return [f"f{i}" for i in range(self.feature_count)]


@dataclass
class Window:
    values: np.ndarray  # window_len x channels
    label: object = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError("window must be a 2-D array (time x channels)")
        if not np.all(np.isfinite(self.values)):
            raise DataError("window contains non-finite values")


def window_stream(raw, window_len=120, stride=None, label=None):
    """Cut a ``T x channels`` stream into full windows; no padding."""
    raw = np.asarray(raw, dtype=np.float64)
    stride = window_len if stride is None else stride
    if window_len < 1 or stride < 1:
        raise DataError("window_len and stride must be positive")
    if raw.ndim != 2:
        raise DataError("stream must be a 2-D array (time x channels)")
    T = raw.shape[0]
    if T < window_len:
        raise DataError(f"stream of length {T} is shorter than one window ({window_len})")
    count = (T - window_len) // stride + 1
    return [Window(raw[s : s + window_len].copy(), label) for s in range(0, count * stride, stride)]


def extract_features(window, layout=SensorLayout()):
    values = window.values if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != layout.channels:
        raise DataError(f"window has {values.shape[-1]} channels, layout expects {layout.channels}")
    if values.shape[0] < 2 and layout.triaxial_channels:
        raise DataError("jerk features need at least two time steps")
    jerk = np.diff(values[:, : layout.triaxial_channels], axis=0) * layout.sample_rate
    return np.concatenate(
        [values.mean(axis=0), values.var(axis=0), jerk.mean(axis=0), jerk.var(axis=0)]
    )


def extract_feature_matrix(windows, layout=SensorLayout()):
    if not windows:
        return np.zeros((0, layout.feature_count)), np.zeros(0)
    X = np.vstack([extract_features(w, layout) for w in windows])
    y = np.asarray([w.label for w in windows])
    return X, y


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic activity generator.

    Each class perturbs a shared baseline (frequency, amplitude, offset,
    noise, drift per channel) by ``separability`` times a class-specific
    offset, so ``separability=0`` makes all classes identically distributed.
    """

    num_classes: int = 5
    per_class: int = 200
    separability: float = 1.0
    seed: int = 0
    layout: SensorLayout = field(default_factory=SensorLayout)
    window_len: int = 120
    jitter: float = 0.7

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("need at least two classes")
        if self.per_class < 1:
            raise DataError("per_class must be positive")
        if not 0.0 <= self.separability <= 1.0:
            raise DataError("separability must lie in [0, 1]")
        if self.window_len < 2:
            raise DataError("window_len must be at least 2")


def generate_synthetic(spec):
    """Seeded list of labelled windows (labels ``0..num_classes-1``)."""
    rng = np.random.default_rng(spec.seed)
    C = spec.layout.channels
    base_freq = rng.uniform(0.5, 3.0, C)
    base_amp = rng.uniform(0.5, 1.5, C)
    base_noise = rng.uniform(0.2, 0.4, C)
    s = spec.separability
    klass = []
    for _ in range(spec.num_classes):
        klass.append(
            dict(
                freq=base_freq * np.exp(s * rng.normal(0.0, 0.35, C)),
                amp=base_amp * np.exp(s * rng.normal(0.0, 0.35, C)),
                offset=s * rng.normal(0.0, 0.6, C),
                noise=base_noise * np.exp(s * rng.normal(0.0, 0.3, C)),
                drift=s * rng.normal(0.0, 0.3, C),
            )
        )
    t = np.arange(spec.window_len)[:, None] / spec.layout.sample_rate
    j = spec.jitter
    windows = []
    for label, p in enumerate(klass):
        for _ in range(spec.per_class):
            phase = rng.uniform(0.0, 2 * np.pi, C)
            amp = p["amp"] * np.exp(j * rng.normal(size=C))
            freq = p["freq"] * np.exp(0.5 * j * rng.normal(size=C))
            offset = p["offset"] + j * rng.normal(size=C)
            drift = p["drift"] + 0.5 * j * rng.normal(size=C)
            signal = offset + drift * t + amp * np.sin(2 * np.pi * freq * t + phase)
            signal = signal + p["noise"] * rng.normal(size=signal.shape)
            windows.append(Window(signal, label))
    return windows


def split_dataset(X, y, test_fraction=0.3, seed=0):
    """Stratified seeded split; returns ``(X_train, y_train), (X_test, y_test)``."""
    X = np.asarray(X)
    y = np.asarray(y)
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in sorted(set(y.tolist())):
        rows = np.flatnonzero(y == label)
        if len(rows) < 2:
            raise DataError(f"class {label!r} has fewer than 2 samples")
        rows = rows[rng.permutation(len(rows))]
        n_test = min(max(int(round(len(rows) * test_fraction)), 1), len(rows) - 1)
        test_idx.append(rows[:n_test])
        train_idx.append(rows[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return (X[tr], y[tr]), (X[te], y[te])


@dataclass
class Normalizer:
    """Per-feature z-score fitted on a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(X.mean(axis=0), std)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


# -- CSV -------------------------------------------------------------------

def _parse_label(text):
    try:
        return int(text)
    except ValueError:
        return text


def load_csv(path, kind="features", layout=SensorLayout(), window_len=120, stride=None):
    """Read a feature CSV or a raw stream CSV.

    ``kind="features"`` expects header ``f0..f{n-1},label`` and returns
    ``(X, y)``. ``kind="raw"`` expects ``timestamp,c0..c{C-1},label``; each
    contiguous run of one label is windowed and a list of windows returned.
    Integer-looking labels are converted to ``int``.
    """
    if kind not in ("features", "raw"):
        raise DataError(f"unknown CSV kind {kind!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "missing header row") from None
        if "label" not in header:
            raise ParseError(path, 1, "no 'label' column")
        if kind == "features":
            expected = [*layout.feature_names(), "label"]
        else:
            expected = ["timestamp", *(f"c{i}" for i in range(layout.channels)), "label"]
        if header != expected:
            raise ParseError(
                path, 1, f"expected {len(expected)} columns {expected[0]}..{expected[-1]}, got {len(header)}"
            )
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(path, lineno, f"expected {len(expected)} columns, got {len(row)}")
            try:
                values = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise ParseError(path, lineno, f"non-numeric cell: {exc}") from None
            if not all(np.isfinite(values)):
                raise ParseError(path, lineno, "non-finite value")
            rows.append(values)
            labels.append(_parse_label(row[-1]))
    width = len(expected) - 1
    M = np.asarray(rows, dtype=np.float64).reshape(-1, width)
    y = np.asarray(labels, dtype=object if any(isinstance(v, str) for v in labels) else np.int64)
    if kind == "features":
        return M, y
    windows = []
    start = 0
    for end in range(1, len(labels) + 1):
        if end == len(labels) or labels[end] != labels[start]:
            run = M[start:end, 1:]
            if len(run) >= window_len:
                windows.extend(window_stream(run, window_len, stride, labels[start]))
            else:
                log.warning("dropping %d trailing rows of label %r (shorter than a window)", len(run), labels[start])
            start = end
    return windows


def write_feature_csv(path, X, y):
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*(f"f{i}" for i in range(X.shape[1])), "label"])
        for row, label in zip(X, y):
            w.writerow([*(repr(float(v)) for v in row), label])


def write_raw_csv(path, windows, layout=SensorLayout()):
    """Concatenate windows into a stream CSV with a running timestamp."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *(f"c{i}" for i in range(layout.channels)), "label"])
        step = 0
        for win in windows:
            for row in win.values:
                w.writerow([repr(step / layout.sample_rate), *(repr(float(v)) for v in row), win.label])
                step += 1

"""Per-sample wavelet feature front-end.

Each incoming pressure sample is pushed into a 512-sample FIFO; the window is
decomposed with a 5-level Daubechies-4 lifting transform (periodic extension),
the newest coefficient of every subband is kept, and five coefficient ratios
are appended. The result is a 16-dimensional feature vector per sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError

WINDOW = 512
LEVELS = 5
FEATURE_DIM = 16

SUBBAND_NAMES = ("A5", "A4", "A3", "A2", "A1", "D5", "D4", "D3", "D2", "D1")

# (numerator, denominator) indices into the retained coefficient vector
DEFAULT_RATIO_PAIRS: tuple[tuple[int, int], ...] = (
    (0, 4),  # A5 / A1
    (5, 0),  # D5 / A5
    (7, 9),  # D3 / D1
    (2, 7),  # A3 / D3
    (8, 4),  # D2 / A1
)
DEFAULT_RATIO_EPS = 1e-6

_S3 = np.sqrt(3.0)
_S2 = np.sqrt(2.0)
_SCALE_LO = (_S3 - 1.0) / _S2
_SCALE_HI = (_S3 + 1.0) / _S2


class SampleBuffer:
    """Fixed-capacity FIFO of raw samples.

    Samples are mirrored into a double-length array so the chronological
    window is always a contiguous slice. Before ``capacity`` samples have
    arrived the window is zero-padded at the oldest end.
    """

    __slots__ = ("capacity", "_data", "_ptr", "fill_count")

    def __init__(self, capacity: int = WINDOW):
        self.capacity = capacity
        self._data = np.zeros(2 * capacity)
        self._ptr = 0
        self.fill_count = 0

    def push(self, x: float) -> None:
        x = float(x)
        if not np.isfinite(x):
            raise ValidationError(f"non-finite sample: {x!r}")
        self._data[self._ptr] = x
        self._data[self._ptr + self.capacity] = x
        self._ptr = (self._ptr + 1) % self.capacity
        if self.fill_count < self.capacity:
            self.fill_count += 1

    @property
    def full(self) -> bool:
        return self.fill_count >= self.capacity

    def window(self) -> np.ndarray:
        """Oldest-to-newest view of the last ``capacity`` samples (a copy)."""
        return self._data[self._ptr:self._ptr + self.capacity].copy()

    def __len__(self) -> int:
        return self.fill_count

    def __iter__(self):
        start = self.capacity - self.fill_count
        return iter(self.window()[start:])

    def reset(self) -> None:
        self._data[:] = 0.0
        self._ptr = 0
        self.fill_count = 0


@dataclass
class WaveletCoeffs:
    """Subbands of a 5-level decomposition; index 0 is level 1."""

    approx: list[np.ndarray]
    detail: list[np.ndarray]


def _lift_forward(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a[..., 0::2].copy()
    d = a[..., 1::2].copy()
    s += _S3 * d
    d -= (_S3 / 4.0) * s + ((_S3 - 2.0) / 4.0) * np.roll(s, 1, axis=-1)
    s -= np.roll(d, -1, axis=-1)
    return s * _SCALE_LO, d * _SCALE_HI


def _lift_inverse(s: np.ndarray, d: np.ndarray) -> np.ndarray:
    s = s / _SCALE_LO
    d = d / _SCALE_HI
    s = s + np.roll(d, -1, axis=-1)
    d = d + (_S3 / 4.0) * s + ((_S3 - 2.0) / 4.0) * np.roll(s, 1, axis=-1)
    s = s - _S3 * d
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1],))
    out[..., 0::2] = s
    out[..., 1::2] = d
    return out


def lwt5(window: np.ndarray, levels: int = LEVELS) -> WaveletCoeffs:
    """Forward Daubechies-4 lifting transform with periodic extension.

    Works on the last axis, so a stack of windows of shape ``(..., 512)`` is
    transformed in one call.
    """
    a = np.asarray(window, dtype=float)
    if a.shape[-1] != WINDOW:
        raise ValidationError(f"window must have {WINDOW} samples, got {a.shape[-1]}")
    approx, detail = [], []
    for _ in range(levels):
        a, d = _lift_forward(a)
        approx.append(a)
        detail.append(d)
    return WaveletCoeffs(approx=approx, detail=detail)


def ilwt5(coeffs: WaveletCoeffs) -> np.ndarray:
    """Inverse of :func:`lwt5`, rebuilt from the coarsest approximation and all details."""
    a = coeffs.approx[-1]
    for d in reversed(coeffs.detail):
        a = _lift_inverse(a, d)
    return a


def retain_latest(coeffs: WaveletCoeffs) -> np.ndarray:
    """Newest coefficient of each subband, ordered A5..A1, D5..D1."""
    approx = [a[..., -1] for a in reversed(coeffs.approx)]
    detail = [d[..., -1] for d in reversed(coeffs.detail)]
    return np.stack(approx + detail, axis=-1)


def validate_pairs(pairs: Sequence[Sequence[int]]) -> tuple[tuple[int, int], ...]:
    pairs = tuple((int(i), int(j)) for i, j in pairs)
    if len(pairs) != 5:
        raise ValidationError(f"expected 5 ratio pairs, got {len(pairs)}")
    for i, j in pairs:
        if not (0 <= i < 10 and 0 <= j < 10) or i == j:
            raise ValidationError(f"invalid ratio pair ({i}, {j})")
    return pairs


def ratio_features(c: np.ndarray, pairs=DEFAULT_RATIO_PAIRS, eps: float = DEFAULT_RATIO_EPS) -> np.ndarray:
    """Coefficient ratios c_i / c_j with a sign-preserving clamp on c_j."""
    if eps <= 0:
        raise ValidationError("eps must be positive")
    c = np.asarray(c, dtype=float)
    num = np.stack([c[..., i] for i, _ in pairs], axis=-1)
    den = np.stack([c[..., j] for _, j in pairs], axis=-1)
    # sign(0) is taken as +1 so the clamp never produces a zero denominator
    den = np.where(den < 0, -1.0, 1.0) * np.maximum(np.abs(den), eps)
    return num / den


def make_feature(x_t, c: np.ndarray, r: np.ndarray) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    return np.concatenate([x_t[..., None], np.asarray(c, float), np.asarray(r, float)], axis=-1)


def window_features(windows: np.ndarray, pairs=DEFAULT_RATIO_PAIRS,
                    eps: float = DEFAULT_RATIO_EPS) -> np.ndarray:
    """Feature vectors for windows of shape (..., 512); the newest sample is the last entry."""
    windows = np.asarray(windows, dtype=float)
    c = retain_latest(lwt5(windows))
    return make_feature(windows[..., -1], c, ratio_features(c, pairs, eps))


def trace_features(samples: Sequence[float], pairs=DEFAULT_RATIO_PAIRS,
                   eps: float = DEFAULT_RATIO_EPS, chunk: int = 2048) -> np.ndarray:
    """Feature vector for every sample of a trace, as the streaming FIFO would produce them.

    Equivalent to pushing each sample through a :class:`FeatureExtractor`, but
    batched over sliding windows.
    """
    x = np.asarray(samples, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValidationError("trace contains non-finite samples")
    padded = np.concatenate([np.zeros(WINDOW - 1), x])
    view = np.lib.stride_tricks.sliding_window_view(padded, WINDOW)
    out = np.empty((len(x), FEATURE_DIM))
    for start in range(0, len(x), chunk):
        out[start:start + chunk] = window_features(view[start:start + chunk], pairs, eps)
    return out


class FeatureExtractor:
    """Streaming sample -> feature vector converter (one per signal stream)."""

    def __init__(self, pairs=DEFAULT_RATIO_PAIRS, eps: float = DEFAULT_RATIO_EPS):
        self.pairs = validate_pairs(pairs)
        self.eps = eps
        self.buffer = SampleBuffer(WINDOW)

    def push(self, x: float) -> np.ndarray:
        self.buffer.push(x)
        return window_features(self.buffer.window(), self.pairs, self.eps)

    def reset(self) -> None:
        self.buffer.reset()


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=np.asarray(d["mean"], dtype=float), std=np.asarray(d["std"], dtype=float))

    @classmethod
    def identity(cls, dim: int = FEATURE_DIM) -> "NormStats":
        return cls(mean=np.zeros(dim), std=np.ones(dim))


def fit_norm(features, min_std: float = 1e-8) -> NormStats:
    """Per-dimension z-score statistics (population std, clamped below)."""
    f = np.asarray(features, dtype=float)
    if f.size == 0:
        raise ValidationError("cannot fit normalization on an empty feature set")
    f = f.reshape(-1, f.shape[-1])
    return NormStats(mean=f.mean(axis=0), std=np.maximum(f.std(axis=0), min_std))


def apply_norm(e, stats: NormStats) -> np.ndarray:
    return (np.asarray(e, dtype=float) - stats.mean) / stats.std

"""Per-sample streaming inference: FIFO -> features -> segments -> predictions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, TextIO

import numpy as np

from .errors import ValidationError
from .features import (DEFAULT_RATIO_EPS, DEFAULT_RATIO_PAIRS, FEATURE_DIM, WINDOW,
                       FeatureExtractor, NormStats, apply_norm)
from .model import ModelConfig, ModelWeights, segment_forward, streaming_forward

CLASS_NAMES = ("NONE", "DO", "VOID", "ABD")
NONE = 0
MODES = ("segment", "streaming")


class MemoryBank:
    """Rolling store of the last ``m`` pooled segment contexts, oldest row first."""

    def __init__(self, m: int, dim: int = FEATURE_DIM):
        self.m = m
        self.rows = np.zeros((m, dim))
        self.valid_count = 0

    def push(self, r: np.ndarray) -> None:
        if self.m == 0:
            return
        self.rows[:-1] = self.rows[1:]
        self.rows[-1] = r
        self.valid_count = min(self.valid_count + 1, self.m)

    @property
    def full(self) -> bool:
        return self.valid_count >= self.m

    def reset(self) -> None:
        self.rows[:] = 0.0
        self.valid_count = 0


@dataclass(frozen=True)
class Prediction:
    segment_end_index: int
    probs: np.ndarray
    labels: tuple[int, ...]
    warmup: bool

    @property
    def label_names(self) -> tuple[str, ...]:
        return tuple(CLASS_NAMES[i] for i in self.labels)


def decode_labels(probs: np.ndarray, head_mode: str, threshold: float = 0.5) -> tuple[int, ...]:
    """Label set for one probability vector.

    Softmax heads decode to the argmax (lowest index on ties). Sigmoid heads
    keep every class at or above ``threshold``; NONE is dropped when any
    other class is active, and an empty set decodes to NONE.
    """
    p = np.asarray(probs)
    if head_mode == "softmax":
        return (int(np.argmax(p)),)
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    active = [i for i in range(len(p)) if p[i] >= threshold and i != NONE]
    return tuple(active) if active else (NONE,)


class StreamingEngine:
    """One engine per signal stream.

    Weights are shared read-only; all mutable state (sample FIFO, pending
    features, memory bank, counters) lives on the instance.
    """

    def __init__(self, weights: ModelWeights, config: ModelConfig, norm: NormStats,
                 mode: str = "streaming", pairs=DEFAULT_RATIO_PAIRS,
                 ratio_eps: float = DEFAULT_RATIO_EPS, threshold: float = 0.5):
        if mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        weights.check(config)
        self.weights = weights
        self.config = config
        self.norm = norm
        self.mode = mode
        self.threshold = threshold
        self.extractor = FeatureExtractor(pairs, ratio_eps)
        self.pending = np.zeros((config.segment_len, FEATURE_DIM))
        self.pending_count = 0
        self.memory = MemoryBank(config.memory_len)
        self.sample_index = 0

    @property
    def warmed_up(self) -> bool:
        if self.extractor.buffer.fill_count < WINDOW:
            return False
        return self.mode == "segment" or self.memory.full

    def step(self, x: float) -> Optional[Prediction]:
        x = float(x)
        if not np.isfinite(x):
            raise ValidationError(f"non-finite sample at index {self.sample_index}")
        e = apply_norm(self.extractor.push(x), self.norm)
        self.pending[self.pending_count] = e
        self.pending_count += 1
        t = self.sample_index
        self.sample_index += 1
        if self.pending_count < self.config.segment_len:
            return None

        # flag is evaluated before the memory update for this segment
        warm = not self.warmed_up
        E = self.pending
        if self.mode == "streaming":
            probs, ctx = streaming_forward(self.memory.rows, E, self.weights, self.config)
            self.memory.push(ctx)
        else:
            probs = segment_forward(E, self.weights, self.config)
        self.pending = np.zeros_like(self.pending)
        self.pending_count = 0
        labels = decode_labels(probs, self.config.head_mode, self.threshold)
        return Prediction(segment_end_index=t, probs=probs, labels=labels, warmup=warm)

    def run(self, samples: Iterable[float]) -> list[Prediction]:
        out = []
        for x in samples:
            p = self.step(x)
            if p is not None:
                out.append(p)
        return out

    def reset(self) -> None:
        self.extractor.reset()
        self.pending[:] = 0.0
        self.pending_count = 0
        self.memory.reset()
        self.sample_index = 0

    def state_size(self) -> int:
        """Number of floats held as stream state (constant in stream length)."""
        return self.extractor.buffer._data.size + self.pending.size + self.memory.rows.size


def run_trace(samples, weights: ModelWeights, config: ModelConfig, norm: NormStats,
              mode: str = "streaming", **kwargs) -> list[Prediction]:
    samples = list(samples)
    if not samples:
        raise ValidationError("empty trace")
    return StreamingEngine(weights, config, norm, mode=mode, **kwargs).run(samples)


PREDICTION_HEADER = ["segment_end_index", "p0", "p1", "p2", "p3", "labels", "warmup"]


def format_prediction(p: Prediction) -> list[str]:
    return ([str(p.segment_end_index)] + [repr(float(v)) for v in p.probs]
            + ["|".join(p.label_names), str(int(p.warmup))])


def write_predictions(predictions: Iterable[Prediction], fh: TextIO, header: bool = True) -> None:
    w = csv.writer(fh, lineterminator="\n")
    if header:
        w.writerow(PREDICTION_HEADER)
    for p in predictions:
        w.writerow(format_prediction(p))

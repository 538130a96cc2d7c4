"""Synthetic labelled bladder-pressure traces.

Stand-in for clinical recordings: a slow filling ramp with noise plus three
kinds of events (DO bumps, VOID plateaus, ABD spikes). Morphology parameters
are invented and exist only to exercise the pipeline.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import TraceParseError, ValidationError

CLASSES = ("NONE", "DO", "VOID", "ABD")
TRACE_HEADER = ["t", "pressure", "none", "do", "void", "abd"]
EVENT_HEADER = ["class", "start", "end"]


@dataclass
class TraceConfig:
    length: int = 20000
    seed: int = 0
    baseline_start: float = 5.0
    baseline_end: float = 30.0
    noise_std: float = 0.5
    # events per 1000 samples
    do_rate: float = 2.0
    void_rate: float = 0.5
    abd_rate: float = 3.0
    do_amplitude: tuple[float, float] = (8.0, 25.0)
    do_duration: tuple[int, int] = (30, 100)
    void_amplitude: tuple[float, float] = (30.0, 60.0)
    void_duration: tuple[int, int] = (100, 400)
    abd_amplitude: tuple[float, float] = (10.0, 40.0)
    abd_duration: tuple[int, int] = (5, 30)
    overlap_probability: float = 0.3

    def validate(self) -> None:
        if self.length < 512:
            raise ValidationError("trace length must be >= 512")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        for name in ("do_rate", "void_rate", "abd_rate"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("do_amplitude", "do_duration", "void_amplitude", "void_duration",
                     "abd_amplitude", "abd_duration"):
            lo, hi = getattr(self, name)
            if not lo < hi or lo <= 0:
                raise ValidationError(f"{name} must be a non-degenerate positive range, got {(lo, hi)}")
        if not 0.0 <= self.overlap_probability <= 1.0:
            raise ValidationError("overlap_probability must lie in [0, 1]")


@dataclass
class LongMemoryConfig:
    """Cue -> delayed event task; the event's class is fixed by whether a cue preceded it.

    ``delay`` is the number of samples between the end of the cue and the
    start of the event.
    """

    length: int = 12000
    seed: int = 0
    baseline_start: float = 10.0
    baseline_end: float = 30.0
    noise_std: float = 0.5
    cue_probability: float = 0.5
    cue_amplitude: float = 25.0
    cue_len: int = 4
    delay: int = 76
    event_len: int = 24
    event_amplitude: float = 15.0
    trial_gap: tuple[int, int] = (8, 24)

    def validate(self) -> None:
        if self.length < 512:
            raise ValidationError("trace length must be >= 512")
        if self.delay < 0 or self.cue_len < 1 or self.event_len < 1:
            raise ValidationError("delay must be >= 0, cue_len and event_len >= 1")
        if not 0.0 <= self.cue_probability <= 1.0:
            raise ValidationError("cue_probability must lie in [0, 1]")
        lo, hi = self.trial_gap
        if not 0 <= lo < hi:
            raise ValidationError("trial_gap must be a non-degenerate range")
        if self.cue_len + self.delay + self.event_len + hi > self.length:
            raise ValidationError("trace too short for a single trial")


@dataclass
class LabeledTrace:
    samples: np.ndarray
    labels: np.ndarray  # (length, 4) multi-hot over NONE, DO, VOID, ABD
    events: list[tuple[str, int, int]] = field(default_factory=list)  # end exclusive

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledTrace):
            return NotImplemented
        return (np.array_equal(self.samples, other.samples) and np.array_equal(self.labels, other.labels)
                and sorted(self.events) == sorted(other.events))


def labels_from_events(length: int, events) -> np.ndarray:
    labels = np.zeros((length, 4), dtype=int)
    for name, start, end in events:
        labels[start:end, CLASSES.index(name)] = 1
    labels[:, 0] = (labels[:, 1:].sum(axis=1) == 0).astype(int)
    return labels


def _raised_cosine(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * (np.arange(n) + 0.5) / n))


def _plateau(n: int, ramp_frac: float = 0.2) -> np.ndarray:
    r = max(1, int(round(n * ramp_frac)))
    shape = np.ones(n)
    edge = 0.5 * (1.0 - np.cos(np.pi * (np.arange(r) + 0.5) / r))
    shape[:r] = edge
    shape[n - r:] = edge[::-1]
    return shape


def _spikes(n: int, rng: np.random.Generator) -> np.ndarray:
    period = rng.uniform(2.5, 6.0)
    osc = 0.6 + 0.4 * np.sin(2.0 * np.pi * np.arange(n) / period + rng.uniform(0, 2 * np.pi))
    return np.hanning(n + 2)[1:-1] * osc


def _place(rng, length, dur, taken, gap=10, tries=1000) -> Optional[int]:
    for _ in range(tries):
        start = int(rng.integers(0, length - dur + 1))
        if all(start + dur + gap <= s or start >= e + gap for s, e in taken):
            return start
    return None


def generate(config: TraceConfig) -> LabeledTrace:
    """Deterministic labelled trace for a seed; raises if the events cannot be packed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    L = config.length
    counts = {c: int(rng.poisson(getattr(config, f"{c}_rate") * L / 1000.0)) for c in ("do", "void", "abd")}
    n_overlap = int(rng.binomial(counts["abd"], config.overlap_probability)) if counts["do"] + counts["void"] else 0
    mean_dur = {c: float(np.mean(getattr(config, f"{c}_duration"))) for c in ("do", "void", "abd")}
    load = (counts["do"] * mean_dur["do"] + counts["void"] * mean_dur["void"]
            + (counts["abd"] - n_overlap) * mean_dur["abd"])
    if load > 0.7 * L:
        raise ValidationError(f"event rates too high for length {L}: expected occupancy {load:.0f} samples")

    t = np.arange(L)
    x = config.baseline_start + (config.baseline_end - config.baseline_start) * t / (L - 1)
    x = x + rng.normal(0.0, config.noise_std, size=L)
    events = []
    taken: list[tuple[int, int]] = []

    def add(cls, start, dur, amp_range, shape):
        amp = rng.uniform(*amp_range)
        x[start:start + dur] += amp * shape
        events.append((cls, start, start + dur))

    for cls, shape_fn in (("VOID", _plateau), ("DO", _raised_cosine)):
        key = cls.lower()
        for _ in range(counts[key]):
            dur = int(rng.integers(*getattr(config, f"{key}_duration"), endpoint=True))
            start = _place(rng, L, dur, taken)
            if start is None:
                raise ValidationError(f"could not place {cls} event; reduce {key}_rate")
            taken.append((start, start + dur))
            add(cls, start, dur, getattr(config, f"{key}_amplitude"), shape_fn(dur))

    hosts = [(s, e) for _, s, e in events]
    for k in range(counts["abd"]):
        dur = int(rng.integers(*config.abd_duration, endpoint=True))
        if k < n_overlap and hosts:
            hs, he = hosts[int(rng.integers(len(hosts)))]
            dur = min(dur, he - hs)
            start = int(rng.integers(hs, he - dur + 1))
        else:
            start = _place(rng, L, dur, taken)
            if start is None:
                raise ValidationError("could not place ABD event; reduce abd_rate")
            taken.append((start, start + dur))
        add("ABD", start, dur, config.abd_amplitude, _spikes(dur, rng))

    events.sort(key=lambda ev: (ev[1], ev[0]))
    return LabeledTrace(samples=x, labels=labels_from_events(L, events), events=events)


def long_memory_task(config: LongMemoryConfig) -> LabeledTrace:
    """Trials of [optional ABD cue] -> ``delay`` samples -> event.

    The event waveform is identical for both outcomes; it is VOID when a cue
    preceded it and DO otherwise, so the label is decidable only from history
    ``delay`` samples back. ``delay == 0`` falls back to :func:`generate`.
    """
    config.validate()
    if config.delay == 0:
        return generate(TraceConfig(length=config.length, seed=config.seed,
                                    baseline_start=config.baseline_start,
                                    baseline_end=config.baseline_end, noise_std=config.noise_std))
    rng = np.random.default_rng(config.seed)
    L = config.length
    t = np.arange(L)
    x = config.baseline_start + (config.baseline_end - config.baseline_start) * t / (L - 1)
    x = x + rng.normal(0.0, config.noise_std, size=L)
    cue_shape = np.hanning(config.cue_len + 2)[1:-1]
    event_shape = _plateau(config.event_len, 0.25)
    events = []
    pos = int(rng.integers(0, config.trial_gap[1] + 1))
    trial = config.cue_len + config.delay + config.event_len
    while pos + trial <= L:
        cued = rng.random() < config.cue_probability
        if cued:
            x[pos:pos + config.cue_len] += config.cue_amplitude * cue_shape
            events.append(("ABD", pos, pos + config.cue_len))
        ev = pos + config.cue_len + config.delay
        x[ev:ev + config.event_len] += config.event_amplitude * event_shape
        events.append(("VOID" if cued else "DO", ev, ev + config.event_len))
        pos = ev + config.event_len + int(rng.integers(config.trial_gap[0], config.trial_gap[1], endpoint=True))
    return LabeledTrace(samples=x, labels=labels_from_events(L, events), events=events)


def decision_bayes_rates(trace: LabeledTrace, config: LongMemoryConfig, lookback: int,
                         segment_len: int = 8, memory_len: int = 8,
                         voting_threshold: float = 0.5) -> tuple[float, float, int]:
    """Best achievable accuracy on the cue-dependent segments of a long-memory trace.

    A decider whose inputs reach ``reach`` samples before the segment start can
    name the class iff the trial's cue slot overlaps that span (presence or
    absence is then observed); otherwise it can only guess between two equally
    likely classes. Returns (segment-only rate, rate with ``memory_len``
    segments of extra history, number of decision segments).
    """
    T = segment_len
    trials = [(s, e) for name, s, e in trace.events if name in ("DO", "VOID")]
    seg_scores, mem_scores = [], []
    for k in range(len(trace) // T):
        s0, s1 = k * T, k * T + T
        for ev_start, ev_end in trials:
            covered = max(0, min(s1, ev_end) - max(s0, ev_start))
            if covered / T < voting_threshold:
                continue
            cue_lo = ev_start - config.delay - config.cue_len
            cue_hi = ev_start - config.delay

            def visible(reach):
                lo = s0 - reach
                return cue_hi > lo and cue_lo < s1

            seg_scores.append(1.0 if visible(lookback) else 0.5)
            mem_scores.append(1.0 if visible(lookback + memory_len * T) else 0.5)
    if not seg_scores:
        raise ValidationError("trace has no decision segments")
    return float(np.mean(seg_scores)), float(np.mean(mem_scores)), len(seg_scores)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def events_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".events.csv")


def write_trace(trace: LabeledTrace, path, write_events: bool = True) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for i, (v, lab) in enumerate(zip(trace.samples, trace.labels)):
            w.writerow([i, repr(float(v))] + [int(b) for b in lab])
    if write_events:
        with open(events_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVENT_HEADER)
            for name, s, e in trace.events:
                w.writerow([name, s, e])


def _runs(labels: np.ndarray) -> list[tuple[str, int, int]]:
    events = []
    for c in range(1, 4):
        col = np.concatenate([[0], labels[:, c], [0]])
        edges = np.flatnonzero(np.diff(col))
        events += [(CLASSES[c], int(s), int(e)) for s, e in zip(edges[0::2], edges[1::2])]
    return sorted(events, key=lambda ev: (ev[1], ev[0]))


def read_events(path) -> list[tuple[str, int, int]]:
    events = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                if row != EVENT_HEADER:
                    raise TraceParseError(f"expected header {','.join(EVENT_HEADER)}", lineno)
                continue
            if len(row) != 3 or row[0] not in CLASSES[1:]:
                raise TraceParseError(f"malformed event row {row}", lineno)
            try:
                events.append((row[0], int(row[1]), int(row[2])))
            except ValueError as exc:
                raise TraceParseError(str(exc), lineno) from None
    return events


def read_trace(path) -> LabeledTrace:
    """Load a labelled trace; the event log comes from the sidecar if present."""
    samples, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if [h.strip() for h in row] != TRACE_HEADER:
                    raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", lineno)
                continue
            if len(row) != len(TRACE_HEADER):
                raise TraceParseError(f"expected {len(TRACE_HEADER)} columns, got {len(row)}", lineno)
            try:
                t = int(row[0])
                v = float(row[1])
                lab = [int(b) for b in row[2:]]
            except ValueError as exc:
                raise TraceParseError(str(exc), lineno) from None
            if t != lineno - 2:
                raise TraceParseError(f"expected t={lineno - 2}, got {t}", lineno)
            if not np.isfinite(v):
                raise TraceParseError("non-finite pressure", lineno)
            if any(b not in (0, 1) for b in lab):
                raise TraceParseError("label columns must be 0 or 1", lineno)
            if lab[0] != int(sum(lab[1:]) == 0):
                raise TraceParseError("NONE must be set exactly when no other class is", lineno)
            samples.append(v)
            labels.append(lab)
    if not samples:
        raise TraceParseError("trace has no samples")
    lab = np.array(labels, dtype=int)
    side = events_path(path)
    events = read_events(side) if side.exists() else _runs(lab)
    return LabeledTrace(samples=np.array(samples), labels=lab, events=events)


def read_pressure(path) -> np.ndarray:
    """Pressure column of a ``t,pressure[,...]`` CSV (labels, if any, are ignored)."""
    values = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if lineno == 1:
                if len(row) < 2 or [h.strip() for h in row[:2]] != ["t", "pressure"]:
                    raise TraceParseError("expected header starting with t,pressure", lineno)
                continue
            try:
                values.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise TraceParseError(str(exc), lineno) from None
    return np.array(values)


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]

"""Weight-only int8 quantisation, analytic FLOP/memory accounting and latency benchmarks."""
from __future__ import annotations

import csv
import gc
import io
import platform
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ModelConfig, ModelWeights, mhsa, mlp, pool_and_classify, project, softmax, split_heads

BIAS_NAMES = ("b_1", "b_2", "b_o")
KB = 1024.0

COMPONENTS = ("Embedding layer", "Q/K/V projections", "MHSA", "Feedforward MLP", "Classifier head")


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int8
    scale: float

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(float) * self.scale


@dataclass
class QuantizedWeights:
    tensors: dict[str, QuantizedTensor]
    biases: dict[str, np.ndarray]

    def dequantize(self) -> ModelWeights:
        out = {k: q.dequantize() for k, q in self.tensors.items()}
        out.update({k: v.copy() for k, v in self.biases.items()})
        return ModelWeights.from_tensors(out)

    def payload_bytes(self) -> int:
        """Stored weight payload: one byte per int8 code (scales and float biases excluded)."""
        return sum(q.codes.size for q in self.tensors.values())


def quantize_tensor(w: np.ndarray) -> QuantizedTensor:
    """Symmetric per-tensor int8 with round-half-to-even."""
    w = np.asarray(w, dtype=float)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    codes = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(codes=codes, scale=scale)


def quantize(weights: ModelWeights) -> QuantizedWeights:
    tensors, biases = {}, {}
    for name, w in weights.tensors().items():
        if name in BIAS_NAMES:
            biases[name] = w.copy()
        else:
            tensors[name] = quantize_tensor(w)
    return QuantizedWeights(tensors=tensors, biases=biases)


# --------------------------------------------------------------------------
# analytic cost model
# --------------------------------------------------------------------------

@dataclass
class CostReport:
    rows: dict[str, dict[str, float]]
    memory_buffer_bytes: int = 0
    latency_ms: Optional[dict[str, float]] = None
    notes: list[str] = field(default_factory=list)

    @property
    def total_flops(self) -> int:
        return sum(int(r["flops"]) for r in self.rows.values())

    @property
    def total_memory_bytes(self) -> int:
        return sum(int(r["memory_bytes"]) for r in self.rows.values())

    def to_markdown(self) -> str:
        lat = self.latency_ms
        head = "| Component | FLOPs (M) | Mem. (kB) |" + (" L (ms) |" if lat else "")
        sep = "|---|---:|---:|" + ("---:|" if lat else "")
        lines = [head, sep]
        for name, r in self.rows.items():
            line = f"| {name} | {_fmt_m(r['flops'])} | {_fmt_kb(r['memory_bytes'])} |"
            if lat:
                line += f" {lat.get(name, float('nan')):.3f} |"
            lines.append(line)
        total = f"| **Total** | **{self.total_flops / 1e6:.2f}** | **{self.total_memory_bytes / KB:.2f}** |"
        if lat:
            total += f" **{sum(lat.get(n, 0.0) for n in self.rows):.3f}** |"
        lines.append(total)
        lines.append("")
        lines.append(f"Memory buffer: {self.memory_buffer_bytes / KB:.3f} kB")
        lines += self.notes
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "flops", "memory_bytes", "latency_ms"])
        for name, r in self.rows.items():
            lat = "" if not self.latency_ms else f"{self.latency_ms.get(name, float('nan')):.6f}"
            w.writerow([name, int(r["flops"]), int(r["memory_bytes"]), lat])
        w.writerow(["total", self.total_flops, self.total_memory_bytes, ""])
        w.writerow(["memory_buffer", "", self.memory_buffer_bytes, ""])
        return buf.getvalue()


def _fmt_m(flops: float) -> str:
    v = flops / 1e6
    return f"{v:.4f}" if v < 0.001 else f"{v:.3f}"


def _fmt_kb(nbytes: float) -> str:
    v = nbytes / KB
    return f"{v:g}"


def count_flops(config: ModelConfig) -> dict[str, int]:
    """Per-segment FLOPs with one multiply-accumulate counted as 2 FLOPs.

    Projections and the MLP run over the T current tokens; attention scores
    and the weighted value sum pair T queries with all T + m context tokens.
    Softmax and activation costs are not counted.
    """
    n, ctx, d = config.segment_len, config.context_len, config.d_model
    return {
        "Embedding layer": n * config.d_in * d * 2,
        "Q/K/V projections": 3 * n * d * d * 2,
        "MHSA": 2 * n * ctx * d * 2,
        "Feedforward MLP": n * (d * config.mlp_hidden + config.mlp_hidden * config.mlp_out) * 2,
        "Classifier head": config.classifier_in * config.num_classes * 2,
    }


def count_memory(config: ModelConfig) -> dict[str, int]:
    """Weight bytes at 8 bits per entry (biases not counted)."""
    d = config.d_model
    return {
        "Embedding layer": config.d_in * d,
        "Q/K/V projections": 3 * d * d,
        "MHSA": 0,
        "Feedforward MLP": d * config.mlp_hidden + config.mlp_hidden * config.mlp_out,
        "Classifier head": config.classifier_in * config.num_classes,
    }


def memory_buffer_bytes(config: ModelConfig) -> int:
    return config.memory_len * config.d_in


def cost_report(config: ModelConfig) -> CostReport:
    flops = count_flops(config)
    mem = count_memory(config)
    rows = {k: {"flops": flops[k], "memory_bytes": mem[k]} for k in COMPONENTS}
    notes = []
    if config.preset == "equation":
        notes.append("Note: equation-shape MLP/classifier widths; the published cost table "
                     "corresponds to the 'table' preset.")
    return CostReport(rows=rows, memory_buffer_bytes=memory_buffer_bytes(config), notes=notes)


# --------------------------------------------------------------------------
# wall-clock latency
# --------------------------------------------------------------------------

@dataclass
class LatencyReport:
    samples_ms: np.ndarray
    host: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p99(self) -> float:
        return float(np.percentile(self.samples_ms, 99))

    @property
    def max(self) -> float:
        return float(np.max(self.samples_ms))

    def halves_p99(self) -> tuple[float, float]:
        h = len(self.samples_ms) // 2
        return (float(np.percentile(self.samples_ms[:h], 99)),
                float(np.percentile(self.samples_ms[h:], 99)))

    def summary(self) -> str:
        return (f"per-segment latency over {len(self.samples_ms)} segments on {self.host}: "
                f"mean {self.mean:.3f} ms, p50 {self.p50:.3f} ms, p99 {self.p99:.3f} ms, "
                f"max {self.max:.3f} ms")


def host_description() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} / {platform.system()} / Python {platform.python_version()}"


def bench_latency(engine_factory, samples: Sequence[float], repetitions: int = 3,
                  warmup_segments: int = 8) -> LatencyReport:
    """Wall-clock cost of each segment (its T sample steps, including the forward pass).

    Every repetition replays the trace through a fresh engine; the reported
    value per segment is the median over repetitions.
    """
    x = np.asarray(samples, dtype=float)
    probe = engine_factory()
    T = probe.config.segment_len
    n_seg = len(x) // T
    if n_seg - warmup_segments < 100:
        raise ValueError("latency benchmark needs at least 100 timed segments")
    times = np.zeros((repetitions, n_seg))
    clock = time.perf_counter
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(repetitions):
            eng = engine_factory()
            step = eng.step
            for k in range(n_seg):
                chunk = x[k * T:(k + 1) * T]
                t0 = clock()
                for v in chunk:
                    step(v)
                times[rep, k] = clock() - t0
    finally:
        if gc_was_enabled:
            gc.enable()
    per_seg = np.median(times, axis=0)[warmup_segments:] * 1e3
    return LatencyReport(samples_ms=per_seg, host=host_description())


def component_latency(weights: ModelWeights, config: ModelConfig, repeats: int = 200,
                      seed: int = 0) -> dict[str, float]:
    """Mean wall-clock milliseconds of each forward component on one segment."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(config.context_len, config.d_in))
    n_cur = config.segment_len
    w = weights
    P = project(X, w.W_proj)
    H = config.num_heads

    def qkv():
        return P @ w.W_Q, P @ w.W_K, P @ w.W_V

    Qm, Km, Vm = qkv()

    def attention():
        Q, K, V = split_heads(Qm[-n_cur:], H), split_heads(Km, H), split_heads(Vm, H)
        return softmax(Q @ K.swapaxes(-1, -2) / np.sqrt(config.d_head)) @ V

    Z = mhsa(P, w.W_Q, w.W_K, w.W_V, H)[-n_cur:]
    O = mlp(Z, w.W_1, w.b_1, w.W_2, w.b_2)
    ops = {
        "Embedding layer": lambda: project(X, w.W_proj),
        "Q/K/V projections": qkv,
        "MHSA": attention,
        "Feedforward MLP": lambda: mlp(Z, w.W_1, w.b_1, w.W_2, w.b_2),
        "Classifier head": lambda: pool_and_classify(O, w.W_o, w.b_o, config.head_mode, n_cur),
    }
    out = {}
    for name, fn in ops.items():
        fn()
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        out[name] = (time.perf_counter() - t0) / repeats * 1e3
    return out

"""Datasets, losses, analytic gradients, AdamW and Table-2 style metrics."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import CLASS_NAMES, NONE, decode_labels
from .errors import TrainingDiverged, ValidationError
from .features import (DEFAULT_RATIO_EPS, DEFAULT_RATIO_PAIRS, WINDOW, NormStats,
                       apply_norm, trace_features)
from .model import (ModelConfig, ModelWeights, init_weights, merge_heads, segment_forward,
                    sigmoid, softmax, split_heads, streaming_forward)
from .synthetic import LabeledTrace

log = logging.getLogger(__name__)

VARIANTS = ("segment", "streaming")
DEFAULT_LR = {"segment": 1e-3, "streaming": 1e-6}
# tie-break order for single-label voting, highest priority first
DEFAULT_PRIORITY = (2, 1, 3)  # VOID > DO > ABD
PROB_CLAMP = 1e-12
LN_EPS = 1e-5


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class LabeledSegment:
    features: np.ndarray
    memory_context: Optional[np.ndarray]
    target: np.ndarray
    sample_labels: np.ndarray
    end_index: int


@dataclass
class SegmentDataset:
    """Array-backed collection of labelled segments.

    ``X`` holds normalised segment matrices (N, T, 16); ``R`` the teacher-forced
    memory contexts (N, m, 16) for the streaming variant, else None.
    """

    X: np.ndarray
    R: Optional[np.ndarray]
    multi_hot: np.ndarray
    sample_labels: np.ndarray
    end_index: np.ndarray
    warmup: np.ndarray

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> LabeledSegment:
        return LabeledSegment(features=self.X[i],
                              memory_context=None if self.R is None else self.R[i],
                              target=self.multi_hot[i], sample_labels=self.sample_labels[i],
                              end_index=int(self.end_index[i]))

    @property
    def variant(self) -> str:
        return "segment" if self.R is None else "streaming"

    def inputs(self) -> np.ndarray:
        """Token matrices fed to the encoder: segment rows, memory rows first if present."""
        if self.R is None:
            return self.X
        return np.concatenate([self.R, self.X], axis=1)

    def subset(self, mask) -> "SegmentDataset":
        return SegmentDataset(X=self.X[mask], R=None if self.R is None else self.R[mask],
                              multi_hot=self.multi_hot[mask], sample_labels=self.sample_labels[mask],
                              end_index=self.end_index[mask], warmup=self.warmup[mask])

    def single_labels(self, threshold: float = 0.5, priority=DEFAULT_PRIORITY) -> np.ndarray:
        return np.array([to_single_label(s, threshold, priority) for s in self.sample_labels], dtype=int)

    def targets(self, head_mode: str, threshold: float = 0.5, priority=DEFAULT_PRIORITY) -> np.ndarray:
        """Training targets: one-hot voted labels (softmax) or multi-hot sets (sigmoid)."""
        if head_mode == "sigmoid":
            return self.multi_hot.astype(float)
        return np.eye(self.multi_hot.shape[1])[self.single_labels(threshold, priority)]

    @classmethod
    def concat(cls, parts: Sequence["SegmentDataset"]) -> "SegmentDataset":
        parts = list(parts)
        if not parts:
            raise ValidationError("nothing to concatenate")
        R = None if parts[0].R is None else np.concatenate([p.R for p in parts])
        return cls(X=np.concatenate([p.X for p in parts]), R=R,
                   multi_hot=np.concatenate([p.multi_hot for p in parts]),
                   sample_labels=np.concatenate([p.sample_labels for p in parts]),
                   end_index=np.concatenate([p.end_index for p in parts]),
                   warmup=np.concatenate([p.warmup for p in parts]))


def build_dataset(trace: LabeledTrace, stride: int, variant: str, norm: NormStats,
                  segment_len: int = 8, memory_len: int = 8, pairs=DEFAULT_RATIO_PAIRS,
                  ratio_eps: float = DEFAULT_RATIO_EPS,
                  features: Optional[np.ndarray] = None) -> SegmentDataset:
    """Cut a labelled trace into segments of ``segment_len`` feature vectors.

    Stride 1 gives the overlapping training windows, stride ``segment_len``
    the non-overlapping evaluation grid. Segment targets are the union of the
    per-sample labels. For the streaming variant each window also carries the
    pooled contexts of the ``memory_len`` windows that end ``segment_len``,
    ``2*segment_len``, ... samples earlier (zero rows where unavailable).
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}")
    T, m = segment_len, memory_len
    n = len(trace.samples)
    if features is None:
        features = trace_features(trace.samples, pairs, ratio_eps)
    F = apply_norm(features, norm)
    labels = np.asarray(trace.labels, dtype=int)
    d = F.shape[1]
    if n < T:
        return SegmentDataset(X=np.zeros((0, T, d)), R=None if variant == "segment" else np.zeros((0, m, d)),
                              multi_hot=np.zeros((0, labels.shape[1]), int),
                              sample_labels=np.zeros((0, T, labels.shape[1]), int),
                              end_index=np.zeros(0, int), warmup=np.zeros(0, bool))
    ends = np.arange(T - 1, n, stride)
    windows = np.lib.stride_tricks.sliding_window_view(F, T, axis=0).transpose(0, 2, 1)
    X = windows[ends - T + 1].copy()
    lab_windows = np.lib.stride_tricks.sliding_window_view(labels, T, axis=0).transpose(0, 2, 1)
    sample_labels = lab_windows[ends - T + 1].copy()
    multi_hot = sample_labels.max(axis=1)
    # NONE is active only if no event class is active anywhere in the window
    multi_hot[:, NONE] = (multi_hot[:, 1:].sum(axis=1) == 0).astype(int)
    R = None
    warm = ends < WINDOW - 1
    if variant == "streaming":
        pools = windows.mean(axis=1)  # pools[k] = mean of window ending at k + T - 1
        R = np.zeros((len(ends), m, d))
        for slot in range(m):
            back = T * (m - slot)
            src = ends - back
            ok = src >= T - 1
            R[ok, slot] = pools[src[ok] - T + 1]
        warm = warm | (ends - T * m < T - 1)
    return SegmentDataset(X=X, R=R, multi_hot=multi_hot, sample_labels=sample_labels,
                          end_index=ends, warmup=warm)


def to_single_label(sample_labels: np.ndarray, threshold: float = 0.5,
                    priority=DEFAULT_PRIORITY) -> int:
    """Voted segment label from per-sample multi-hot rows (T x classes).

    The event class active in the largest fraction of samples wins if that
    fraction reaches ``threshold``; equal fractions break by ``priority``.
    """
    lab = np.asarray(sample_labels)
    frac = lab.mean(axis=0)
    best = max(frac[c] for c in priority)
    if best <= 0 or best < threshold:
        return NONE
    for c in priority:
        if frac[c] == best:
            return int(c)
    return NONE


def class_weights_from(targets: np.ndarray) -> np.ndarray:
    """Inverse-frequency class weights normalised to mean 1 (absent classes get 0)."""
    counts = np.asarray(targets, float).sum(axis=0)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1e-12), 0.0)
    return w * len(w) / max(w.sum(), 1e-12)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def loss(probs: np.ndarray, target: np.ndarray, head_mode: str,
         class_weights: Optional[np.ndarray] = None) -> float:
    """Mean cross-entropy (softmax) or mean per-class binary cross-entropy (sigmoid)."""
    p = np.clip(np.atleast_2d(probs), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.atleast_2d(np.asarray(target, dtype=float))
    w = np.ones(p.shape[-1]) if class_weights is None else np.asarray(class_weights, float)
    if head_mode == "softmax":
        return float(-(y * w * np.log(p)).sum(axis=-1).mean())
    if head_mode == "sigmoid":
        return float((-(y * np.log(p) + (1 - y) * np.log(1 - p)) * w).mean())
    raise ValidationError(f"unknown head_mode {head_mode!r}")


def _dlogits(probs, y, head_mode, w):
    B, C = probs.shape
    if head_mode == "softmax":
        a = y * w
        return (probs * a.sum(axis=1, keepdims=True) - a) / B
    return w * (probs - y) / (B * C)


# --------------------------------------------------------------------------
# forward with cache / backward
# --------------------------------------------------------------------------

def _ln_forward(x):
    mu = x.mean(axis=-1, keepdims=True)
    sd = np.sqrt(x.var(axis=-1, keepdims=True) + LN_EPS)
    y = (x - mu) / sd
    return y, sd


def _ln_backward(dy, y, sd):
    return (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True)) / sd


def forward_cached(w: ModelWeights, X: np.ndarray, config: ModelConfig):
    """Batched forward pass over token matrices X (B, n, d_in) keeping intermediates."""
    c = {"X": X}
    n = X.shape[1]
    P = X @ w.W_proj
    if config.positional_encoding:
        P = P + w.pos[w.pos.shape[0] - n:]
    c["P"] = P
    if config.residual:
        U, c["ln1_sd"] = _ln_forward(P)
    else:
        U = P
    c["U"] = U
    H = config.num_heads
    Q = split_heads(U @ w.W_Q, H)
    K = split_heads(U @ w.W_K, H)
    V = split_heads(U @ w.W_V, H)
    scale = 1.0 / np.sqrt(config.d_head)
    A = softmax(Q @ K.swapaxes(-1, -2) * scale)
    Zatt = merge_heads(A @ V)
    c.update(Q=Q, K=K, V=V, A=A, scale=scale)
    Z = P + Zatt if config.residual else Zatt
    c["Z"] = Z
    if config.residual:
        M, c["ln2_sd"] = _ln_forward(Z)
    else:
        M = Z
    c["M"] = M
    pre = M @ w.W_1 + w.b_1
    Hh = np.maximum(pre, 0.0)
    O = Hh @ w.W_2 + w.b_2
    if config.residual and config.mlp_out == config.d_model:
        O = O + Z
    c.update(pre=pre, H=Hh)
    if config.pool_scope == "segment":
        rows = slice(n - config.segment_len, n)
        n_pool = config.segment_len
    else:
        rows = slice(0, n)
        n_pool = n
    pooled = O[:, rows].mean(axis=1)
    logits = pooled @ w.W_o + w.b_o
    probs = softmax(logits) if config.head_mode == "softmax" else sigmoid(logits)
    c.update(rows=rows, n_pool=n_pool, pooled=pooled)
    return probs, c


def backward(w: ModelWeights, c: dict, dlogits: np.ndarray, config: ModelConfig) -> dict[str, np.ndarray]:
    g = {}
    g["W_o"] = c["pooled"].T @ dlogits
    g["b_o"] = dlogits.sum(axis=0)
    dpooled = dlogits @ w.W_o.T
    X = c["X"]
    B, n, _ = X.shape
    dO = np.zeros((B, n, config.mlp_out))
    dO[:, c["rows"]] = dpooled[:, None, :] / c["n_pool"]
    dZ = np.zeros((B, n, config.d_model))
    if config.residual and config.mlp_out == config.d_model:
        dZ += dO
    g["W_2"] = np.einsum("bnh,bno->ho", c["H"], dO)
    g["b_2"] = dO.sum(axis=(0, 1))
    dpre = (dO @ w.W_2.T) * (c["pre"] > 0)
    g["W_1"] = np.einsum("bnd,bnh->dh", c["M"], dpre)
    g["b_1"] = dpre.sum(axis=(0, 1))
    dM = dpre @ w.W_1.T
    dZ += _ln_backward(dM, c["M"], c["ln2_sd"]) if config.residual else dM

    H = config.num_heads
    dZh = split_heads(dZ, H)
    A, Q, K, V = c["A"], c["Q"], c["K"], c["V"]
    dA = dZh @ V.swapaxes(-1, -2)
    dV = A.swapaxes(-1, -2) @ dZh
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * c["scale"]
    dQ = merge_heads(dS @ K)
    dK = merge_heads(dS.swapaxes(-1, -2) @ Q)
    dV = merge_heads(dV)
    U = c["U"]
    g["W_Q"] = np.einsum("bnd,bne->de", U, dQ)
    g["W_K"] = np.einsum("bnd,bne->de", U, dK)
    g["W_V"] = np.einsum("bnd,bne->de", U, dV)
    dU = dQ @ w.W_Q.T + dK @ w.W_K.T + dV @ w.W_V.T
    if config.residual:
        dP = dZ + _ln_backward(dU, U, c["ln1_sd"])
    else:
        dP = dU
    g["W_proj"] = np.einsum("bni,bnd->id", X, dP)
    if config.positional_encoding:
        gp = np.zeros_like(w.pos)
        gp[gp.shape[0] - n:] = dP.sum(axis=0)
        g["pos"] = gp
    return g


def loss_and_grad(weights: ModelWeights, X: np.ndarray, targets: np.ndarray, config: ModelConfig,
                  class_weights: Optional[np.ndarray] = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch loss and its exact gradient for every weight tensor."""
    if len(X) == 0:
        raise ValidationError("empty batch")
    probs, cache = forward_cached(weights, X, config)
    cw = np.ones(config.num_classes) if class_weights is None else np.asarray(class_weights, float)
    value = loss(probs, targets, config.head_mode, cw)
    dl = _dlogits(probs, np.asarray(targets, float), config.head_mode, cw)
    return value, backward(weights, cache, dl, config)


def grad(weights: ModelWeights, batch: SegmentDataset, config: ModelConfig,
         threshold: float = 0.5, priority=DEFAULT_PRIORITY) -> dict[str, np.ndarray]:
    y = batch.targets(config.head_mode, threshold, priority)
    return loss_and_grad(weights, batch.inputs(), y, config)[1]


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: Optional[float] = None  # None -> per-variant default
    epochs: int = 100
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    voting_threshold: float = 0.5
    priority: tuple[int, ...] = DEFAULT_PRIORITY
    class_weighting: bool = False

    def lr_for(self, variant: str) -> float:
        return DEFAULT_LR[variant] if self.learning_rate is None else self.learning_rate

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 < self.voting_threshold <= 1.0:
            raise ValidationError("voting_threshold must lie in (0, 1]")


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, weights: ModelWeights, grads: dict[str, np.ndarray]) -> ModelWeights:
        """Decoupled weight decay followed by the bias-corrected Adam update."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        new = {}
        for name, p in weights.tensors().items():
            gr = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * gr
            v = self.beta2 * v + (1 - self.beta2) * gr * gr
            self.m[name], self.v[name] = m, v
            p = p * (1.0 - self.lr * self.weight_decay)
            new[name] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return ModelWeights.from_tensors(new)


def adamw_step(weights, grads, state: AdamW) -> ModelWeights:
    return state.step(weights, grads)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def dataset_loss(weights: ModelWeights, dataset: SegmentDataset, config: ModelConfig,
                 train_config: Optional[TrainConfig] = None) -> float:
    tc = train_config or TrainConfig()
    y = dataset.targets(config.head_mode, tc.voting_threshold, tc.priority)
    probs, _ = forward_cached(weights, dataset.inputs(), config)
    return loss(probs, y, config.head_mode)


def train(dataset: SegmentDataset, config: ModelConfig, train_config: TrainConfig,
          init: Optional[ModelWeights] = None) -> tuple[ModelWeights, list[float]]:
    """Mini-batch AdamW training; returns final weights and per-epoch mean loss."""
    if len(dataset) == 0:
        raise ValidationError("empty training set")
    variant = dataset.variant
    if variant == "streaming" and dataset.R.shape[1] != config.memory_len:
        raise ValidationError("dataset memory length does not match model config")
    tc = train_config
    weights = init.copy() if init is not None else init_weights(config, tc.seed)
    weights.check(config)
    X = dataset.inputs()
    y = dataset.targets(config.head_mode, tc.voting_threshold, tc.priority)
    cw = class_weights_from(y) if tc.class_weighting else None
    opt = AdamW(lr=tc.lr_for(variant), beta1=tc.beta1, beta2=tc.beta2, eps=tc.adam_eps,
                weight_decay=tc.weight_decay)
    rng = np.random.default_rng(tc.seed)
    curve = []
    for epoch in range(tc.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            value, grads = loss_and_grad(weights, X[idx], y[idx], config, cw)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += value * len(idx)
            weights = opt.step(weights, grads)
        curve.append(total / len(X))
        log.debug("epoch %d loss %.6f", epoch, curve[-1])
    return weights, curve


# --------------------------------------------------------------------------
# inference over datasets and metrics
# --------------------------------------------------------------------------

def predict_dataset(weights: ModelWeights, dataset: SegmentDataset, config: ModelConfig) -> np.ndarray:
    """Batched class probabilities using the inference forward pass."""
    if dataset.R is None:
        return segment_forward(dataset.X, weights, config)
    return streaming_forward(dataset.R, dataset.X, weights, config)[0]


def decode_batch(probs: np.ndarray, head_mode: str, threshold: float = 0.5) -> np.ndarray:
    """Multi-hot decoded label sets for a batch of probability vectors."""
    out = np.zeros(probs.shape, dtype=int)
    for i, p in enumerate(probs):
        out[i, list(decode_labels(p, head_mode, threshold))] = 1
    return out


@dataclass
class ClassMetrics:
    n: int
    accuracy: float
    f1: float
    tp_rate: float
    tn_rate: float
    fp_rate: float
    fn_rate: float


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    overall_accuracy: float
    n_segments: int
    mode: str

    # Table-2 row order: event classes first, NONE last
    ROW_ORDER = ("ABD", "DO", "VOID", "NONE")

    def rows(self):
        for name in self.ROW_ORDER:
            if name in self.per_class:
                yield name, self.per_class[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "n", "acc", "f1", "tp", "tn", "fp", "fn"])
        for name, m in self.rows():
            w.writerow([name, m.n] + [f"{v:.2f}" for v in
                                      (m.accuracy, m.f1, m.tp_rate, m.tn_rate, m.fp_rate, m.fn_rate)])
        w.writerow(["overall", self.n_segments, f"{self.overall_accuracy:.2f}", "", "", "", "", ""])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"{self.mode.capitalize()}-label evaluation, {self.n_segments} segments", "",
                 "| Class | N | Acc. | F1 | TP | TN | FP | FN |",
                 "|---|---:|---:|---:|---:|---:|---:|---:|"]
        for name, m in self.rows():
            lines.append(f"| {name} | {m.n} | {m.accuracy:.1f} | {m.f1:.1f} | {m.tp_rate:.1f} | "
                         f"{m.tn_rate:.1f} | {m.fp_rate:.1f} | {m.fn_rate:.1f} |")
        lines.append(f"| **Overall** | **{self.n_segments}** | **{self.overall_accuracy:.2f}** "
                     "| - | - | - | - | - |")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "overall_accuracy": self.overall_accuracy,
                "n_segments": self.n_segments,
                "per_class": {k: asdict(v) for k, v in self.per_class.items()}}


def _binary_metrics(pred: np.ndarray, true: np.ndarray) -> ClassMetrics:
    tp = int(np.sum(pred & true))
    tn = int(np.sum(~pred & ~true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    total = tp + tn + fp + fn
    # empty denominators count as perfect: nothing to find, nothing missed
    tp_rate = 100.0 * tp / (tp + fn) if tp + fn else 100.0
    tn_rate = 100.0 * tn / (tn + fp) if tn + fp else 100.0
    f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 100.0
    return ClassMetrics(n=tp + fn, accuracy=100.0 * (tp + tn) / total, f1=f1,
                        tp_rate=tp_rate, tn_rate=tn_rate,
                        fp_rate=100.0 - tn_rate, fn_rate=100.0 - tp_rate)


def evaluate(predictions, targets, mode: str = "single") -> MetricsReport:
    """One-vs-rest metrics per class plus exact-match overall accuracy.

    ``mode="single"`` takes class indices, ``mode="multi"`` multi-hot rows.
    """
    pred = np.asarray(predictions)
    true = np.asarray(targets)
    if len(pred) == 0 or len(pred) != len(true):
        raise ValidationError("predictions and targets must be non-empty and of equal length")
    k = len(CLASS_NAMES)
    if mode == "single":
        overall = 100.0 * float(np.mean(pred == true))
        P = np.eye(k, dtype=bool)[pred.astype(int)]
        Y = np.eye(k, dtype=bool)[true.astype(int)]
    elif mode == "multi":
        P = pred.astype(bool)
        Y = true.astype(bool)
        overall = 100.0 * float(np.mean(np.all(P == Y, axis=1)))
    else:
        raise ValidationError("mode must be 'single' or 'multi'")
    per_class = {CLASS_NAMES[c]: _binary_metrics(P[:, c], Y[:, c]) for c in range(k)}
    return MetricsReport(per_class=per_class, overall_accuracy=overall, n_segments=len(pred), mode=mode)


def evaluate_dataset(weights: ModelWeights, dataset: SegmentDataset, config: ModelConfig,
                     threshold: float = 0.5, voting_threshold: float = 0.5,
                     priority=DEFAULT_PRIORITY, include_warmup: bool = False) -> MetricsReport:
    ds = dataset if include_warmup else dataset.subset(~dataset.warmup)
    if len(ds) == 0:
        raise ValidationError("no segments to evaluate")
    probs = predict_dataset(weights, ds, config)
    if config.head_mode == "softmax":
        return evaluate(np.argmax(probs, axis=1), ds.single_labels(voting_threshold, priority), "single")
    return evaluate(decode_batch(probs, "sigmoid", threshold), ds.multi_hot, "multi")


def write_loss_curve(curve: Sequence[float], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, v in enumerate(curve):
        w.writerow([i, repr(float(v))])

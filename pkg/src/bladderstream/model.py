"""Single-layer transformer forward pass (inference only).

All functions are pure and accept leading batch dimensions: a segment is an
``(n, d)`` array, a batch of segments ``(B, n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .errors import ValidationError

HEAD_MODES = ("softmax", "sigmoid")
PRESETS = ("equation", "table")
POOL_SCOPES = ("segment", "all")

TENSOR_NAMES = ("W_proj", "W_Q", "W_K", "W_V", "W_1", "b_1", "W_2", "b_2", "W_o", "b_o", "pos")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``preset`` fixes the MLP/classifier widths: ``equation`` gives
    d_model -> d_model -> d_in with a d_in -> classes head, ``table`` gives
    d_model -> 4*d_model -> d_model with a d_model -> classes head.
    """

    segment_len: int = 8
    memory_len: int = 8
    d_in: int = 16
    d_model: int = 64
    num_heads: int = 4
    num_classes: int = 4
    head_mode: str = "softmax"
    preset: str = "equation"
    positional_encoding: bool = False
    residual: bool = False
    pool_scope: str = "segment"

    def __post_init__(self):
        for name in ("segment_len", "d_in", "d_model", "num_heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.memory_len < 0:
            raise ValidationError("memory_len must be >= 0")
        if self.d_model % self.num_heads:
            raise ValidationError(f"num_heads={self.num_heads} does not divide d_model={self.d_model}")
        if self.head_mode not in HEAD_MODES:
            raise ValidationError(f"head_mode must be one of {HEAD_MODES}")
        if self.preset not in PRESETS:
            raise ValidationError(f"preset must be one of {PRESETS}")
        if self.pool_scope not in POOL_SCOPES:
            raise ValidationError(f"pool_scope must be one of {POOL_SCOPES}")

    @property
    def mlp_hidden(self) -> int:
        return self.d_model if self.preset == "equation" else 4 * self.d_model

    @property
    def mlp_out(self) -> int:
        return self.d_in if self.preset == "equation" else self.d_model

    @property
    def classifier_in(self) -> int:
        return self.mlp_out

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    @property
    def context_len(self) -> int:
        return self.segment_len + self.memory_len

    def shapes(self) -> dict[str, tuple[int, ...]]:
        s = {
            "W_proj": (self.d_in, self.d_model),
            "W_Q": (self.d_model, self.d_model),
            "W_K": (self.d_model, self.d_model),
            "W_V": (self.d_model, self.d_model),
            "W_1": (self.d_model, self.mlp_hidden),
            "b_1": (self.mlp_hidden,),
            "W_2": (self.mlp_hidden, self.mlp_out),
            "b_2": (self.mlp_out,),
            "W_o": (self.classifier_in, self.num_classes),
            "b_o": (self.num_classes,),
        }
        if self.positional_encoding:
            s["pos"] = (self.context_len, self.d_model)
        return s

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class ModelWeights:
    W_proj: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_1: np.ndarray
    b_1: np.ndarray
    W_2: np.ndarray
    b_2: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    pos: Optional[np.ndarray] = field(default=None)

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tensors in canonical order (``pos`` only when present)."""
        return {n: getattr(self, n) for n in TENSOR_NAMES if getattr(self, n) is not None}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in tensors.items()})

    def copy(self) -> "ModelWeights":
        return ModelWeights.from_tensors({k: v.copy() for k, v in self.tensors().items()})

    def check(self, config: ModelConfig) -> None:
        expected = config.shapes()
        got = {k: v.shape for k, v in self.tensors().items()}
        if got != expected:
            raise ValidationError(f"weight shapes {got} do not match config {expected}")
        for k, v in self.tensors().items():
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"non-finite entries in {k}")


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """He-style uniform fan-in initialisation; biases start at zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.startswith("b_"):
            tensors[name] = np.zeros(shape)
        elif name == "pos":
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
        else:
            limit = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelWeights.from_tensors(tensors)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _check_cols(x: np.ndarray, n: int, what: str) -> None:
    if x.ndim < 2 or x.shape[-1] != n:
        raise ValidationError(f"{what}: expected last dimension {n}, got shape {x.shape}")


def project(E: np.ndarray, W_proj: np.ndarray, pos: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear embedding of feature rows; positional rows are aligned to the newest token."""
    E = np.asarray(E, dtype=float)
    _check_cols(E, W_proj.shape[0], "project")
    out = E @ W_proj
    if pos is not None:
        n = E.shape[-2]
        if n > pos.shape[0]:
            raise ValidationError(f"{n} tokens exceed positional table of {pos.shape[0]}")
        out = out + pos[pos.shape[0] - n:]
    return out


def split_heads(X: np.ndarray, num_heads: int) -> np.ndarray:
    *lead, n, d = X.shape
    return X.reshape(*lead, n, num_heads, d // num_heads).swapaxes(-3, -2)


def merge_heads(X: np.ndarray) -> np.ndarray:
    *lead, h, n, dh = X.shape
    return X.swapaxes(-3, -2).reshape(*lead, n, h * dh)


def mhsa(X: np.ndarray, W_Q: np.ndarray, W_K: np.ndarray, W_V: np.ndarray,
         num_heads: int, return_attention: bool = False):
    """Multi-head self-attention over all rows of X, scaled by sqrt(d_head)."""
    X = np.asarray(X, dtype=float)
    d_model = W_Q.shape[0]
    _check_cols(X, d_model, "mhsa")
    if X.shape[-2] < 1:
        raise ValidationError("mhsa needs at least one token")
    if d_model % num_heads:
        raise ValidationError(f"num_heads={num_heads} does not divide {d_model}")
    Q = split_heads(X @ W_Q, num_heads)
    K = split_heads(X @ W_K, num_heads)
    V = split_heads(X @ W_V, num_heads)
    A = softmax(Q @ K.swapaxes(-1, -2) / np.sqrt(d_model // num_heads))
    Z = merge_heads(A @ V)
    return (Z, A) if return_attention else Z


def mlp(Z: np.ndarray, W_1: np.ndarray, b_1: np.ndarray, W_2: np.ndarray, b_2: np.ndarray) -> np.ndarray:
    _check_cols(Z, W_1.shape[0], "mlp")
    H = np.maximum(Z @ W_1 + b_1, 0.0)
    return H @ W_2 + b_2


def pool_and_classify(O: np.ndarray, W_o: np.ndarray, b_o: np.ndarray,
                      head_mode: str, n_pool: int) -> np.ndarray:
    """Mean-pool ``n_pool`` rows and apply the classifier head."""
    O = np.asarray(O, dtype=float)
    if O.shape[-2] != n_pool:
        raise ValidationError(f"pooling expects {n_pool} rows, got {O.shape[-2]}")
    _check_cols(O, W_o.shape[0], "classifier")
    logits = O.mean(axis=-2) @ W_o + b_o
    if head_mode == "softmax":
        return softmax(logits)
    if head_mode == "sigmoid":
        return sigmoid(logits)
    raise ValidationError(f"unknown head_mode {head_mode!r}")


def _encode(X: np.ndarray, w: ModelWeights, config: ModelConfig) -> np.ndarray:
    """Shared body: projection, attention and MLP over every token of X."""
    P = project(X, w.W_proj, w.pos if config.positional_encoding else None)
    if config.residual:
        Z = P + mhsa(layer_norm(P), w.W_Q, w.W_K, w.W_V, config.num_heads)
        O = mlp(layer_norm(Z), w.W_1, w.b_1, w.W_2, w.b_2)
        if config.mlp_out == config.d_model:
            O = O + Z
        return O
    Z = mhsa(P, w.W_Q, w.W_K, w.W_V, config.num_heads)
    return mlp(Z, w.W_1, w.b_1, w.W_2, w.b_2)


def _check_segment(E: np.ndarray, config: ModelConfig) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    if E.ndim < 2 or E.shape[-2:] != (config.segment_len, config.d_in):
        raise ValidationError(
            f"segment must be {config.segment_len}x{config.d_in}, got {E.shape}")
    return E


def segment_forward(E: np.ndarray, weights: ModelWeights, config: ModelConfig) -> np.ndarray:
    """Class probabilities for a segment processed in isolation."""
    E = _check_segment(E, config)
    O = _encode(E, weights, config)
    return pool_and_classify(O, weights.W_o, weights.b_o, config.head_mode, config.segment_len)


def pooled_context(E: np.ndarray) -> np.ndarray:
    """Column mean of a segment's (pre-projection) feature rows."""
    return np.asarray(E, dtype=float).mean(axis=-2)


def streaming_forward(R: np.ndarray, E: np.ndarray, weights: ModelWeights,
                      config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Attend over [memory; segment] and classify the segment.

    Returns the class probabilities and the segment's pooled context. The
    memory bank itself is not modified.
    """
    E = _check_segment(E, config)
    R = np.asarray(R, dtype=float).reshape(*E.shape[:-2], -1, config.d_in)
    if R.shape[-2] != config.memory_len:
        raise ValidationError(f"memory must have {config.memory_len} rows, got {R.shape[-2]}")
    X = np.concatenate([R, E], axis=-2)
    O = _encode(X, weights, config)
    if config.pool_scope == "segment":
        O, n_pool = O[..., config.memory_len:, :], config.segment_len
    else:
        n_pool = config.context_len
    probs = pool_and_classify(O, weights.W_o, weights.b_o, config.head_mode, n_pool)
    return probs, pooled_context(E)

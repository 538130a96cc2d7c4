"""Streaming single-layer transformer for real-time bladder-pressure state classification."""

from .engine import CLASS_NAMES, Prediction, StreamingEngine, decode_labels, run_trace
from .features import FeatureExtractor, NormStats, apply_norm, fit_norm, lwt5, trace_features
from .model import ModelConfig, ModelWeights, init_weights, segment_forward, streaming_forward

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "Prediction", "StreamingEngine", "decode_labels", "run_trace",
    "FeatureExtractor", "NormStats", "apply_norm", "fit_norm", "lwt5", "trace_features",
    "ModelConfig", "ModelWeights", "init_weights", "segment_forward", "streaming_forward",
]

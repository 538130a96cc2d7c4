"""Flat ``key = value`` run configuration.

Every tunable has a default; unknown keys are rejected so typos fail loudly.
Lines starting with ``#`` are comments. Ranges are written ``lo,hi`` and ratio
pairs ``i:j,i:j,...`` (indices into A5..A1, D5..D1).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .engine import CLASS_NAMES
from .errors import ConfigError, ValidationError
from .features import DEFAULT_RATIO_PAIRS, validate_pairs
from .model import ModelConfig
from .synthetic import LongMemoryConfig, TraceConfig
from .training import TrainConfig


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass
class RunConfig:
    # model
    preset: str = _doc("MLP/classifier shape preset: equation | table", "equation")
    head_mode: str = _doc("softmax (single-label) | sigmoid (multi-label)", "softmax")
    num_heads: int = _doc("attention heads (must divide d_model)", 4)
    d_model: int = _doc("embedding width", 64)
    segment_len: int = _doc("samples per segment", 8)
    memory_len: int = _doc("pooled segment contexts kept in memory", 8)
    positional_encoding: bool = _doc("learned positional table (ablation)", False)
    residual: bool = _doc("pre-norm residual blocks (ablation)", False)
    pool_scope: str = _doc("pool over 'segment' rows or 'all' context rows", "segment")
    # features
    ratio_pairs: tuple = _doc("coefficient ratio pairs", DEFAULT_RATIO_PAIRS)
    ratio_eps: float = _doc("ratio denominator clamp", 1e-6)
    # training
    lr_segment: float = _doc("AdamW learning rate, segment-level variant", 1e-3)
    lr_streaming: float = _doc("AdamW learning rate, streaming variant", 1e-6)
    epochs: int = _doc("training epochs", 100)
    batch_size: int = _doc("mini-batch size", 64)
    beta1: float = _doc("AdamW beta1", 0.9)
    beta2: float = _doc("AdamW beta2", 0.999)
    adam_eps: float = _doc("AdamW epsilon", 1e-8)
    weight_decay: float = _doc("AdamW decoupled weight decay", 0.01)
    seed: int = _doc("seed for initialisation and shuffling", 0)
    voting_threshold: float = _doc("fraction of samples needed for a voted segment label", 0.5)
    tie_priority: tuple = _doc("voting tie-break order, highest first", ("VOID", "DO", "ABD"))
    class_weighting: bool = _doc("inverse-frequency class weights in the loss", False)
    # inference
    label_threshold: float = _doc("sigmoid decision threshold", 0.5)
    # synthetic generator
    gen_length: int = _doc("generated trace length (samples)", 20000)
    gen_baseline_start: float = _doc("filling ramp start (cmH2O)", 5.0)
    gen_baseline_end: float = _doc("filling ramp end (cmH2O)", 30.0)
    gen_noise_std: float = _doc("Gaussian noise std (cmH2O)", 0.5)
    gen_do_rate: float = _doc("DO events per 1000 samples", 2.0)
    gen_void_rate: float = _doc("VOID events per 1000 samples", 0.5)
    gen_abd_rate: float = _doc("ABD events per 1000 samples", 3.0)
    gen_do_amplitude: tuple = _doc("DO amplitude range (cmH2O)", (8.0, 25.0))
    gen_do_duration: tuple = _doc("DO duration range (samples)", (30, 100))
    gen_void_amplitude: tuple = _doc("VOID amplitude range (cmH2O)", (30.0, 60.0))
    gen_void_duration: tuple = _doc("VOID duration range (samples)", (100, 400))
    gen_abd_amplitude: tuple = _doc("ABD amplitude range (cmH2O)", (10.0, 40.0))
    gen_abd_duration: tuple = _doc("ABD duration range (samples)", (5, 30))
    gen_overlap_probability: float = _doc("chance an ABD event lands inside DO/VOID", 0.3)
    lm_delay: int = _doc("long-memory task: samples from cue end to event start", 76)
    lm_cue_len: int = _doc("long-memory task: cue length (samples)", 4)
    lm_cue_amplitude: float = _doc("long-memory task: cue amplitude (cmH2O)", 25.0)
    lm_event_len: int = _doc("long-memory task: event length (samples)", 24)
    lm_event_amplitude: float = _doc("long-memory task: event amplitude (cmH2O)", 15.0)
    lm_cue_probability: float = _doc("long-memory task: probability a trial is cued", 0.5)
    lm_trial_gap: tuple = _doc("long-memory task: idle samples between trials", (8, 24))

    def model_config(self) -> ModelConfig:
        return ModelConfig(segment_len=self.segment_len, memory_len=self.memory_len,
                           d_model=self.d_model, num_heads=self.num_heads, head_mode=self.head_mode,
                           preset=self.preset, positional_encoding=self.positional_encoding,
                           residual=self.residual, pool_scope=self.pool_scope)

    def train_config(self, variant: str) -> TrainConfig:
        lr = self.lr_segment if variant == "segment" else self.lr_streaming
        return TrainConfig(learning_rate=lr, epochs=self.epochs, batch_size=self.batch_size,
                           beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
                           weight_decay=self.weight_decay, seed=self.seed,
                           voting_threshold=self.voting_threshold, priority=self.priority,
                           class_weighting=self.class_weighting)

    @property
    def priority(self) -> tuple[int, ...]:
        return tuple(CLASS_NAMES.index(n) for n in self.tie_priority)

    def trace_config(self, seed: int, length: int | None = None) -> TraceConfig:
        return TraceConfig(length=length or self.gen_length, seed=seed,
                           baseline_start=self.gen_baseline_start, baseline_end=self.gen_baseline_end,
                           noise_std=self.gen_noise_std, do_rate=self.gen_do_rate,
                           void_rate=self.gen_void_rate, abd_rate=self.gen_abd_rate,
                           do_amplitude=self.gen_do_amplitude, do_duration=self.gen_do_duration,
                           void_amplitude=self.gen_void_amplitude, void_duration=self.gen_void_duration,
                           abd_amplitude=self.gen_abd_amplitude, abd_duration=self.gen_abd_duration,
                           overlap_probability=self.gen_overlap_probability)

    def long_memory_config(self, seed: int, length: int | None = None) -> LongMemoryConfig:
        return LongMemoryConfig(length=length or self.gen_length, seed=seed,
                                baseline_start=self.gen_baseline_start, baseline_end=self.gen_baseline_end,
                                noise_std=self.gen_noise_std, cue_probability=self.lm_cue_probability,
                                cue_amplitude=self.lm_cue_amplitude, cue_len=self.lm_cue_len,
                                delay=self.lm_delay, event_len=self.lm_event_len,
                                event_amplitude=self.lm_event_amplitude, trial_gap=self.lm_trial_gap)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if key == "ratio_pairs":
            pairs = [p.split(":") for p in raw.split(",") if p.strip()]
            return validate_pairs([(int(i), int(j)) for i, j in pairs])
        if key == "tie_priority":
            names = tuple(n.strip().upper() for n in raw.split(","))
            if sorted(names) != sorted(CLASS_NAMES[1:]):
                raise ValueError("tie_priority must list DO, VOID and ABD once each")
            return names
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            raise ValueError("expected a range 'lo,hi'")
        cast = type(default[0])
        return (cast(parts[0]), cast(parts[1]))
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    defaults = RunConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, getattr(defaults, key))
    cfg = RunConfig(**values)
    try:
        cfg.model_config()
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_run_config(text, str(path))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{i}:{j}" for i, j in v)
        return ",".join(str(x) for x in v)
    return str(v)


def dump_run_config(cfg: RunConfig | None = None) -> str:
    """Config file text with every key, its value and a one-line description."""
    cfg = cfg or RunConfig()
    lines = []
    for f in fields(cfg):
        lines.append(f"# {f.metadata.get('doc', '')}")
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


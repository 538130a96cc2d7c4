"""Command-line interface: gen, train, eval, stream, bench, config.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_run_config, load_run_config
from .engine import PREDICTION_HEADER, StreamingEngine, format_prediction
from .errors import (CheckpointError, ConfigError, TraceParseError, TrainingDiverged,
                     ValidationError)
from .features import WINDOW, fit_norm, trace_features
from .model import init_weights
from .quant import bench_latency, component_latency, cost_report, quantize
from .synthetic import TraceConfig, generate, long_memory_task, read_trace, write_trace, events_path
from .training import (SegmentDataset, build_dataset, dataset_loss, evaluate_dataset, train,
                       write_loss_curve)

log = logging.getLogger("bladderstream")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def _check_out_dir(path: Path) -> None:
    if not path.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")


# --------------------------------------------------------------------------
# gen
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    _check_out_dir(out)
    if args.preset == "long-memory":
        trace = long_memory_task(rc.long_memory_config(args.seed, args.length))
    else:
        trace = generate(rc.trace_config(args.seed, args.length))
    try:
        write_trace(trace, out)
    except BaseException:
        for p in (out, events_path(out)):
            p.unlink(missing_ok=True)
        raise
    print(f"wrote {len(trace)} samples, {len(trace.events)} events to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train / eval
# --------------------------------------------------------------------------

def _load_traces(paths):
    traces = [read_trace(p) for p in paths]
    return traces


def _fit_norm(features_list):
    """Normalisation fit on samples whose FIFO window is fully populated (all samples if none are)."""
    steady = [f[WINDOW - 1:] for f in features_list if len(f) >= WINDOW]
    steady = [f for f in steady if len(f)]
    return fit_norm(np.concatenate(steady if steady else features_list))


def cmd_train(args) -> int:
    rc = _run_config(args)
    overrides = {}
    if args.head:
        overrides["head_mode"] = args.head
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        rc = RunConfig(**{**rc.__dict__, **overrides})
    config = rc.model_config()
    tc = rc.train_config(args.variant)
    if args.lr is not None:
        tc.learning_rate = args.lr
    out = Path(args.out)
    _check_out_dir(out)

    traces = _load_traces(args.traces)
    feats = [trace_features(t.samples, rc.ratio_pairs, rc.ratio_eps) for t in traces]
    norm = _fit_norm(feats)
    parts = [build_dataset(t, 1, args.variant, norm, config.segment_len, config.memory_len,
                           rc.ratio_pairs, rc.ratio_eps, features=f) for t, f in zip(traces, feats)]
    ds = SegmentDataset.concat(parts)
    if not args.include_warmup:
        ds = ds.subset(~ds.warmup)
    if len(ds) == 0:
        raise ValidationError("no training segments (traces too short)")
    log.info("training %s variant on %d segments, lr=%g, epochs=%d",
             args.variant, len(ds), tc.lr_for(args.variant), tc.epochs)
    weights, curve = train(ds, config, tc)
    final = dataset_loss(weights, ds, config, tc)
    if not np.isfinite(final):
        raise TrainingDiverged("final loss is not finite")
    summary = {
        "variant": args.variant, "epochs": tc.epochs, "learning_rate": tc.lr_for(args.variant),
        "batch_size": tc.batch_size,
        "adamw": {"beta1": tc.beta1, "beta2": tc.beta2, "eps": tc.adam_eps,
                  "weight_decay": tc.weight_decay},
        "voting_threshold": tc.voting_threshold, "priority": list(tc.priority),
        "label_threshold": rc.label_threshold, "class_weighting": tc.class_weighting,
        "n_segments": len(ds), "final_loss": final,
    }
    ckpt = Checkpoint(config=config, weights=weights, norm=norm, variant=args.variant,
                      pairs=rc.ratio_pairs, ratio_eps=rc.ratio_eps, seed=tc.seed, train_summary=summary)
    save_checkpoint(ckpt, out)
    curve_path = Path(args.loss_curve) if args.loss_curve else out.with_suffix(".loss.csv")
    with open(curve_path, "w", newline="") as fh:
        write_loss_curve(curve, fh)
    print(f"saved {out} (final loss {final:.6f}); loss curve in {curve_path}")
    return EXIT_OK


def _eval_datasets(ckpt: Checkpoint, traces):
    cfg = ckpt.config
    parts = [build_dataset(t, cfg.segment_len, ckpt.variant, ckpt.norm, cfg.segment_len, cfg.memory_len,
                           ckpt.pairs, ckpt.ratio_eps) for t in traces]
    return SegmentDataset.concat(parts)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    traces = _load_traces(args.traces)
    ds = _eval_datasets(ckpt, traces)
    if len(ds) == 0:
        raise ValidationError("no segments: every trace is shorter than one segment")
    summary = ckpt.train_summary
    kw = dict(threshold=summary.get("label_threshold", 0.5),
              voting_threshold=summary.get("voting_threshold", 0.5),
              priority=tuple(summary.get("priority", (2, 1, 3))))
    steady = None
    if (~ds.warmup).any():
        steady = evaluate_dataset(ckpt.weights, ds, ckpt.config, include_warmup=False, **kw)
    full = evaluate_dataset(ckpt.weights, ds, ckpt.config, include_warmup=True, **kw)
    if args.include_warmup or steady is None:
        report, other = full, steady
    else:
        report, other = steady, full
    print(report.to_markdown())
    if other is not None:
        which = "excluding" if other is steady else "including"
        print(f"\noverall accuracy {which} warm-up segments: {other.overall_accuracy:.2f}")
    if args.out_prefix:
        prefix = Path(args.out_prefix)
        _check_out_dir(prefix)
        Path(f"{prefix}.metrics.csv").write_text(report.to_csv())
        Path(f"{prefix}.metrics.md").write_text(report.to_markdown() + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# stream
# --------------------------------------------------------------------------

def _iter_samples(fh, strict: bool):
    for lineno, line in enumerate(fh, start=1):
        text = line.strip()
        if not text:
            continue
        cols = [c.strip() for c in text.split(",")]
        if lineno == 1 and cols[:2] == ["t", "pressure"]:
            continue
        try:
            if len(cols) < 2:
                raise ValueError(f"expected 't,pressure', got {text!r}")
            value = float(cols[1])
            if not np.isfinite(value):
                raise ValueError("non-finite pressure")
        except ValueError as exc:
            msg = f"input line {lineno}: {exc}"
            if strict:
                raise TraceParseError(msg) from None
            print(f"warning: skipping {msg}", file=sys.stderr)
            continue
        yield value


def cmd_stream(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    mode = args.mode or ckpt.variant
    threshold = ckpt.train_summary.get("label_threshold", 0.5)

    def engine(weights):
        return StreamingEngine(weights, ckpt.config, ckpt.norm, mode=mode, pairs=ckpt.pairs,
                               ratio_eps=ckpt.ratio_eps, threshold=threshold)

    main = engine(quantize(ckpt.weights).dequantize() if args.quantized else ckpt.weights)
    reference = engine(ckpt.weights) if args.quantized else None
    agree = total = 0
    out = sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(PREDICTION_HEADER)
    out.flush()
    fh = sys.stdin if args.input in (None, "-") else open(args.input, newline="")
    try:
        for x in _iter_samples(fh, args.strict):
            pred = main.step(x)
            ref = reference.step(x) if reference is not None else None
            if pred is None:
                continue
            writer.writerow(format_prediction(pred))
            out.flush()
            if ref is not None:
                total += 1
                agree += int(ref.labels == pred.labels)
    finally:
        if fh is not sys.stdin:
            fh.close()
    if reference is not None:
        rate = 100.0 * agree / total if total else float("nan")
        print(f"int8 vs float label agreement: {agree}/{total} segments ({rate:.2f}%)", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def cmd_bench(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        config, weights, norm = ckpt.config, ckpt.weights, ckpt.norm
        pairs, eps = ckpt.pairs, ckpt.ratio_eps
        if args.preset and args.preset != config.preset:
            raise ValidationError(f"checkpoint uses preset {config.preset!r}, not {args.preset!r}")
    else:
        rc = _run_config(args)
        if args.preset:
            rc = RunConfig(**{**rc.__dict__, "preset": args.preset})
        config = rc.model_config()
        weights = init_weights(config, rc.seed)
        norm, pairs, eps = None, rc.ratio_pairs, rc.ratio_eps

    report = cost_report(config)
    T = config.segment_len
    n_samples = (args.segments + 8) * T
    if args.trace:
        samples = read_trace(args.trace).samples
    else:
        samples = generate(TraceConfig(length=max(n_samples, 512), seed=0)).samples
    samples = samples[:n_samples]
    if norm is None:
        norm = fit_norm(trace_features(samples, pairs, eps))
    if not args.no_latency:
        report.latency_ms = component_latency(weights, config)
        lat = bench_latency(lambda: StreamingEngine(weights, config, norm, mode="streaming",
                                                    pairs=pairs, ratio_eps=eps),
                            samples, repetitions=args.repetitions)
    print(report.to_markdown())
    if not args.no_latency:
        first, second = lat.halves_p99()
        print()
        print(lat.summary())
        print(f"p99 first half {first:.3f} ms, second half {second:.3f} ms")
    if args.out_prefix:
        prefix = Path(args.out_prefix)
        _check_out_dir(prefix)
        Path(f"{prefix}.cost.csv").write_text(report.to_csv())
        Path(f"{prefix}.cost.md").write_text(report.to_markdown() + "\n")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(dump_run_config(_run_config(args)))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bladderstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic labelled trace")
    g.add_argument("--out", required=True, help="trace CSV path (event log written alongside)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--length", type=int, default=None)
    g.add_argument("--preset", choices=("default", "long-memory"), default="default")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on labelled traces")
    t.add_argument("--traces", nargs="+", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--variant", choices=("segment", "streaming"), default="streaming")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="override the per-variant learning rate")
    t.add_argument("--seed", type=int)
    t.add_argument("--head", choices=("softmax", "sigmoid"))
    t.add_argument("--preset", choices=("equation", "table"))
    t.add_argument("--loss-curve")
    t.add_argument("--include-warmup", action="store_true", help="also train on warm-up segments")
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on non-overlapping segments")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--traces", nargs="+", required=True)
    e.add_argument("--include-warmup", action="store_true")
    e.add_argument("--out-prefix")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("stream", help="stream predictions for a pressure CSV (file or stdin)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", help="CSV with t,pressure columns; '-' or omitted reads stdin")
    s.add_argument("--mode", choices=("segment", "streaming"))
    s.add_argument("--quantized", action="store_true")
    s.add_argument("--strict", action="store_true", help="abort on malformed input lines")
    s.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="FLOP/memory/latency report")
    b.add_argument("--checkpoint")
    b.add_argument("--preset", choices=("equation", "table"))
    b.add_argument("--trace")
    b.add_argument("--segments", type=int, default=1000)
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--no-latency", action="store_true")
    b.add_argument("--out-prefix")
    b.add_argument("--config")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("config", help="print every run-config key with its value")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TraceParseError, CheckpointError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

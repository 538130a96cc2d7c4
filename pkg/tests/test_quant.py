"""Quantisation, analytic cost accounting and latency reporting."""
import numpy as np
import pytest

from bladderstream.engine import StreamingEngine, decode_labels
from bladderstream.features import NormStats
from bladderstream.model import ModelConfig, init_weights, segment_forward
from bladderstream.quant import (
    COMPONENTS, LatencyReport, bench_latency, component_latency, cost_report, count_flops,
    count_memory, memory_buffer_bytes, quantize, quantize_tensor,
)


def test_quantize_extremes():
    q = quantize_tensor(np.array([-1.0, 0.0, 1.0]))
    assert q.scale == pytest.approx(1 / 127)
    assert q.codes.tolist() == [-127, 0, 127] and q.codes.dtype == np.int8


def test_all_zero_tensor_scale_one():
    q = quantize_tensor(np.zeros((3, 3)))
    assert q.scale == 1.0 and not q.codes.any()


def test_round_half_to_even():
    q = quantize_tensor(np.array([127.0, 0.5, 1.5, -2.5]))
    assert q.scale == 1.0 and q.codes.tolist() == [127, 0, 2, -2]


def test_dequantization_error_bound():
    w = init_weights(ModelConfig(preset="table"), seed=3)
    qw = quantize(w)
    for name, q in qw.tensors.items():
        err = np.abs(q.dequantize() - w.tensors()[name])
        assert np.all(err <= q.scale / 2 + 1e-15), name
    deq = qw.dequantize()
    assert np.array_equal(deq.b_1, w.b_1)  # biases stay float


@pytest.mark.parametrize("preset", ["equation", "table"])
def test_payload_under_50_kb(preset):
    cfg = ModelConfig(preset=preset)
    qw = quantize(init_weights(cfg))
    assert qw.payload_bytes() == sum(count_memory(cfg).values())
    assert qw.payload_bytes() < 50 * 1024


def test_label_agreement_float_vs_int8():
    cfg = ModelConfig()
    w = init_weights(cfg, seed=4)
    deq = quantize(w).dequantize()
    E = np.random.default_rng(5).normal(size=(100, 8, 16))
    pf, pq = segment_forward(E, w, cfg), segment_forward(E, deq, cfg)
    agree = sum(decode_labels(a, "softmax") == decode_labels(b, "softmax") for a, b in zip(pf, pq))
    assert agree >= 95
    assert np.mean(np.abs(pf - pq)) < 0.05


def test_table_preset_flops():
    f = count_flops(ModelConfig(preset="table"))
    expected = {"Embedding layer": 0.016, "Q/K/V projections": 0.197, "MHSA": 0.033,
                "Feedforward MLP": 0.524}
    for k, v in expected.items():
        assert abs(f[k] / 1e6 - v) <= 0.001, k
    assert f["Q/K/V projections"] == 3 * 8 * 64 * 64 * 2
    assert f["MHSA"] == 2 * 8 * 16 * 64 * 2


def test_table_preset_memory():
    cfg = ModelConfig(preset="table")
    m = count_memory(cfg)
    kb = {k: v / 1024 for k, v in m.items()}
    assert kb == {"Embedding layer": 1.0, "Q/K/V projections": 12.0, "MHSA": 0.0,
                  "Feedforward MLP": 32.0, "Classifier head": 0.25}
    assert sum(m.values()) / 1024 == 45.25
    assert memory_buffer_bytes(cfg) / 1024 == 0.125


def test_equation_preset_mlp_row():
    cfg = ModelConfig()
    assert count_flops(cfg)["Feedforward MLP"] / 1e6 == pytest.approx(0.082, abs=5e-4)
    assert sum(count_memory(cfg).values()) < 50 * 1024


def test_unit_model_hand_count():
    cfg = ModelConfig(segment_len=1, memory_len=0, d_in=1, d_model=1, num_heads=1, num_classes=1)
    f = count_flops(cfg)
    assert f["Embedding layer"] == 2 and f["Q/K/V projections"] == 6 and f["MHSA"] == 4
    assert f["Feedforward MLP"] == 4 and f["Classifier head"] == 2


def test_cost_report_totals_are_row_sums():
    r = cost_report(ModelConfig(preset="table"))
    assert list(r.rows) == list(COMPONENTS)
    assert r.total_flops == sum(int(v["flops"]) for v in r.rows.values())
    assert r.total_memory_bytes == 45.25 * 1024
    md = r.to_markdown()
    assert "**45.25**" in md and "**0.77**" in md and "0.125 kB" in md
    csv_lines = r.to_csv().splitlines()
    assert csv_lines[0] == "component,flops,memory_bytes,latency_ms" and len(csv_lines) == 8


def test_cost_is_pure_function_of_config():
    assert count_flops(ModelConfig(preset="table")) == count_flops(ModelConfig(preset="table"))


def test_latency_report_ordering():
    r = LatencyReport(samples_ms=np.random.default_rng(0).exponential(size=500), host="h")
    assert r.p50 <= r.p99 <= r.max
    assert "p99" in r.summary()


def test_bench_latency_small_run():
    cfg = ModelConfig()
    w = init_weights(cfg)
    x = np.random.default_rng(1).normal(size=8 * 120)
    rep = bench_latency(lambda: StreamingEngine(w, cfg, NormStats.identity()), x, repetitions=1)
    assert len(rep.samples_ms) == 112 and rep.max > 0
    with pytest.raises(ValueError):
        bench_latency(lambda: StreamingEngine(w, cfg, NormStats.identity()), x[:200])


def test_component_latency_keys():
    cfg = ModelConfig(preset="table")
    lat = component_latency(init_weights(cfg), cfg, repeats=3)
    assert set(lat) == set(COMPONENTS) and all(v >= 0 for v in lat.values())

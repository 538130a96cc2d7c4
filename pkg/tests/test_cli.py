"""End-to-end CLI behaviour, run in-process through ``main``."""
import io
import subprocess
import sys

import pytest

from bladderstream import cli
from bladderstream.errors import TrainingDiverged


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--out", str(d / "train.csv"), "--seed", "1", "--length", "1500"]) == 0
    assert cli.main(["gen", "--out", str(d / "test.csv"), "--seed", "2", "--length", "1200"]) == 0
    assert cli.main(["train", "--traces", str(d / "train.csv"), "--out", str(d / "m.ckpt"),
                     "--variant", "streaming", "--epochs", "2", "--lr", "1e-3", "--seed", "3"]) == 0
    return d


def test_gen_writes_trace_and_events(workdir):
    assert (workdir / "train.csv").read_text().startswith("t,pressure,none,do,void,abd\n")
    assert (workdir / "train.events.csv").read_text().startswith("class,start,end\n")


def test_gen_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert cli.main(["gen", "--out", str(tmp_path / name), "--seed", "9", "--length", "800",
                         "--preset", "long-memory"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_gen_missing_directory_leaves_nothing(tmp_path, capsys):
    target = tmp_path / "nope" / "x.csv"
    assert cli.main(["gen", "--out", str(target)]) == 2
    assert not (tmp_path / "nope").exists()
    assert "does not exist" in capsys.readouterr().err


def test_train_outputs_and_determinism(workdir, tmp_path):
    assert (workdir / "m.ckpt").exists()
    curve = (workdir / "m.loss.csv").read_text().splitlines()
    assert curve[0] == "epoch,mean_loss" and len(curve) == 3
    again = tmp_path / "again.ckpt"
    assert cli.main(["train", "--traces", str(workdir / "train.csv"), "--out", str(again),
                     "--variant", "streaming", "--epochs", "2", "--lr", "1e-3", "--seed", "3"]) == 0
    assert again.read_bytes() == (workdir / "m.ckpt").read_bytes()


def test_train_zero_epochs(workdir, tmp_path):
    out = tmp_path / "z.ckpt"
    assert cli.main(["train", "--traces", str(workdir / "train.csv"), "--out", str(out),
                     "--variant", "segment", "--epochs", "0"]) == 0
    assert out.exists()


def test_train_divergence_exit_code(workdir, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise TrainingDiverged("loss became NaN")
    monkeypatch.setattr(cli, "train", boom)
    rc = cli.main(["train", "--traces", str(workdir / "train.csv"), "--out", str(tmp_path / "d.ckpt"),
                   "--epochs", "1"])
    assert rc == 3 and "numerical failure" in capsys.readouterr().err


def test_eval_reports_and_files(workdir, capsys):
    prefix = workdir / "ev"
    assert cli.main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--traces", str(workdir / "test.csv"),
                     "--out-prefix", str(prefix)]) == 0
    out = capsys.readouterr().out
    assert "| ABD" in out and "including warm-up" in out
    assert (workdir / "ev.metrics.csv").read_text().startswith("class,n,acc")
    assert (workdir / "ev.metrics.md").exists()
    assert cli.main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--traces", str(workdir / "test.csv"),
                     "--include-warmup"]) == 0
    assert "excluding warm-up" in capsys.readouterr().out


def test_eval_short_trace(workdir, tmp_path, capsys):
    p = tmp_path / "short.csv"
    p.write_text("t,pressure,none,do,void,abd\n" + "".join(f"{i},1.0,1,0,0,0\n" for i in range(5)))
    assert cli.main(["eval", "--checkpoint", str(workdir / "m.ckpt"), "--traces", str(p)]) == 2
    assert "no segments" in capsys.readouterr().err


def test_eval_bad_checkpoint(workdir, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert cli.main(["eval", "--checkpoint", str(bad), "--traces", str(workdir / "test.csv")]) == 2


def _pressure_csv(n, bad_line=None):
    rows = ["t,pressure"] + [f"{i},{10 + (i % 7) * 0.3}" for i in range(n)]
    if bad_line is not None:
        rows.insert(bad_line, "oops")
    return "\n".join(rows) + "\n"


def test_stream_file_and_skips_malformed(workdir, tmp_path, capsys):
    p = tmp_path / "in.csv"
    p.write_text(_pressure_csv(40, bad_line=5))
    assert cli.main(["stream", "--checkpoint", str(workdir / "m.ckpt"), "--input", str(p)]) == 0
    cap = capsys.readouterr()
    lines = cap.out.splitlines()
    assert lines[0].startswith("segment_end_index,p0") and len(lines) == 1 + 5
    assert lines[1].split(",")[0] == "7" and lines[1].endswith(",1")
    assert "skipping input line 6" in cap.err


def test_stream_strict_aborts(workdir, tmp_path, capsys):
    p = tmp_path / "in.csv"
    p.write_text(_pressure_csv(40, bad_line=5))
    assert cli.main(["stream", "--checkpoint", str(workdir / "m.ckpt"), "--input", str(p), "--strict"]) == 2


def test_stream_stdin_quantized(workdir, monkeypatch, capsys):
    monkeypatch.setattr(sys, "stdin", io.StringIO(_pressure_csv(64)))
    assert cli.main(["stream", "--checkpoint", str(workdir / "m.ckpt"), "--quantized", "--mode", "segment"]) == 0
    cap = capsys.readouterr()
    assert len(cap.out.splitlines()) == 1 + 8
    assert "label agreement" in cap.err


def test_stream_matches_truncation(workdir, tmp_path, capsys):
    full, part = tmp_path / "f.csv", tmp_path / "p.csv"
    full.write_text(_pressure_csv(80))
    part.write_text(_pressure_csv(43))
    cli.main(["stream", "--checkpoint", str(workdir / "m.ckpt"), "--input", str(full)])
    a = capsys.readouterr().out.splitlines()
    cli.main(["stream", "--checkpoint", str(workdir / "m.ckpt"), "--input", str(part)])
    b = capsys.readouterr().out.splitlines()
    assert b == a[:len(b)] and len(b) == 1 + 5


def test_bench_table_report(capsys):
    assert cli.main(["bench", "--preset", "table", "--no-latency"]) == 0
    out = capsys.readouterr().out
    assert "| Q/K/V projections | 0.197 | 12 |" in out and "**45.25**" in out


def test_bench_with_latency(workdir, capsys):
    assert cli.main(["bench", "--checkpoint", str(workdir / "m.ckpt"), "--segments", "110",
                     "--repetitions", "1", "--out-prefix", str(workdir / "b")]) == 0
    assert "p99" in capsys.readouterr().out
    assert (workdir / "b.cost.csv").exists()


def test_usage_and_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--out", "x"])
    assert exc.value.code == 1
    cfg = tmp_path / "c.cfg"
    cfg.write_text("not_a_key = 1\n")
    assert cli.main(["gen", "--out", str(tmp_path / "g.csv"), "--config", str(cfg)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_config_dump(capsys):
    assert cli.main(["config"]) == 0
    assert "lr_streaming = 1e-06" in capsys.readouterr().out


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "bladderstream.cli", "bench", "--preset", "table", "--no-latency"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0 and "45.25" in r.stdout

import json
import random

import numpy as np
import pytest

from branchsim.cli import main
from util import random_mlp

from branchsim.predictor import save_weights


def run_cli(*argv):
    return main(list(argv))


def test_gen_writes_jsonl_and_is_deterministic(tmp_path, capsys):
    out_a = tmp_path / "a.jsonl"
    out_b = tmp_path / "b.jsonl"
    assert run_cli("gen", "--preset", "math-like", "-n", "30", "--seed", "7",
                   "-o", str(out_a)) == 0
    summary = capsys.readouterr().out
    assert "wrote 30 requests" in summary
    assert run_cli("gen", "--preset", "math-like", "-n", "30", "--seed", "7",
                   "-o", str(out_b)) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    assert len(out_a.read_text().splitlines()) == 30


def test_gen_rejects_zero_requests(tmp_path, capsys):
    assert run_cli("gen", "-n", "0", "-o", str(tmp_path / "w.jsonl")) == 1
    assert "error" in capsys.readouterr().err


def test_run_writes_results_and_summary(tmp_path, capsys):
    trace = tmp_path / "w.jsonl"
    run_cli("gen", "--preset", "gsm8k-like", "-n", "15", "--seed", "3",
            "-o", str(trace))
    capsys.readouterr()
    code = run_cli("run", "-t", str(trace), "--policy", "duchess",
                   "--schedule", "fcfs", "--qpm", "3", "--seed", "5",
                   "--preset", "gsm8k-like", "-o", str(tmp_path / "out"))
    assert code == 0
    line = capsys.readouterr().out
    assert "policy=duchess" in line and "accuracy=" in line
    csv_lines = (tmp_path / "out.csv").read_text().splitlines()
    assert len(csv_lines) == 16
    assert csv_lines[0].startswith("request_id,policy,schedule,arrival_ms")
    summary = json.loads((tmp_path / "out.json").read_text())
    assert summary["n_requests"] == 15
    assert summary["policy"] == "duchess"
    assert "workload_hash" in summary


def test_run_then_compare_flow(tmp_path, capsys):
    trace = tmp_path / "w.jsonl"
    run_cli("gen", "--preset", "gsm8k-like", "-n", "25", "--seed", "11",
            "-o", str(trace))
    for policy in ("default-sc", "duchess"):
        code = run_cli("run", "-t", str(trace), "--policy", policy,
                       "--schedule", "fcfs", "--preset", "gsm8k-like",
                       "--qpm", "3", "--seed", "2", "--rho", "1.0",
                       "-o", str(tmp_path / policy))
        assert code == 0
    capsys.readouterr()
    code = run_cli("compare", "-a", str(tmp_path / "default-sc.json"),
                   "-b", str(tmp_path / "duchess.json"),
                   "-o", str(tmp_path / "delta.csv"))
    assert code == 0
    out = capsys.readouterr().out
    assert "tokens total" in out
    rows = {line.split(",")[0]: line.split(",")
            for line in (tmp_path / "delta.csv").read_text().splitlines()[1:]}
    assert float(rows["tokens total"][3]) < 0  # the guided policy spends less
    assert float(rows["accuracy"][3]) == 0.0
    assert "accuracy matched" in out


def test_compare_rejects_mismatched_workloads(tmp_path, capsys):
    for seed, name in ((1, "x"), (2, "y")):
        trace = tmp_path / f"{name}.jsonl"
        run_cli("gen", "-n", "5", "--seed", str(seed), "-o", str(trace))
        run_cli("run", "-t", str(trace), "--policy", "default-sc",
                "--qpm", "3", "-o", str(tmp_path / name))
    capsys.readouterr()
    code = run_cli("compare", "-a", str(tmp_path / "x.json"),
                   "-b", str(tmp_path / "y.json"))
    assert code == 2
    assert "different workloads" in capsys.readouterr().err


def test_run_requires_exactly_one_workload_source(tmp_path, capsys):
    assert run_cli("run", "-o", str(tmp_path / "o")) == 1
    assert run_cli("run", "-t", "w.jsonl", "--synthetic", "5",
                   "-o", str(tmp_path / "o")) == 1


def test_run_easiest_predicted_requires_predictor(tmp_path, capsys):
    trace = tmp_path / "w.jsonl"
    run_cli("gen", "-n", "5", "-o", str(trace))
    capsys.readouterr()
    code = run_cli("run", "-t", str(trace), "--schedule", "easiest-predicted",
                   "-o", str(tmp_path / "out"))
    assert code == 1
    assert "difficulty predictor" in capsys.readouterr().err


def test_run_missing_trace_is_data_error(tmp_path, capsys):
    code = run_cli("run", "-t", str(tmp_path / "nope.jsonl"),
                   "-o", str(tmp_path / "out"))
    assert code == 2


def test_run_rejects_unknown_policy(tmp_path, capsys):
    code = run_cli("run", "-t", "w.jsonl", "--policy", "alchemy",
                   "-o", str(tmp_path / "out"))
    assert code == 1


def test_run_trials_merge(tmp_path, capsys):
    trace = tmp_path / "w.jsonl"
    run_cli("gen", "--preset", "gsm8k-like", "-n", "8", "-o", str(trace))
    code = run_cli("run", "-t", str(trace), "--preset", "gsm8k-like",
                   "--qpm", "3", "--seed", "4", "--trials", "3",
                   "-o", str(tmp_path / "multi"))
    assert code == 0
    summary = json.loads((tmp_path / "multi.json").read_text())
    assert len(summary["trials"]) == 3
    assert {t["seed"] for t in summary["trials"]} == {4, 5, 6}
    for seed in (4, 5, 6):
        assert (tmp_path / f"multi.trial{seed}.csv").exists()


def test_config_file_with_flag_override(tmp_path, capsys):
    trace = tmp_path / "w.jsonl"
    run_cli("gen", "--preset", "gsm8k-like", "-n", "6", "-o", str(trace))
    config = tmp_path / "exp.conf"
    config.write_text("policy=default-sc\nqpm=3\nschedule=fcfs\npreset=gsm8k-like\n")
    capsys.readouterr()
    assert run_cli("run", "-t", str(trace), "--config", str(config),
                   "-o", str(tmp_path / "a")) == 0
    assert "policy=default-sc" in capsys.readouterr().out
    assert run_cli("run", "-t", str(trace), "--config", str(config),
                   "--policy", "dynasor", "-o", str(tmp_path / "b")) == 0
    assert "policy=dynasor" in capsys.readouterr().out


def test_calibrate_tau_prints_percentile(tmp_path, capsys):
    preds = tmp_path / "preds.txt"
    preds.write_text("".join(f"{0.1 * k:.1f}\n" for k in range(1, 11)))
    assert run_cli("calibrate-tau", "-f", str(preds), "--pct", "70") == 0
    assert "0.7" in capsys.readouterr().out
    assert run_cli("calibrate-tau", "-f", str(preds), "--pct", "80") == 0
    assert "0.8" in capsys.readouterr().out


def test_calibrate_tau_empty_file_is_data_error(tmp_path, capsys):
    preds = tmp_path / "empty.txt"
    preds.write_text("")
    assert run_cli("calibrate-tau", "-f", str(preds)) == 2


def test_probe_mlp_correctness_head(tmp_path, capsys):
    rng = random.Random(5)
    weights = random_mlp(rng, 8, [6, 4], 1)
    manifest = tmp_path / "probe.mlp"
    save_weights(weights, manifest)
    acts = np.array([[rng.uniform(-1, 1) for _ in range(8)] for _ in range(4)])
    act_path = tmp_path / "acts.bin"
    acts.astype("<f4").tofile(act_path)
    assert run_cli("probe-mlp", "--weights", str(manifest),
                   "--activations", str(act_path)) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    assert all(0.0 < float(line) < 1.0 for line in lines)


def test_probe_mlp_complexity_head_text_activations(tmp_path, capsys):
    rng = random.Random(6)
    weights = random_mlp(rng, 6, [5, 4], 5, activation="gelu", batchnorm=True)
    manifest = tmp_path / "cx.mlp"
    save_weights(weights, manifest)
    act_path = tmp_path / "acts.txt"
    act_path.write_text("\n".join(
        " ".join(f"{rng.uniform(-1, 1):.4f}" for _ in range(6))
        for _ in range(3)) + "\n")
    out_path = tmp_path / "probs.txt"
    assert run_cli("probe-mlp", "--weights", str(manifest),
                   "--activations", str(act_path), "-o", str(out_path)) == 0
    for line in out_path.read_text().strip().splitlines():
        probs = [float(tok) for tok in line.split(",")]
        assert len(probs) == 5
        assert sum(probs) == pytest.approx(1.0, abs=1e-6)


def test_help_exits_zero(capsys):
    assert run_cli("--help") == 0
    assert run_cli("run", "--help") == 0

import json
import re

import pytest

from gsync.cli import build_parser, main
from gsync.costmodel import ClusterConfig, compute_times
from gsync.profiles import shipped_profile


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_parser_lists_all_commands():
    text = build_parser().format_help()
    for cmd in ("plan", "simulate", "sweep", "bench", "validate"):
        assert cmd in text


def test_plan_mlp_uses_model_parallelism(capsys):
    code, out, err = run(capsys, "plan", "--profile", "mlp", "--world", "16", "--mb", "8")
    assert code == 0
    plan = json.loads(out)
    assert any(entry["group_size"] > 1 for entry in plan["layers"])
    assert "estimated iteration time" in err


def test_plan_single_node_is_pure_compute(capsys):
    code, out, _ = run(capsys, "plan", "--profile", "resnet50", "--world", "1", "--mb", "32")
    assert code == 0
    plan = json.loads(out)
    assert all(entry["group_size"] == 1 for entry in plan["layers"])
    prof = shipped_profile("resnet50")
    c = ClusterConfig(1)
    pure = sum(sum(compute_times(layer, 1, c, 32)) for layer in prof.layers)
    # pooling layers carry no plan entry but do count towards the total
    assert sum(e["est_exposed_s"] for e in plan["layers"]) == 0
    assert plan["total_s"] == pytest.approx(pure, rel=1e-12)


def test_plan_file_feeds_simulate(capsys, tmp_path):
    plan = tmp_path / "plan.json"
    assert run(capsys, "plan", "--profile", "mlp", "--world", "4", "--out", str(plan))[0] == 0
    code, out, _ = run(capsys, "simulate", "--profile", "mlp", "--world", "4", "--plan", str(plan))
    assert code == 0
    assert out.startswith("layer_id,exposed_comm_s,comm_s,compute_s")


def test_simulate_single_node_has_no_exposed_comm(capsys):
    code, out, _ = run(capsys, "simulate", "--profile", "mlp", "--world", "1")
    assert code == 0
    total = out.strip().splitlines()[-1].split(",")
    assert total[0] == "total" and float(total[1]) == 0.0


def test_simulate_is_byte_identical_across_runs(capsys, tmp_path):
    outs = []
    for i in range(2):
        trace = tmp_path / f"t{i}.csv"
        code, out, _ = run(capsys, "simulate", "--profile", "mlp", "--world", "4", "--plan", "2",
                           "--trace", str(trace))
        assert code == 0
        outs.append((out, trace.read_text()))
    assert outs[0] == outs[1]
    assert outs[0][1].splitlines()[0].startswith("time")


def test_simulate_compare_reports_reduction(capsys):
    code, _, err = run(capsys, "simulate", "--profile", "vgg16", "--world", "16", "--mb", "32", "--compare")
    assert code == 0
    factor = float(re.search(r"reduction=([0-9.]+)x", err).group(1))
    assert factor >= 1.3


def test_sweep_single_point(capsys):
    code, out, _ = run(capsys, "sweep", "--profile", "mlp", "--P-list", "1")
    assert code == 0
    rows = out.strip().splitlines()
    assert rows[0] == "P,iter_time_s,efficiency,model_iter_time_s,model_efficiency"
    assert len(rows) == 2 and float(rows[1].split(",")[2]) == 1.0


def test_bench_single_rank(capsys):
    code, out, _ = run(capsys, "bench", "--sizes", "4096,100000", "--reps", "1")
    assert code == 0
    rows = [r.split(",") for r in out.strip().splitlines()[1:]]
    assert [r[0] for r in rows] == ["4096", "100000"]
    assert all(float(r[2]) == 0.0 and r[4] == "True" for r in rows)


def test_bench_four_ranks_int8_prints_bounds(capsys, tmp_path):
    # rank 0 runs in a child process, so its report goes through --out
    report = tmp_path / "bench.csv"
    code, _, _ = run(capsys, "bench", "--spawn", "4", "--wire", "int8", "--sizes", "40000", "--reps", "1",
                     "--out", str(report))
    assert code == 0
    size, _, err, bound, ok = report.read_text().strip().splitlines()[1].split(",")
    assert size == "40000" and ok == "True"
    assert 0 < float(err) <= float(bound)


def test_validate_passes_and_fault_is_named(capsys):
    code, out, _ = run(capsys, "validate")
    assert code == 0 and "all suites passed" in out
    code, out, _ = run(capsys, "validate", "--inject-fault")
    assert code == 1
    assert re.search(r"^collectives\s+FAIL", out, re.M)
    assert "failed: collectives" in out


def test_errors_exit_with_status_two(capsys):
    code, _, err = run(capsys, "simulate", "--profile", "no-such-model")
    assert code == 2 and err.startswith("gsync: error:")
    code, _, err = run(capsys, "simulate", "--profile", "mlp", "--world", "4", "--plan", "3")
    assert code == 2

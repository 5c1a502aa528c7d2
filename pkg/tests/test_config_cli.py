import json

import numpy as np
import pytest

from i2preg.cli import ABLATIONS, ablation_rows, bench_sinkhorn, build_parser, gradcheck_report, main
from i2preg.config import PipelineConfig, config_text, load_config, parse_config_text
from i2preg.errors import DomainError
from i2preg.pipeline import inputs_from_scene, run_pipeline
from i2preg.synth import generate_scene


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_config_round_trip(tmp_path):
    cfg = PipelineConfig(epsilon=0.02, use_cmcf=False, mode="topk", k=2)
    path = tmp_path / "c.txt"
    path.write_text(config_text(cfg))
    assert load_config(path) == cfg


def test_config_overrides_and_comments(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# tuned\nepsilon = 0.1\nsinkhorn-iters = 20  # sweeps\n\nuse_ime = off\n")
    cfg = load_config(path, epsilon=0.3, k=None)
    assert (cfg.epsilon, cfg.sinkhorn_iters, cfg.use_ime, cfg.k) == (0.3, 20, False, 1)


@pytest.mark.parametrize("text", ["nonsense", "unknown_key = 3", "epsilon = abc", "use_ime = maybe"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(DomainError):
        parse_config_text(text)


def test_config_validation():
    with pytest.raises(DomainError):
        PipelineConfig(mode="greedy")
    with pytest.raises(DomainError):
        PipelineConfig(epsilon=0.0)
    with pytest.raises(DomainError):
        PipelineConfig(ice_kernel=4)


def test_defaults_documented():
    cfg = PipelineConfig()
    assert (cfg.ice_kernel, cfg.cmcf_iters, cfg.epsilon, cfg.mode) == (7, 1, 0.05, "ot")


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for name in ("synth", "enhance", "filter", "match", "register", "eval", "gradcheck", "bench-sinkhorn", "ablate"):
        assert name in text


def test_register_noiseless(capsys, tmp_path):
    code, out, _ = run(capsys, "register", "--synth-seed", "3", "--out", str(tmp_path / "r"))
    assert code == 0
    doc = json.loads(out)
    assert doc["metrics"]["registered"] is True
    assert doc["metrics"]["rmse"] < 1e-3
    assert len(doc["pose"]) == 12
    for name in ("pose.txt", "ransac.json", "correspondences.txt", "report.json"):
        assert (tmp_path / "r" / name).exists()
    assert len((tmp_path / "r" / "pose.txt").read_text().split()) == 12


def test_register_byte_stable(capsys):
    _, a, _ = run(capsys, "register", "--synth-seed", "4", "--noise-sigma", "0.3", "--seed", "2")
    _, b, _ = run(capsys, "register", "--synth-seed", "4", "--noise-sigma", "0.3", "--seed", "2")
    assert a == b


def test_register_all_outliers_pose_failure(capsys, tmp_path):
    out_dir = tmp_path / "fail"
    code, out, err = run(capsys, "register", "--synth-seed", "1", "--outlier-fraction", "0.999",
                         "--out", str(out_dir))
    assert code == 4
    doc = json.loads(err)
    assert doc["exit_code"] == 4 and doc["stage"] == "pose"
    assert not (out_dir / "pose.txt").exists()
    assert out == ""


def test_input_error_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "register", "--input", str(tmp_path / "missing"))
    assert code == 2
    assert json.loads(err)["exit_code"] == 2
    code, _, _ = run(capsys, "match")
    assert code == 2


def test_synth_bundle_then_register(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--seed", "5", "--out", str(tmp_path / "b"), "--dtype", "float64")
    assert code == 0 and json.loads(out)["seed"] == 5
    code, out, _ = run(capsys, "register", "--input", str(tmp_path / "b"))
    assert code == 0
    doc = json.loads(out)
    assert doc["metrics"]["rmse"] < 1e-3
    _, direct, _ = run(capsys, "register", "--synth-seed", "5")
    assert json.loads(direct)["pose"] == doc["pose"]


def test_stage_commands(capsys, tmp_path):
    code, out, _ = run(capsys, "enhance", "--synth-seed", "0", "--out", str(tmp_path / "e"))
    assert code == 0 and json.loads(out)["grid"] == [6, 8, 64]
    code, out, _ = run(capsys, "filter", "--synth-seed", "0", "--gain-jitter", "0.5", "--out", str(tmp_path / "f"))
    assert code == 0 and "masked_pairs" in out
    assert (tmp_path / "f" / "diagnostics.json").exists()
    code, out, _ = run(capsys, "match", "--synth-seed", "0", "--mode", "topk", "--k", "2")
    assert code == 0 and len(out.splitlines()) == 1 + 48 * 2


def test_eval_pose_file(capsys, tmp_path):
    run(capsys, "register", "--synth-seed", "2", "--out", str(tmp_path / "r"))
    code, out, _ = run(capsys, "eval", "--synth-seed", "2", "--pose", str(tmp_path / "r" / "pose.txt"))
    assert code == 0
    assert json.loads(out)["registered"] is True


def test_eval_table(capsys):
    code, out, _ = run(capsys, "eval", "--scenes", "2")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split()[:5] == ["scene", "PIR", "IR", "FMR", "RR"]
    assert lines[-1].startswith("mean")


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--instances", "10")
    assert code == 0
    doc = json.loads(out)
    assert doc["circle_loss_max_error"] < 1e-4 and doc["filter_loss_max_error"] < 1e-6
    assert gradcheck_report(3) == gradcheck_report(3)


def test_bench_one_by_one():
    rows = bench_sinkhorn([1], [0.05], [0, 1, 10], instances=2)
    assert rows[0]["violation"][0] == 0.0
    assert rows[0]["converged_gap"] == pytest.approx(0.0, abs=1e-12)


def test_bench_monotone_and_gap():
    rows = bench_sinkhorn([8, 30], [0.01, 0.05], [0, 1, 2, 5, 10, 20], instances=3)
    for r in rows:
        v = r["violation"]
        assert all(b <= a for a, b in zip(v, v[1:]))
        if r["size"] == 8 and r["epsilon"] == 0.01:
            assert r["converged_gap"] < 0.01


def test_bench_command_has_ten_iteration_row(capsys):
    code, out, _ = run(capsys, "bench-sinkhorn", "--sizes", "8", "--epsilons", "0.05", "--iters", "0,10",
                       "--instances", "2")
    assert code == 0
    assert any(line.split()[0] == "10" for line in out.splitlines()[2:])


def test_ablate_deterministic_and_baseline(capsys):
    argv = ["ablate", "--configs", "none,gos", "--scenes", "2", "--copies", "2"]
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    assert a == b
    rows = {line.split()[0]: line.split() for line in a.splitlines()[1:]}
    assert int(rows["gos"][-1]) <= int(rows["none"][-1])
    # the all-off row is the plain baseline pipeline
    base = PipelineConfig().replace(**ABLATIONS["none"])
    ev = [run_pipeline(inputs_from_scene(generate_scene(s)), base).evaluation for s in range(2)]
    args = build_parser().parse_args(["ablate", "--scenes", "2"])
    row = ablation_rows(args, PipelineConfig(), ["none"], range(2))[0]
    assert row["IR"] == pytest.approx(100 * np.mean([e.inlier_ratio for e in ev]))
    assert row["RR"] == pytest.approx(100 * np.mean([e.registered for e in ev]))


def test_ablate_needs_two_configs(capsys):
    code, _, _ = run(capsys, "ablate", "--configs", "all")
    assert code == 2

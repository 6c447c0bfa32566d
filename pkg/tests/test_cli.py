import json

import numpy as np
import pytest

from lcqp_gnn import cli
from lcqp_gnn.core import load_instance


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, out


def read_dir(path):
    """Bytes of every file in ``path`` except manifests, which carry wall times."""
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if "manifest" not in p.name}


@pytest.fixture
def small_data(tmp_path, capsys):
    out = tmp_path / "data"
    code, _ = run(capsys, "gen", "--n", 6, "--m", 3, "--count", 3, "--seed", 4, "--out", out,
                  "--solve", "--T", 4)
    assert code == 0
    return out


class TestGen:
    def test_files_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "d"
        code, stdout = run(capsys, "gen", "--family", "generic", "--n", 20, "--m", 10,
                           "--count", 5, "--seed", 7, "--out", out)
        assert code == 0
        assert json.loads(stdout)["count"] == 5
        names = sorted(p.name for p in out.iterdir())
        assert names == [f"instance_{k:05d}.json" for k in range(5)] + ["manifest.json"]
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "gen" and man["seed"] == 7
        assert {"config", "versions", "wall_time", "outputs"} <= set(man)
        assert len(man["outputs"]) == 5
        inst = load_instance(out / "instance_00000.json")
        assert (inst.n, inst.m) == (30, 10)

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(capsys, "gen", "--n", 8, "--m", 4, "--count", 3, "--seed", 11, "--out", tmp_path / name)
        assert read_dir(tmp_path / "a") == read_dir(tmp_path / "b")

    def test_gzip(self, tmp_path, capsys):
        code, _ = run(capsys, "gen", "--n", 5, "--m", 2, "--out", tmp_path, "--gzip")
        assert code == 0
        assert (tmp_path / "instance_00000.json.gz").exists()


class TestSolve:
    def test_report_on_stdout(self, small_data, capsys):
        code, stdout = run(capsys, "solve", "--instance", small_data / "instance_00000.json")
        assert code == 0
        rep = json.loads(stdout)
        inst = load_instance(small_data / "instance_00000.json")
        np.testing.assert_allclose(rep["x"], inst.x_star, atol=1e-6)

    def test_emit_trajectory_deterministic(self, small_data, tmp_path, capsys):
        f = small_data / "instance_00001.json"
        for name in ("a.json", "b.json"):
            assert run(capsys, "solve", "--instance", f, "--emit-trajectory", tmp_path / name)[0] == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.json.manifest.json").exists()

    def test_missing_file(self, tmp_path, capsys):
        assert run(capsys, "solve", "--instance", tmp_path / "nope.json")[0] == 1


class TestTrainInfer:
    def test_train_deterministic_and_infer(self, small_data, tmp_path, capsys):
        for name in ("a", "b"):
            code, _ = run(capsys, "train", "--mode", "feas", "--data", small_data, "--epochs", 2,
                          "--d", 4, "--L", 1, "--batch-size", 2, "--T", 4,
                          "--model-out", tmp_path / name / "model.json")
            assert code == 0
        assert read_dir(tmp_path / "a") == read_dir(tmp_path / "b")
        assert (tmp_path / "a" / "model.manifest.json").exists()
        code, stdout = run(capsys, "infer", "--model", tmp_path / "a" / "model.json",
                           "--instance", small_data / "instance_00000.json", "--T", 4)
        assert code == 0
        assert "objective" in json.loads(stdout)

    def test_ipm_train_and_eval(self, small_data, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert run(capsys, "train", "--mode", "ipm", "--data", small_data, "--epochs", 1,
                   "--d", 4, "--L", 1, "--T", 4, "--model-out", model)[0] == 0
        code, stdout = run(capsys, "eval", "--model", model, "--data", small_data, "--T", 4,
                           "--csv", tmp_path / "rows.csv")
        assert code == 0
        assert len(json.loads(stdout)["per_instance"]) == 3
        assert len((tmp_path / "rows.csv").read_text().splitlines()) == 4

    def test_mode_mismatch(self, small_data, tmp_path, capsys):
        model = tmp_path / "m.json"
        run(capsys, "train", "--mode", "feas", "--data", small_data, "--epochs", 1, "--d", 4,
            "--L", 1, "--T", 4, "--model-out", model)
        assert run(capsys, "infer", "--model", model, "--mode", "ipm",
                   "--instance", small_data / "instance_00000.json")[0] == 1


class TestVerifySim:
    def test_exit_zero(self, capsys):
        code, stdout = run(capsys, "verify-sim", "--n", 6, "--m", 3, "--trials", 20, "--seed", 1)
        assert code == 0
        rep = json.loads(stdout)
        assert rep["max_deviation"] <= 1e-9 and rep["step_counts_ok"]

    def test_breach_exits_one(self, capsys):
        assert run(capsys, "verify-sim", "--trials", 2, "--seed", 1, "--tol", 0.0)[0] == 1


class TestUsage:
    def test_no_command(self, capsys):
        assert cli.main([]) == 2

    def test_unknown_flag(self, capsys):
        assert cli.main(["gen", "--bogus", "1"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_bad_choice(self, capsys):
        assert cli.main(["gen", "--family", "nope", "--out", "x"]) == 2

    def test_help(self, capsys):
        assert cli.main(["--help"]) == 0


class TestConfig:
    def test_config_sets_and_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 5, "m": 2, "count": 2, "out": str(tmp_path / "o")}))
        code, _ = run(capsys, "gen", "--config", cfg, "--count", 1)
        assert code == 0
        files = [p for p in (tmp_path / "o").iterdir() if p.name.startswith("instance")]
        assert len(files) == 1
        assert load_instance(files[0]).m == 2

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nope": 1}))
        assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_not_an_object(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path)]) == 2

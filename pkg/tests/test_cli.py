import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import pytest

from qsflow import cli

BUNDLED = resources.files("qsflow") / "scenarios" / "qubit_decay.json"

DECAY_KL = {"K": [[0.0, 0.0], [0.0, 0.5]], "L": [[[0.0, 1.0], [0.0, 0.0]]]}


def write(tmp_path: Path, data: dict, name: str = "scenario.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def run(tmp_path: Path, scenario: Path, *extra: str) -> tuple[int, dict | None]:
    out = tmp_path / "out"
    code = cli.main(["run", str(scenario), "--output-dir", str(out), "--quiet", *extra])
    summary = out / "summary.json"
    return code, json.loads(summary.read_text()) if summary.exists() else None


class TestRun:
    def test_bundled_scenario_passes(self, tmp_path):
        code, summary = run(tmp_path, Path(str(BUNDLED)))
        assert code == 0
        assert summary["passed"] and [t["type"] for t in summary["tasks"]] == ["ccp", "trajectories", "semigroup"]
        assert all(t["passed"] for t in summary["tasks"])
        assert (tmp_path / "out" / "01_trajectories.csv").exists()

    def test_indefinite_dissipation_names_classifier(self, tmp_path):
        data = {
            "model": {"kl": {"K": [[0.3, 0.0], [0.0, -0.3]], "L": DECAY_KL["L"]}},
            "tasks": [{"type": "semigroup", "n_slices": 20, "expect_class": "filtering"}],
        }
        code, summary = run(tmp_path, write(tmp_path, data))
        assert code == 1
        failed = [c["name"] for c in summary["tasks"][0]["checks"] if not c["passed"]]
        assert "conservativity_report" in failed

    def test_empty_task_list(self, tmp_path):
        code, summary = run(tmp_path, write(tmp_path, {"name": "empty", "tasks": []}))
        assert code == 0
        assert summary["tasks"] == [] and summary["passed"]

    def test_failure_does_not_stop_later_tasks(self, tmp_path):
        data = {
            "model": {"kl": {"K": [[0.3, 0.0], [0.0, -0.3]], "L": DECAY_KL["L"]}},
            "tasks": [{"type": "semigroup", "n_slices": 20, "expect_class": "filtering"}, {"type": "ccp"}],
        }
        code, summary = run(tmp_path, write(tmp_path, data))
        assert code == 1
        assert len(summary["tasks"]) == 2 and summary["tasks"][1]["passed"]

    def test_all_task_types(self, tmp_path):
        data = {
            "model": {"kl": {"K": [[0.0, 0.0], [0.0, 0.5]], "K_m": [[[0.0, 0.0], [1.0, 0.0]]], "L": DECAY_KL["L"], "L_lm": [[[[1.0, 0.0], [0.0, 1.0]]]]}},
            "grid": {"t_end": 0.5, "n_slices": 50},
            "tasks": [
                {"type": "verify_algebra"},
                {"type": "ccp"},
                {"type": "extract"},
                {"type": "cocycle", "check_unitarity": True, "unitarity_slices": 4},
                {"type": "picard"},
                {"type": "semigroup", "expect_class": "filtering"},
                {"type": "generating_function", "n_slices": 4},
                {"type": "bounds", "xi": 2.0, "zeta": 2.0, "rho": 2.0},
            ],
        }
        code, summary = run(tmp_path, write(tmp_path, data))
        failed = [(t["type"], t["checks"]) for t in summary["tasks"] if not t["passed"]]
        assert code == 0, failed

    def test_model_file_reference(self, tmp_path):
        (tmp_path / "model.json").write_text(json.dumps({"kl": DECAY_KL}))
        data = {"model": {"file": "model.json"}, "tasks": [{"type": "ccp"}]}
        code, _ = run(tmp_path, write(tmp_path, data))
        assert code == 0

    def test_deterministic_csv(self, tmp_path):
        data = {"model": {"kl": DECAY_KL}, "seed": 7, "grid": {"n_slices": 50}, "tasks": [{"type": "trajectories", "n_traj": 40}]}
        path = write(tmp_path, data)
        outs = []
        for k in range(2):
            out = tmp_path / f"o{k}"
            assert cli.main(["run", str(path), "--output-dir", str(out), "--quiet"]) == 0
            outs.append((out / "00_trajectories.csv").read_bytes())
        assert outs[0] == outs[1]
        third = tmp_path / "o3"
        cli.main(["run", str(path), "--output-dir", str(third), "--quiet", "--seed", "8"])
        assert (third / "00_trajectories.csv").read_bytes() != outs[0]

    def test_threads_do_not_change_output(self, tmp_path, monkeypatch):
        data = {"model": {"kl": DECAY_KL}, "seed": 3, "grid": {"n_slices": 20}, "tasks": [{"type": "trajectories", "n_traj": 30}]}
        path = write(tmp_path, data)
        assert cli.main(["run", str(path), "--output-dir", str(tmp_path / "a"), "--quiet"]) == 0
        monkeypatch.setenv("QSFLOW_THREADS", "3")
        assert cli.main(["run", str(path), "--output-dir", str(tmp_path / "b"), "--quiet"]) == 0
        assert (tmp_path / "a" / "00_trajectories.csv").read_bytes() == (tmp_path / "b" / "00_trajectories.csv").read_bytes()
        monkeypatch.setenv("QSFLOW_THREADS", "many")
        assert cli.main(["run", str(path), "--output-dir", str(tmp_path / "c"), "--quiet"]) == 2


class TestValidation:
    def test_missing_file(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "nope.json")]) == 2
        assert cli.main(["describe", str(tmp_path / "nope.json")]) == 2
        assert "path" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert cli.main(["run", str(path)]) == 2

    @pytest.mark.parametrize(
        "data,field",
        [
            ({"grid": {"n_slices": 0}}, "grid.n_slices"),
            ({"seed": -1}, "seed"),
            ({"tasks": [{"type": "teleport"}]}, "tasks[0].type"),
            ({"model": {"kl": DECAY_KL}, "tasks": [{"type": "trajectories", "kind": "levy"}]}, "tasks[0].kind"),
            ({"model": {"kl": DECAY_KL}, "tasks": [{"type": "semigroup", "expect_class": "gentle"}]}, "tasks[0].expect_class"),
            ({"tasks": [{"type": "ccp"}]}, "tasks[0]"),
        ],
    )
    def test_error_names_field(self, tmp_path, capsys, data, field):
        code, summary = run(tmp_path, write(tmp_path, data))
        assert code == 2 and summary is None
        assert field in capsys.readouterr().err

    def test_invalid_later_task_prevents_execution(self, tmp_path):
        data = {"model": {"kl": DECAY_KL}, "tasks": [{"type": "ccp"}, {"type": "picard", "n_slices": 5000}]}
        code, summary = run(tmp_path, write(tmp_path, data))
        assert code == 2 and summary is None
        assert not (tmp_path / "out").exists()

    def test_seed_override_range(self, tmp_path):
        path = write(tmp_path, {"tasks": []})
        assert cli.main(["run", str(path), "--output-dir", str(tmp_path / "o"), "--seed", "-5"]) == 2

    def test_usage_error(self):
        assert cli.main(["frobnicate"]) == 2


class TestDescribe:
    def test_bundled(self, capsys):
        assert cli.main(["describe", str(BUNDLED)]) == 0
        out = capsys.readouterr().out
        assert "3 task(s)" in out
        for label in ("00_ccp", "01_trajectories", "02_semigroup"):
            assert label in out

    def test_oversized_warning(self, tmp_path, capsys):
        data = {"grid": {"n_slices": 20}, "slice": {"n_noise": 12, "trunc": 4}, "tasks": []}
        assert cli.main(["describe", str(write(tmp_path, data))]) == 0
        out = capsys.readouterr().out
        assert "WARNING" in out
        # one system level, 4**(12*20) noise states, 16 bytes per complex entry
        size = cli.lattice_bytes(1, 12, 4, 20)
        assert size == 16 * 4 ** (2 * 240)
        assert f"2^{size.bit_length() - 1}" in out

    def test_small_lattice_no_warning(self, tmp_path, capsys):
        data = {"grid": {"n_slices": 3}, "model": {"kl": DECAY_KL}, "tasks": [{"type": "ccp"}]}
        assert cli.main(["describe", str(write(tmp_path, data))]) == 0
        out = capsys.readouterr().out
        # dimension 2 * 2**3 = 16, so 256 entries of 16 bytes
        assert "WARNING" not in out and "4 KiB" in out

    def test_no_side_effects(self, tmp_path):
        path = write(tmp_path, {"tasks": [{"type": "ccp"}], "model": {"kl": DECAY_KL}})
        before = sorted(tmp_path.iterdir())
        cli.main(["describe", str(path)])
        assert sorted(tmp_path.iterdir()) == before


class TestBounds:
    def test_csv_table(self, capsys):
        assert cli.main(["bounds", "--xi", "2", "--zeta", "2", "--rho", "2", "--points", "3"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "t,bound,convergent"
        assert len(lines) == 4
        # t = 0: ratio 1/2 and q = 1/2 give 1 / (1 - 1/4)
        assert lines[1] == f"0.0,{repr(4 / 3)},True"
        assert lines[-1].endswith("inf,False")

    def test_params_file(self, tmp_path, capsys):
        path = write(tmp_path, {"xi": 1.0, "zeta": 1.0, "rho": 4.0, "sequence": {"kind": "factorial", "q": 1.0}, "t": [0.0, 1.0]}, "p.json")
        assert cli.main(["bounds", str(path)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[1].startswith("0.0,")
        assert float(lines[1].split(",")[1]) == pytest.approx(2.718281828459045, rel=1e-12)

    def test_bad_params(self, capsys):
        assert cli.main(["bounds", "--xi", "-1"]) == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qsflow.cli", "describe", str(BUNDLED)], capture_output=True, text=True)
    assert proc.returncode == 0 and "qubit_decay" in proc.stdout

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from ambs.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, EXIT_RUNTIME, confidence_interval, main
from ambs.trainer import METRICS_COLUMNS

MINIMAL = {"schema": "config-v1", "method": "AMBS+PENL", "total_frames": 320, "eval_episodes": 1,
           "env": {"kind": "grid", "width": 4, "height": 4, "hazards": [[1, 2]],
                   "goals": [[3, 3], [0, 3]], "episode_limit": 40},
           "shield": {"horizon": 3, "lookahead": 3, "epsilon": 0.05},
           "agent": {"horizon": 4, "prefill": 100}}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(MINIMAL))
    return p


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**MINIMAL, "warp": 9}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_unknown_flag_rejected(config_file):
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", str(config_file), "--out", "x", "--turbo"])
    assert info.value.code == 2


def test_train_writes_outputs_with_metrics_header(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--seed", "3", "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(METRICS_COLUMNS)
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 3
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["frames"] == 320


def test_repeated_seed_gives_identical_bytes(config_file, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--config", str(config_file), "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resolved_config_reproduces_run(config_file, tmp_path):
    assert main(["train", "--config", str(config_file), "--seed", "2", "--out", str(tmp_path / "a")]) == 0
    resolved = tmp_path / "a" / "resolved_config.json"
    assert main(["train", "--config", str(resolved), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_runtime_error_exits_3_and_names_phase(tmp_path, capsys, monkeypatch):
    from ambs import trainer

    def broken(self, starts):
        raise FloatingPointError("boom")

    monkeypatch.setattr(trainer.Trainer, "_update_safe", broken)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(MINIMAL))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "phase safe-update" in capsys.readouterr().err


def test_paper_literal_mu_flag(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({**MINIMAL, "method": "LAG"}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o"), "--paper-literal-mu"]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["lagrangian"]["mu_rule"] == "literal"
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["mu_k"] >= 1.0


def test_eval_from_checkpoint(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--episodes", "2"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["episodes"] == 2
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--episodes", "2", "--no-shield"]) == 0
    assert json.loads(capsys.readouterr().out)["interventions"] == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_theory_suite_csv(tmp_path):
    out = tmp_path / "thm2.csv"
    assert main(["theory", "--suite", "thm2", "--instances", "5", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "suite,instance,quantity,bound,pass,note"
    assert len(lines) == 6 and all(line.split(",")[4] == "1" for line in lines[1:])


def test_theory_exits_1_on_failure(monkeypatch, capsys):
    from ambs import theory

    monkeypatch.setattr(theory, "run_suite", lambda *a, **k: [
        theory.SuiteRow("thm2", 0, 0.2, 0.1, False, "forced")])
    assert main(["theory", "--suite", "thm2"]) == EXIT_FAIL
    assert "FAILED thm2[0]" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--points", "3"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "operation,max_rel_error"
    assert {line.split(",")[0] for line in lines[1:]} == {"vanilla", "penl", "plpg", "copt", "safe"}
    assert main(["gradcheck", "--points", "3", "--tolerance", "0"]) == EXIT_FAIL


def _metrics(path, frames, returns):
    rows = [",".join(METRICS_COLUMNS)]
    for f, r in zip(frames, returns):
        rows.append(f"{f},{r},0,0,nan,nan,nan,nan,nan")
    path.write_text("\n".join(rows) + "\n")
    return str(path)


def test_plotdata_constant_series(tmp_path):
    paths = [_metrics(tmp_path / f"m{i}.csv", [5000, 10000, 15000, 20000], [2.0] * 4) for i in range(5)]
    assert main(["plotdata", "--metrics", *paths, "--out", str(tmp_path / "plots")]) == EXIT_OK
    lines = (tmp_path / "plots" / "episode_return.dat").read_text().splitlines()
    assert lines[0] == "# frames mean ci_low ci_high n"
    assert lines[1:] == ["10000 2.0 2.0 2.0 5", "20000 2.0 2.0 2.0 5"]
    assert (tmp_path / "plots" / "cum_violations.dat").is_file()


def test_plotdata_single_input_has_zero_width(tmp_path):
    p = _metrics(tmp_path / "m.csv", [10000], [3.0])
    assert main(["plotdata", "--metrics", p, "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "episode_return.dat").read_text().splitlines()[1] == "10000 3.0 3.0 3.0 1"


def test_plotdata_schema_mismatch_exits_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("frames,return\n1,2\n")
    assert main(["plotdata", "--metrics", str(bad), "--out", str(tmp_path / "p")]) == EXIT_CONFIG


def test_five_seed_interval_uses_t_multiplier():
    values = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    mean, half = confidence_interval(values)
    sem = math.sqrt(2.5) / math.sqrt(5)
    assert mean == 3.0
    assert round(half / sem, 3) == 2.776


def test_sweep_launches_every_method_and_seed(config_file, tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(config_file), "--seeds", "0,1", "--methods",
                 "VANILLA,LAG", "--out", str(out), "--jobs", "2"]) == EXIT_OK
    dirs = sorted(p.name for p in out.iterdir())
    assert dirs == ["LAG_seed0", "LAG_seed1", "VANILLA_seed0", "VANILLA_seed1"]
    summary = json.loads((out / "LAG_seed1" / "resolved_config.json").read_text())
    assert summary["method"] == "LAG" and summary["seed"] == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ambs.cli", "theory", "--suite", "pinsker",
                           "--instances", "3"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0].startswith("suite,instance")


@pytest.mark.parametrize("cmd", [[], ["train"], ["eval"], ["theory"], ["gradcheck"], ["sweep"], ["plotdata"]])
def test_help_renders(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main(cmd + ["--help"])
    assert exc.value.code == 0
    assert "usage: ambs" in capsys.readouterr().out

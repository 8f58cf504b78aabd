import json
import subprocess
import sys

import pytest

from esce.cli import build_parser, main, resolve_config

FAST = ["--outer-iterations", "2", "--steps-per-iteration", "300", "--pool-capacity", "200",
        "--env.chain_length", "6", "--env.corridor", "2", "--env.max_episode_steps", "30",
        "--agent.hidden_sizes", "8", "--esce.hidden_sizes", "8"]


def test_flags_override_file_and_environment(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[experiment]\nmode = semi\noutput_dir = from-file\nseeds = 1\n\n[esce]\nsigma = 0.9\n")
    args = build_parser().parse_args(["run", "--config", str(ini), "--esce.sigma", "0.85", "--seeds", "7, 8"])
    cfg = resolve_config(args, environ={"ESCE_OUTPUT_DIR": "from-env", "ESCE_SEED": "3"})
    assert cfg.mode == "semi"
    assert cfg.esce.sigma == 0.85
    assert cfg.output_dir == "from-env"
    assert cfg.seeds == [7, 8]


def test_run_then_chart_compare_and_oracle(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ESCE_OUTPUT_DIR", str(tmp_path / "a"))
    monkeypatch.setenv("ESCE_SEED", "2")
    assert main(["run", *FAST]) == 3  # budget exhausted before convergence
    assert (tmp_path / "a" / "seed_2" / "metrics.jsonl").exists()

    monkeypatch.setenv("ESCE_OUTPUT_DIR", str(tmp_path / "b"))
    assert main(["run", *FAST, "--mode", "semi"]) == 3

    assert main(["chart", str(tmp_path / "a"), "--metric", "precision_pos", "--metric", "recall_pos",
                 "--out", str(tmp_path / "pr.svg")]) == 0
    assert (tmp_path / "pr.svg").read_text().startswith("<svg")

    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b"), "--table", str(tmp_path / "t.tsv"),
                 "--chart", str(tmp_path / "c.svg")]) == 0
    assert len((tmp_path / "t.tsv").read_text().splitlines()) == 3

    out = tmp_path / "oracle.jsonl"
    assert main(["oracle", "--checkpoint", str(tmp_path / "a" / "seed_2" / "checkpoint.json"), "--greedy",
                 "--out", str(out)]) == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert recs and all(r["success_probability"] >= 1 - 1e-6 for r in recs)
    assert {"state", "t", "flagged"} <= set(recs[0])
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(summary) == {"precision", "recall", "n_flagged", "n_sufficient"}


def test_bad_config_exits_with_configuration_error(tmp_path, capsys):
    assert main(["run", "--mode", "nope", "--output-dir", str(tmp_path / "x")]) == 2
    assert "nope" in capsys.readouterr().err
    assert main(["run", "--agent.workers", "zero"]) == 2


def test_chart_unknown_metric_is_rejected():
    with pytest.raises(SystemExit):
        main(["compare", "a", "b", "--metric", "bogus"])


def test_missing_run_directory(tmp_path):
    assert main(["chart", str(tmp_path / "absent")]) == 2


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "esce.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("run", "compare", "chart", "oracle"):
        assert cmd in out.stdout

import json
import re

import numpy as np
import pytest

from esce import harness, nn
from esce.agent import PolicyNet
from esce.config import ExperimentConfig, apply_override, load_config
from esce.harness import ExitStatus, compare, emit_chart, read_log, read_run, run


def small_cfg(tmp_path, name="run", **overrides):
    cfg = ExperimentConfig()
    settings = {
        "output_dir": str(tmp_path / name),
        "outer_iterations": "3",
        "steps_per_iteration": "600",
        "pool_capacity": "300",
        "env.chain_length": "8",
        "env.corridor": "2",
        "env.max_episode_steps": "40",
        "esce.hidden_sizes": "16",
        "agent.hidden_sizes": "16",
        "stop_on_convergence": "false",
    }
    settings.update({k: str(v) for k, v in overrides.items()})
    for k, v in settings.items():
        apply_override(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("harness")
    cfg = small_cfg(tmp, seeds="0, 1")
    return cfg, run(cfg)


def test_run_writes_all_artefacts(finished_run):
    cfg, result = finished_run
    assert result.status == ExitStatus.BUDGET_EXHAUSTED
    out = result.directory
    for name in ("config.ini", "summary.json", "return_all_seeds.svg"):
        assert (out / name).exists()
    for seed in (0, 1):
        d = out / f"seed_{seed}"
        for name in ("metrics.jsonl", "episodes.jsonl", "checkpoint.json", "return.svg", "precision_recall.svg"):
            assert (d / name).exists(), name
    assert load_config(out / "config.ini") == cfg


def test_metric_records(finished_run):
    cfg, result = finished_run
    log = read_log(result.directory / "seed_0" / "metrics.jsonl")
    assert [r["outer_iteration"] for r in log] == [1, 2, 3]
    esce_fields = {"outer_iteration", "precision_pos", "recall_pos", "recall_neg", "n_ident", "n_suff", "n_pos",
                   "phase2_iters"}
    for rec in log:
        assert esce_fields <= set(rec)
        assert (rec["alpha"], rec["beta"]) == (0.0, 1.0)
        assert "wall_clock" not in rec
    # nothing to score before the extractor has been trained once
    assert log[0]["n_ident"] == 0 and log[1]["n_pos"] > 0


def test_window_statistics_use_completed_episodes(finished_run):
    cfg, result = finished_run
    metrics = read_log(result.directory / "seed_1" / "metrics.jsonl")
    episodes = read_log(result.directory / "seed_1" / "episodes.jsonl")
    assert set(episodes[0]) >= {"episode", "worker", "raw_env_return", "mixed_return", "calibrated_reward_count",
                                "length"}
    for rec in metrics:
        done = [e["raw_env_return"] for e in episodes if e["outer_iteration"] <= rec["outer_iteration"]]
        window = done[-cfg.window:]
        assert rec["episodes"] == len(done)
        assert rec["window_mean_return"] == pytest.approx(np.mean(window))
        assert rec["window_min_return"] == min(window) and rec["window_max_return"] == max(window)


def test_checkpoint_restores_policy(finished_run):
    _, result = finished_run
    nets, meta = nn.load_checkpoint(result.directory / "seed_0" / "checkpoint.json")
    policy = PolicyNet.from_nets(nets["trunk"], nets["policy_head"], nets["value_head"])
    assert meta["seed"] == 0 and meta["iterations"] == 3
    assert "esce" in nets and policy.n_actions == 2


def test_zero_iterations_gives_empty_logs_and_success(tmp_path):
    result = run(small_cfg(tmp_path, outer_iterations=0))
    assert result.status == ExitStatus.SUCCESS
    assert (tmp_path / "run" / "seed_0" / "metrics.jsonl").read_text() == ""


def test_invalid_config_reports_configuration_error(tmp_path):
    result = run(small_cfg(tmp_path, mode="mystery"))
    assert result.status == ExitStatus.CONFIG_ERROR and "mystery" in result.message


def test_unwritable_output_reports_configuration_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = small_cfg(tmp_path)
    cfg.output_dir = str(blocker / "sub")
    assert run(cfg).status == ExitStatus.CONFIG_ERROR


def test_worker_failure_flushes_partial_results(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = harness.WorkerGroup.collect

    def flaky(self, *args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 1:
            raise RuntimeError("all rollout workers failed")
        return real(self, *args, **kwargs)

    monkeypatch.setattr(harness.WorkerGroup, "collect", flaky)
    result = run(small_cfg(tmp_path))
    assert result.status == ExitStatus.WORKER_FAILURE
    assert len(read_log(tmp_path / "run" / "seed_0" / "metrics.jsonl")) == 1
    assert (tmp_path / "run" / "seed_0" / "checkpoint.json").exists()


def test_convergence_stops_early(tmp_path):
    cfg = small_cfg(tmp_path, stop_on_convergence="true", outer_iterations=50, convergence_tol=0.5,
                    convergence_patience=1)
    result = run(cfg)
    assert result.status == ExitStatus.SUCCESS
    assert len(result.seeds[0].history) < 50


def test_converged_rule():
    exp = object.__new__(harness.Experiment)
    exp.cfg = ExperimentConfig(convergence_tol=0.01, convergence_patience=3)
    exp.history = [{"window_mean_return": v} for v in (5.0, 10.0, 10.05, 10.0, 10.09)]
    assert exp.converged()
    exp.history[-1]["window_mean_return"] = 10.2
    assert not exp.converged()
    exp.history = [{"window_mean_return": v} for v in (None, 1.0, 1.0, 1.0)]
    assert not exp.converged()


def test_baseline_learns_unwrapped_chain(tmp_path):
    cfg = small_cfg(tmp_path, outer_iterations=4, steps_per_iteration=2000, **{"env.max_episode_steps": 100})
    hist = run(cfg, write=False).seeds[0].history
    assert hist[-1]["window_mean_return"] > hist[0]["window_mean_return"]


def test_same_seed_same_bytes(tmp_path):
    a = run(small_cfg(tmp_path, "a", mode="semi"))
    b = run(small_cfg(tmp_path, "b", mode="semi"))
    for name in ("metrics.jsonl", "episodes.jsonl"):
        assert (a.directory / "seed_0" / name).read_bytes() == (b.directory / "seed_0" / name).read_bytes()


# ------------------------------------------------------------- analysis


def test_iterations_to_threshold_and_final_return():
    hist = [{"outer_iteration": i, "window_mean_return": v} for i, v in enumerate([None, 1.0, 3.0, 2.0], 1)]
    assert harness.iterations_to_threshold(hist, 2.5) == 3
    assert harness.iterations_to_threshold(hist, 9.0) is None
    assert harness.final_return(hist) == 2.0
    assert harness.final_return([]) is None


def test_compare_run_with_itself(finished_run, tmp_path):
    _, result = finished_run
    rows = compare([result.directory, result.directory], tmp_path / "t.tsv", chart_path=tmp_path / "c.svg")
    assert all(d == 0 for r in rows for d in r["diff_vs_first"])
    header = (tmp_path / "t.tsv").read_text().splitlines()[0].split("\t")
    assert header[0] == "outer_iteration" and len(header) == 5


def test_compare_three_modes_overlay(tmp_path):
    dirs = []
    for mode in ("baseline", "semi", "full"):
        cfg = small_cfg(tmp_path, mode, mode=mode, outer_iterations=2, steps_per_iteration=300)
        dirs.append(run(cfg).directory)
    compare(dirs, tmp_path / "t.tsv", chart_path=tmp_path / "c.svg")
    svg = (tmp_path / "c.svg").read_text()
    assert svg.count("<polyline") == 3
    for mode in ("baseline", "semi", "full"):
        assert f">{mode}</text>" in svg


def test_compare_rejects_mismatched_environments(tmp_path):
    a = run(small_cfg(tmp_path, "a", outer_iterations=1)).directory
    b = run(small_cfg(tmp_path, "b", outer_iterations=1, **{"env.chain_length": 9})).directory
    with pytest.raises(ValueError, match="environment"):
        compare([a, b])
    with pytest.raises(ValueError):
        compare([a])


def test_chart_dual_series(finished_run, tmp_path):
    _, result = finished_run
    logs = read_run(result.directory)
    path = emit_chart(logs, ["precision_pos", "recall_pos"], tmp_path / "pr.svg")
    svg = path.read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    labels = re.findall(r'class="series">([^<]+)<', svg)
    assert "precision_pos seed 0" in labels and "recall_pos mean" in labels
    assert "outer iteration" in svg


def test_chart_single_point_is_a_marker(tmp_path):
    path = emit_chart({0: [{"outer_iteration": 1, "window_mean_return": 2.0}]}, "window_mean_return",
                      tmp_path / "one.svg")
    svg = path.read_text()
    assert "<circle" in svg and "<polyline" not in svg


def test_chart_rejects_unknown_metric_and_empty_log(tmp_path):
    with pytest.raises(ValueError) as info:
        emit_chart({0: [{"outer_iteration": 1}]}, "score", tmp_path / "x.svg")
    assert "window_mean_return" in str(info.value)
    with pytest.raises(ValueError):
        emit_chart({}, "window_mean_return", tmp_path / "x.svg")
    with pytest.raises(ValueError):
        emit_chart({0: []}, "window_mean_return", tmp_path / "x.svg")


def test_oracle_agreement_counts(finished_run):
    cfg, result = finished_run
    from esce.extractor import EsceClassifier

    nets, meta = nn.load_checkpoint(result.directory / "seed_0" / "checkpoint.json")
    policy = PolicyNet.from_nets(nets["trunk"], nets["policy_head"], nets["value_head"])
    esce = EsceClassifier().load_network(nets["esce"])
    out = harness.oracle_agreement(esce, cfg.env, harness.policy_fn(policy, greedy=True))
    assert out["n_states"] == 7 * 40
    assert 0 <= out["precision"] <= 1 and 0 <= out["recall"] <= 1
    assert json.dumps(out)

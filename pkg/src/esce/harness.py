"""The alternating collect / extract loop, run per seed, plus run comparison.

Each outer iteration:

1. rollout workers act with the current policy, receive calibrated rewards
   from the current extractor, update the policy every n steps and push
   finished rounds into the pools, until both main pools are full or the
   iteration's step cap is reached;
2. the collected rounds are scored against the extractor that produced the
   calibrated rewards (real-time precision / recall) and misses and false
   identifications go to the sensitive pools;
3. the extractor is trained (phase one, then phase two);
4. the pools are cleared.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .agent import PolicyNet, RewardMix, WorkerGroup
from .charts import line_chart
from .config import ConfigError, ExperimentConfig, save_config
from .envs import EnvConfig, make_env, optimal_return, success_probabilities
from .extractor import EsceClassifier, round_metrics
from .rounds import PoolSet

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "window_mean_return", "window_min_return", "window_max_return", "precision_pos", "recall_pos",
    "recall_neg", "n_ident", "n_suff", "n_pos", "phase2_iters", "episodes", "env_steps",
)


class ExitStatus(enum.IntEnum):
    SUCCESS = 0
    CONFIG_ERROR = 2
    BUDGET_EXHAUSTED = 3
    WORKER_FAILURE = 4


def _dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def build_extractor(cfg: ExperimentConfig, seed: int) -> EsceClassifier:
    return EsceClassifier(random_state=seed, **dataclasses.asdict(cfg.esce))


def build_policy(cfg: ExperimentConfig, seed: int) -> PolicyNet:
    env = make_env(cfg.env)
    rng = np.random.default_rng([seed, 1])
    return PolicyNet(env.obs_dim, env.n_actions, cfg.agent.hidden_sizes, cfg.agent.activation, rng=rng)


class Experiment:
    """State of one seed's run of the alternating loop."""

    def __init__(self, cfg: ExperimentConfig, seed: int, policy: Optional[PolicyNet] = None,
                 train_policy: bool = True, greedy: bool = False):
        self.cfg = cfg
        self.seed = seed
        self.mix = RewardMix(*cfg.mix)
        self.policy = policy if policy is not None else build_policy(cfg, seed)
        self.optimizer = nn.Optimizer("adam", cfg.agent.learning_rate) if train_policy else None
        self.esce = build_extractor(cfg, seed)
        self.pools = PoolSet(cfg.pool_capacity, cfg.sensitive_capacity)
        a = cfg.agent
        self.workers = WorkerGroup(a.workers, cfg.env, seed, n_steps=a.n_steps, gamma=a.gamma,
                                   entropy_coeff=a.entropy_coeff, value_coeff=a.value_coeff,
                                   max_grad_norm=a.max_grad_norm, greedy=greedy)
        self.iteration = 0
        self.env_steps = 0
        self.episode_count = 0
        self.returns: deque = deque(maxlen=cfg.window)
        self.history: List[dict] = []
        self.episode_log: List[dict] = []
        self.failures: List[str] = []

    def close(self):
        self.workers.close()

    def step(self) -> dict:
        """Run one outer iteration and return its metrics record."""
        cfg = self.cfg
        started = time.perf_counter()
        self.workers.clear_storage()
        esce = self.esce if self.esce.is_trained else None
        res = self.workers.collect(self.policy, self.optimizer, self.pools, esce, self.mix,
                                   cfg.steps_per_iteration, stop=lambda: self.pools.main_full)
        self.failures.extend(res.failures)
        self.env_steps += res.steps
        for ep in res.episodes:
            self.episode_count += 1
            self.returns.append(ep.raw_env_return)
            self.episode_log.append({
                "episode": self.episode_count, "worker": ep.worker, "raw_env_return": ep.raw_env_return,
                "mixed_return": ep.mixed_return, "calibrated_reward_count": ep.calibrated_reward_count,
                "length": ep.length, "outer_iteration": self.iteration + 1,
            })
        if esce is not None and res.rounds:
            flags = esce.flag_rounds(res.rounds)
            metrics = round_metrics(flags, [r.positive for r in res.rounds])
            self.pools.record_sensitive(res.rounds, flags)
        else:
            metrics = round_metrics([], [])
        sizes = self.pools.sizes()
        phase2_iters, phase2_ok, recall_neg, trained = 0, True, 0.0, False
        if len(self.pools.positive) and len(self.pools.negative):
            self.esce.fit_pools(self.pools)
            phase2_iters, phase2_ok = self.esce.phase2_iters_, self.esce.phase2_converged_
            recall_neg = self.esce.negative_recall(self.pools.negative.states())
            trained = True
        self.pools.clear(keep_sensitive=cfg.keep_sensitive)
        self.iteration += 1
        window = list(self.returns)
        record = {
            "seed": self.seed,
            "outer_iteration": self.iteration,
            "mode": cfg.mode,
            "alpha": self.mix.alpha,
            "beta": self.mix.beta,
            "env_steps": self.env_steps,
            "episodes": self.episode_count,
            "completed_in_window": len(window),
            "window_mean_return": float(np.mean(window)) if window else None,
            "window_min_return": float(np.min(window)) if window else None,
            "window_max_return": float(np.max(window)) if window else None,
            "precision_pos": metrics.precision_pos,
            "recall_pos": metrics.recall_pos,
            "recall_neg": recall_neg,
            "n_ident": metrics.n_ident,
            "n_suff": metrics.n_suff,
            "n_pos": metrics.n_pos,
            "phase2_iters": phase2_iters,
            "phase2_converged": phase2_ok,
            "extractor_trained": trained,
            "policy_updates": res.updates,
            "pool_sizes": sizes,
        }
        if cfg.log_wall_clock:
            record["wall_clock"] = time.perf_counter() - started
        self.history.append(record)
        return record

    def converged(self) -> bool:
        p = self.cfg.convergence_patience
        means = [r["window_mean_return"] for r in self.history[-(p + 1):]]
        if len(means) < p + 1 or any(m is None for m in means):
            return False
        tol = self.cfg.convergence_tol
        return all(abs(b - a) <= tol * max(abs(a), 1e-12) for a, b in zip(means[:-1], means[1:]))


@dataclass
class SeedResult:
    seed: int
    status: ExitStatus
    history: List[dict]
    directory: Optional[Path] = None


@dataclass
class RunResult:
    status: ExitStatus
    seeds: List[SeedResult] = field(default_factory=list)
    message: str = ""
    directory: Optional[Path] = None


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None,
             on_record: Optional[Callable[[dict], None]] = None) -> SeedResult:
    exp = Experiment(cfg, seed)
    status = ExitStatus.BUDGET_EXHAUSTED if cfg.outer_iterations else ExitStatus.SUCCESS
    metrics_fh = episodes_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
        episodes_fh = open(out_dir / "episodes.jsonl", "w")
    try:
        for _ in range(cfg.outer_iterations):
            n_logged = len(exp.episode_log)
            record = exp.step()
            if metrics_fh:
                metrics_fh.write(_dumps(record) + "\n")
                metrics_fh.flush()
                for ep in exp.episode_log[n_logged:]:
                    episodes_fh.write(_dumps(ep) + "\n")
            if on_record:
                on_record(record)
            if exp.failures:
                status = ExitStatus.WORKER_FAILURE
            if cfg.stop_on_convergence and exp.converged():
                status = ExitStatus.SUCCESS if not exp.failures else status
                break
    except RuntimeError as exc:
        log.error("seed %d aborted: %s", seed, exc)
        status = ExitStatus.WORKER_FAILURE
    finally:
        exp.close()
        if metrics_fh:
            metrics_fh.close()
            episodes_fh.close()
    if out_dir is not None:
        nets = {"trunk": exp.policy.trunk, "policy_head": exp.policy.policy_head,
                "value_head": exp.policy.value_head}
        if exp.esce.is_trained:
            nets["esce"] = exp.esce.net_
        meta = {"seed": seed, "mode": cfg.mode, "threshold": cfg.esce.threshold,
                "esce_updates": getattr(exp.esce, "n_updates_", 0),
                "iterations": exp.iteration, "env_steps": exp.env_steps}
        nn.save_checkpoint(out_dir / "checkpoint.json", nets, meta)
        if exp.history:
            emit_chart({seed: exp.history}, "window_mean_return", out_dir / "return.svg")
            emit_chart({seed: exp.history}, ["precision_pos", "recall_pos"], out_dir / "precision_recall.svg")
    return SeedResult(seed, status, exp.history, out_dir)


def run(cfg: ExperimentConfig, write=True) -> RunResult:
    """Run every seed of ``cfg``; artefacts go to ``cfg.output_dir`` when ``write``."""
    try:
        cfg.validate()
    except ConfigError as exc:
        return RunResult(ExitStatus.CONFIG_ERROR, message=str(exc))
    out = Path(cfg.output_dir) if write else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.ini")
        except OSError as exc:
            return RunResult(ExitStatus.CONFIG_ERROR, message=f"cannot write to {out}: {exc}")
    seeds = [run_seed(cfg, s, out / f"seed_{s}" if out else None) for s in cfg.seeds]
    statuses = [s.status for s in seeds]
    if ExitStatus.WORKER_FAILURE in statuses:
        status = ExitStatus.WORKER_FAILURE
    elif ExitStatus.BUDGET_EXHAUSTED in statuses:
        status = ExitStatus.BUDGET_EXHAUSTED
    else:
        status = ExitStatus.SUCCESS
    if out is not None and any(s.history for s in seeds):
        emit_chart({s.seed: s.history for s in seeds}, "window_mean_return", out / "return_all_seeds.svg")
        summary = {
            "status": status.name.lower(),
            "mode": cfg.mode,
            "optimal_return": optimal_return(cfg.env),
            "final_window_mean_return": {str(s.seed): final_return(s.history) for s in seeds},
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(status, seeds, directory=out)


# ------------------------------------------------------------------ analysis


def final_return(history: Sequence[dict]) -> Optional[float]:
    for rec in reversed(history):
        if rec.get("window_mean_return") is not None:
            return rec["window_mean_return"]
    return None


def iterations_to_threshold(history: Sequence[dict], threshold: float) -> Optional[int]:
    for rec in history:
        m = rec.get("window_mean_return")
        if m is not None and m >= threshold:
            return rec["outer_iteration"]
    return None


def read_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def read_run(run_dir) -> Dict[int, List[dict]]:
    run_dir = Path(run_dir)
    logs = {}
    for seed_dir in sorted(run_dir.glob("seed_*")):
        if (seed_dir / "metrics.jsonl").exists():
            logs[int(seed_dir.name.split("_", 1)[1])] = read_log(seed_dir / "metrics.jsonl")
    if not logs:
        raise FileNotFoundError(f"no seed logs under {run_dir}")
    return logs


def emit_chart(logs: Dict[int, List[dict]], metric, path, title=None):
    """Per-seed series plus their mean for one or more logged metrics."""
    metrics = [metric] if isinstance(metric, str) else list(metric)
    for m in metrics:
        if m not in METRIC_FIELDS:
            raise ValueError(f"unknown metric {m!r}; valid names: {', '.join(METRIC_FIELDS)}")
    if not logs or not any(logs.values()):
        raise ValueError("cannot chart an empty log")
    series = []
    for m in metrics:
        table = {}
        for seed, hist in sorted(logs.items()):
            xs = [r["outer_iteration"] for r in hist if r.get(m) is not None]
            ys = [r[m] for r in hist if r.get(m) is not None]
            prefix = f"{m} " if len(metrics) > 1 else ""
            series.append((f"{prefix}seed {seed}", xs, ys))
            for x, y in zip(xs, ys):
                table.setdefault(x, []).append(y)
        if len(logs) > 1 and table:
            xs = sorted(table)
            series.append((f"{m} mean" if len(metrics) > 1 else "mean", xs, [float(np.mean(table[x])) for x in xs]))
    return line_chart(series, path, title=title or ", ".join(metrics), xlabel="outer iteration",
                      ylabel=" / ".join(metrics), emphasize="mean")


def _aligned(logs: Dict[int, List[dict]], metric: str):
    table: Dict[int, List[float]] = {}
    for hist in logs.values():
        for r in hist:
            if r.get(metric) is not None:
                table.setdefault(r["outer_iteration"], []).append(float(r[metric]))
    xs = sorted(table)
    mean = np.array([np.mean(table[x]) for x in xs])
    # normal-approximation 95% band over seeds
    half = np.array([1.96 * np.std(table[x], ddof=1) / np.sqrt(len(table[x])) if len(table[x]) > 1 else 0.0
                     for x in xs])
    return xs, mean, half


def compare(run_dirs: Sequence, out_path=None, metric="window_mean_return", chart_path=None):
    """Align runs by outer iteration; write a TSV table and optionally an overlaid chart.

    Returns the table rows as dicts.
    """
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    envs = []
    for d in run_dirs:
        from .config import load_config

        envs.append(dataclasses.asdict(load_config(Path(d) / "config.ini").env))
    for e in envs[1:]:
        a = {k: v for k, v in envs[0].items() if k not in ("seed", "hindsight")}
        b = {k: v for k, v in e.items() if k not in ("seed", "hindsight")}
        if a != b:
            raise ValueError("runs use different environment configurations")
    names = [Path(d).name for d in run_dirs]
    if len(set(names)) != len(names):
        names = [str(d) for d in run_dirs]
    aligned = [_aligned(read_run(d), metric) for d in run_dirs]
    all_x = sorted(set().union(*[set(a[0]) for a in aligned]))
    rows = []
    for x in all_x:
        row = {"outer_iteration": x}
        vals = []
        for name, (xs, mean, half) in zip(names, aligned):
            if x in xs:
                i = xs.index(x)
                row[f"{name}_mean"] = float(mean[i])
                row[f"{name}_ci95"] = float(half[i])
                vals.append(float(mean[i]))
            else:
                row[f"{name}_mean"] = row[f"{name}_ci95"] = None
        if len(vals) == len(names):
            row["diff_vs_first"] = [v - vals[0] for v in vals[1:]]
        rows.append(row)
    if out_path is not None:
        cols = ["outer_iteration"] + [f"{n}_{s}" for n in names for s in ("mean", "ci95")]
        lines = ["\t".join(cols)]
        for r in rows:
            lines.append("\t".join("" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]))
                                   for c in cols))
        Path(out_path).write_text("\n".join(lines) + "\n")
    if chart_path is not None:
        series = [(n, xs, mean) for n, (xs, mean, _) in zip(names, aligned)]
        line_chart(series, chart_path, title=f"{metric} by run", xlabel="outer iteration", ylabel=metric)
    return rows


# ------------------------------------------------------------------ oracle checks


def policy_fn(policy: PolicyNet, greedy=False):
    def fn(X):
        p = policy.probabilities(X)
        if greedy:
            out = np.zeros_like(p)
            out[np.arange(len(p)), p.argmax(axis=1)] = 1.0
            return out
        return p

    return fn


def visited_states(env_config: EnvConfig, policy: PolicyNet, episodes: int, seed: int, greedy=False) -> set:
    """Timed states seen while running ``policy`` for a number of episodes."""
    from .agent import act

    env = make_env(dataclasses.replace(env_config, hindsight=False), seed=seed)
    rng = np.random.default_rng(seed)
    seen = set()
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            seen.add(env.state)
            a, _, _ = act(policy, obs, rng, greedy=greedy)
            res = env.step(a)
            obs, done = res.observation, res.done
    return seen


def oracle_agreement(esce: EsceClassifier, env_config: EnvConfig, policy, eps=1e-6, states=None) -> dict:
    """Precision and recall of the extractor's flags against the exact sufficient set.

    ``policy`` maps observation batches to action probabilities. Only states
    in ``states`` are scored (all enumerable states when None).
    """
    env = make_env(dataclasses.replace(env_config, hindsight=False))
    value = success_probabilities(env, policy)
    pool = list(value) if states is None else [s for s in states if s in value]
    if not pool:
        raise ValueError("no states to score")
    obs = np.stack([env.observe(*s) for s in pool])
    flagged = esce.predict(obs).astype(bool)
    sufficient = np.array([value[s] >= 1.0 - eps for s in pool])
    tp = int((flagged & sufficient).sum())
    return {
        "precision": tp / int(flagged.sum()) if flagged.any() else 0.0,
        "recall": tp / int(sufficient.sum()) if sufficient.any() else 0.0,
        "n_flagged": int(flagged.sum()),
        "n_sufficient": int(sufficient.sum()),
        "n_states": len(pool),
    }

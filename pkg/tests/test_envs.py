import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esce import envs
from esce.envs import (DEATH, EPISODE_END, NEGATIVE, POSITIVE, EnvConfig, EnvSignal, StepResult, hindsight_wrap,
                       make_env, sufficiency_oracle)


def chain(**kw):
    return EnvConfig(**{"env_name": "delayed-chain", **kw})


def grid(**kw):
    return EnvConfig(**{"env_name": "trap-grid", **kw})


def uniform(n_actions):
    return lambda X: np.full((len(X), n_actions), 1.0 / n_actions)


def always(action, n_actions):
    def fn(X):
        out = np.zeros((len(X), n_actions))
        out[:, action] = 1.0
        return out
    return fn


# ------------------------------------------------------------- signals


@pytest.mark.parametrize("kwargs", [
    dict(kind="none", magnitude=1.0),
    dict(kind="positive", magnitude=0.0),
    dict(kind="negative", negative_cause="boredom"),
    dict(kind="positive", magnitude=1.0, negative_cause="death"),
    dict(kind="sideways"),
])
def test_signal_rejects_invalid_combinations(kwargs):
    with pytest.raises(ValueError):
        EnvSignal(**kwargs)


def test_signal_constructors():
    assert envs.positive(2).kind == POSITIVE and envs.positive(2).magnitude == 2
    assert envs.negative(DEATH).negative_cause == DEATH
    assert envs.NULL_SIGNAL.is_null


# ------------------------------------------------------------- reset


def test_chain_reset_starts_at_cell_zero():
    env = make_env(chain(chain_length=10, corridor=3))
    obs = env.reset()
    assert obs.shape == (env.obs_dim,)
    assert obs[0] == 1.0 and obs[1:-1].sum() == 0 and obs[-1] == 0.0


def test_grid_reset_places_agent_at_start():
    cfg = grid(start=(0, 0), goal=(4, 4), traps=((2, 2),))
    env = make_env(cfg)
    obs = env.reset()
    assert env.state == (((0, 0), 0), 0)
    assert obs[env._index[((0, 0), 0)]] == 1.0
    # goal and trap cells are not ordinary positions
    assert ((2, 2), 0) not in env._index and ((4, 4), 0) not in env._index


def test_same_seed_same_reset():
    a = make_env(chain(random_start=True), seed=4)
    b = make_env(chain(random_start=True), seed=4)
    for _ in range(5):
        np.testing.assert_array_equal(a.reset(), b.reset())


@pytest.mark.parametrize("bad", [
    dict(max_episode_steps=0),
    dict(env_name="atari"),
    dict(chain_length=1),
    dict(corridor=0),
    dict(corridor=20),
    dict(env_name="trap-grid", goal=(9, 9)),
    dict(env_name="trap-grid", traps=((0, 0),)),
    dict(env_name="trap-grid", goal_delay=-1),
    dict(goal_reward=0.0),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ValueError):
        make_env(EnvConfig(**bad))


def test_cells_parse_from_strings():
    cfg = EnvConfig(env_name="trap-grid", start="1,1", goal="(3, 4)", traps="0,1; 2,2")
    assert cfg.start == (1, 1) and cfg.goal == (3, 4) and cfg.traps == ((0, 1), (2, 2))


# ------------------------------------------------------------- step


def test_chain_positive_signal_exactly_on_terminal_cell():
    cfg = chain(chain_length=10, corridor=3)
    env = make_env(cfg)
    env.reset()
    kinds = []
    for a in [1] * 7 + [0, 0]:  # enter the corridor at cell 7, then push "left"
        kinds.append(env.step(a).signal.kind)
    # cells 1..7 by moving right, then 8 and the terminal cell 9 regardless of action
    assert kinds == ["none"] * 8 + [POSITIVE]
    assert env.state == (0, 9)


def test_chain_corridor_ignores_action():
    env = make_env(chain(chain_length=10, corridor=3))
    env.reset()
    for _ in range(7):
        env.step(1)
    env.step(0)
    assert env.state[0] == 8


def test_trap_is_death():
    env = make_env(grid(start=(2, 1), goal=(4, 4), traps=((2, 2),)))
    env.reset()
    res = env.step(3)
    assert res.signal.kind == NEGATIVE and res.signal.negative_cause == DEATH and res.done


def test_goal_payout_after_delay():
    env = make_env(grid(start=(4, 3), goal=(4, 4), traps=(), goal_delay=2))
    env.reset()
    r = [env.step(3) for _ in range(3)]
    assert [x.signal.kind for x in r] == ["none", "none", POSITIVE]
    assert [x.env_reward for x in r] == [0.0, 0.0, 1.0]
    assert env.state == (((4, 3), 0), 3)


def test_truncation_is_negative_episode_end():
    env = make_env(chain(max_episode_steps=3))
    env.reset()
    res = [env.step(0) for _ in range(3)]
    assert not res[1].done
    last = res[-1]
    assert last.done and last.signal.kind == NEGATIVE and last.signal.negative_cause == EPISODE_END


def test_positive_on_final_step_stays_positive():
    env = make_env(chain(chain_length=3, corridor=1, max_episode_steps=2))
    env.reset()
    env.step(1)
    res = env.step(1)
    assert res.done and res.signal.kind == POSITIVE and res.env_reward == 1.0


def test_stepping_finished_episode_rejected():
    env = make_env(chain(max_episode_steps=1))
    env.reset()
    env.step(0)
    with pytest.raises(envs.EpisodeFinished):
        env.step(0)


def test_action_out_of_range_rejected():
    env = make_env(chain())
    env.reset()
    with pytest.raises(ValueError):
        env.step(2)


def test_observations_lie_in_unit_interval_and_keep_length():
    rng = np.random.default_rng(0)
    for cfg in (chain(random_start=True), grid()):
        env = make_env(cfg, seed=1)
        obs = env.reset()
        dim = len(obs)
        done = False
        while not done:
            res = env.step(rng.integers(env.n_actions))
            assert len(res.observation) == dim
            assert res.observation.min() >= 0 and res.observation.max() <= 1
            done = res.done


def test_grid_optimal_return():
    cfg = grid(goal_delay=15, max_episode_steps=200)
    # shortest path from (0,0) to (4,4) is 8 moves; one lap is 8 + 15 steps
    assert envs.optimal_return(cfg) == 200 // 23
    assert envs.optimal_return(chain(chain_length=20, max_episode_steps=200)) == 200 // 19


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), name=st.sampled_from(["delayed-chain", "trap-grid"]))
def test_signal_soundness_and_determinism(seed, name):
    cfg = EnvConfig(env_name=name, max_episode_steps=60, random_start=True)
    actions = np.random.default_rng(seed).integers(0, 4, size=60)
    streams = []
    for _ in range(2):
        env = make_env(cfg, seed=seed)
        env.reset()
        out = []
        for a in actions:
            res = env.step(a % env.n_actions)
            out.append(res)
            if res.signal.kind == POSITIVE:
                assert res.env_reward > 0
            if res.signal.negative_cause in (DEATH, EPISODE_END):
                assert res.signal.kind == NEGATIVE
            if res.signal.negative_cause == EPISODE_END:
                assert res.done
            if res.done:
                break
        streams.append(out)
    a, b = streams
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.observation, y.observation)
        assert (x.env_reward, x.signal, x.done) == (y.env_reward, y.signal, y.done)


# ------------------------------------------------------------- hindsight


def _stream(events, length):
    """``events`` maps step (1-based) to (reward, signal)."""
    out = []
    for t in range(1, length + 1):
        r, sig = events.get(t, (0.0, envs.NULL_SIGNAL))
        done = t == length
        if done and sig.is_null:
            sig = envs.negative(EPISODE_END)
        out.append(StepResult(np.zeros(1), r, sig, done))
    return out


def test_hindsight_releases_at_episode_end():
    inner = _stream({3: (1.0, envs.positive(1))}, 10)
    got = [r.env_reward for r in hindsight_wrap(inner)]
    assert got == [0.0] * 9 + [1.0]
    assert [r.signal for r in hindsight_wrap(inner)] == [r.signal for r in inner]


def test_hindsight_releases_alongside_penalty():
    inner = _stream({3: (1.0, envs.positive(1)), 6: (-0.5, envs.negative("penalty", 0.5))}, 10)
    got = [r.env_reward for r in hindsight_wrap(inner)]
    assert got[5] == pytest.approx(0.5)
    assert got[:5] == [0.0] * 5 and got[6:] == [0.0] * 4


def test_hindsight_is_identity_without_positive_rewards():
    inner = _stream({4: (-1.0, envs.negative("penalty", 1))}, 8)
    assert [r.env_reward for r in hindsight_wrap(inner)] == [r.env_reward for r in inner]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hindsight_conserves_episode_return(seed):
    for cfg in (chain(chain_length=6, corridor=2, max_episode_steps=80), grid(goal_delay=1, max_episode_steps=80)):
        plain = make_env(cfg, seed=seed)
        wrapped = make_env(dataclasses.replace(cfg, hindsight=True), seed=seed)
        plain.reset()
        wrapped.reset()
        rng = np.random.default_rng(seed)
        tot_p = tot_w = 0.0
        done = False
        while not done:
            a = rng.integers(plain.n_actions)
            rp, rw = plain.step(a), wrapped.step(a)
            assert rp.signal == rw.signal
            tot_p += rp.env_reward
            tot_w += rw.env_reward
            done = rp.done
        assert tot_w == pytest.approx(tot_p)


# ------------------------------------------------------------- oracle


def test_corridor_cells_are_sufficient_under_any_policy():
    cfg = chain(chain_length=20, corridor=5, max_episode_steps=200)
    for policy in (uniform(2), always(0, 2), always(1, 2)):
        suff = sufficiency_oracle(cfg, policy)
        for pos in range(15, 19):
            # enough steps left to walk the rest of the corridor
            for t in range(0, 200 - (19 - pos) + 1):
                assert (pos, t) in suff
        # too late: truncation arrives first
        assert (15, 199) not in suff


def test_left_policy_makes_nothing_outside_corridor_sufficient():
    suff = sufficiency_oracle(chain(chain_length=20, corridor=5), always(0, 2))
    assert all(pos >= 15 for pos, _ in suff)


def test_random_policy_start_not_sufficient_on_grid():
    cfg = grid()
    suff = sufficiency_oracle(cfg, uniform(4))
    assert (((0, 0), 0), 0) not in suff


def test_deterministic_goal_policy_trajectory_is_sufficient():
    cfg = grid(start=(0, 0), goal=(4, 4), traps=((2, 2),), goal_delay=3, max_episode_steps=40)
    env = make_env(cfg)

    def route(X):
        # down the left edge, then right along the bottom row
        out = np.zeros((len(X), 4))
        for i, x in enumerate(X):
            core = env.core_states()[int(np.argmax(x[:-1]))]
            (r, c), _ = core
            out[i, 1 if r < 4 else 3] = 1.0
        return out

    suff = sufficiency_oracle(env, route, eps=0.0)
    env.reset()
    t_path = []
    while True:
        t_path.append(env.state)
        res = env.step(int(np.argmax(route(env.observe(*env.state)[None, :])[0])))
        if not res.signal.is_null:
            break
    assert t_path and all(s in suff for s in t_path)


def test_oracle_rejects_environment_without_model():
    class Opaque:
        n_actions = 2

    with pytest.raises(envs.NotEnumerable):
        sufficiency_oracle(Opaque(), uniform(2))


@settings(max_examples=20, deadline=None)
@given(e1=st.floats(0, 1), e2=st.floats(0, 1), bias=st.floats(0.05, 0.95))
def test_oracle_is_monotone_in_eps(e1, e2, bias):
    lo, hi = sorted((e1, e2))
    cfg = chain(chain_length=6, corridor=2, max_episode_steps=15)
    policy = lambda X: np.tile([1 - bias, bias], (len(X), 1))  # noqa: E731
    env = make_env(cfg)
    assert sufficiency_oracle(env, policy, lo) <= sufficiency_oracle(env, policy, hi)


def test_success_probability_matches_hand_computation():
    # cells 0, 1 and the terminal 2; cell 1 is already in the corridor.
    # From 0 the agent moves right with prob b, otherwise stays put.
    cfg = chain(chain_length=3, corridor=2, max_episode_steps=3)
    b = 0.4
    value = envs.success_probabilities(make_env(cfg), lambda X: np.tile([1 - b, b], (len(X), 1)))
    assert value[(1, 2)] == 1.0  # last step reaches the goal
    assert value[(0, 2)] == 0.0  # one step left is not enough
    assert value[(0, 1)] == pytest.approx(b)
    assert value[(0, 0)] == pytest.approx(b + (1 - b) * b)

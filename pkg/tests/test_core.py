import json

import numpy as np
import pytest

from rlabm.agents import BernoulliAgent, FixedActionAgent
from rlabm.core import StepResult, run_episode, write_trace
from rlabm.errors import ContractViolation
from rlabm.flu import FluConfig, FluEnv
from rlabm.minority import GameConfig, MinorityGameEnv
from rlabm.rng import RngStream, rng_fork


# RngStream ---------------------------------------------------------------------


def test_same_seed_and_path_give_same_draws():
    a = RngStream(7).fork("x").random(5)
    b = RngStream(7).fork("x").random(5)
    assert np.array_equal(a, b)


def test_fork_twice_from_same_parent_state_is_identical():
    p1, p2 = RngStream(3), RngStream(3)
    assert np.array_equal(rng_fork(p1, "agent-0").random(8), rng_fork(p2, "agent-0").random(8))


def test_sibling_forks_differ():
    p = RngStream(3)
    assert not np.array_equal(p.fork("agent-0").random(8), p.fork("agent-1").random(8))


def test_duplicate_label_is_rejected():
    p = RngStream(1)
    p.fork("a")
    with pytest.raises(ContractViolation):
        p.fork("a")


def test_child_draws_do_not_move_parent():
    ref = RngStream(11).random(10)
    p = RngStream(11)
    child = p.fork("c")
    child.random(1000)
    assert np.array_equal(p.random(10), ref)


def test_fork_does_not_depend_on_parent_position():
    p = RngStream(5)
    p.random(3)
    assert np.array_equal(p.fork("c").random(4), RngStream(5).fork("c").random(4))


def test_counter_counts_calls():
    r = RngStream(0)
    r.random()
    r.integers(0, 3, size=4)
    assert r.counter == 2


# StepResult / env contracts --------------------------------------------------------


def test_step_result_requires_matching_counts():
    with pytest.raises(ContractViolation):
        StepResult([np.zeros(2)], np.zeros(2), False)


def test_reset_is_deterministic():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[10]))
    a = env.reset(7)
    b = env.reset(7)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_mg_observation_is_three_bit_binary():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[10], rl_window=3))
    obs = env.reset(0)
    assert obs[0].shape == (3,)
    assert set(np.unique(obs[0])) <= {0.0, 1.0}


def _all_rl_game(n):
    return MinorityGameEnv(GameConfig(n_agents=n, memory_m=1, rl_agent_ids=list(range(n)), rl_window=1))


def test_mg_three_player_rewards():
    env = _all_rl_game(3)
    env.reset(0)
    assert env.step([0, 0, 1]).rewards.tolist() == [0, 0, 1]


@pytest.mark.parametrize("n", [2, 3])
def test_mg_all_ones_pays_nobody(n):
    env = _all_rl_game(n)
    env.reset(0)
    res = env.step([1] * n)
    assert res.rewards.tolist() == [0] * n
    assert res.summary["minority"] == 0


def test_step_contract_violations():
    env = _all_rl_game(3)
    with pytest.raises(ContractViolation):
        env.step([0, 0, 1])  # before reset
    env.reset(0)
    with pytest.raises(ContractViolation):
        env.step([0, 1])
    with pytest.raises(ContractViolation):
        env.step([0, 1, 2])


def test_done_only_at_horizon_and_step_after_done_fails():
    env = MinorityGameEnv(GameConfig(n_agents=3, memory_m=1, rl_agent_ids=[0, 1, 2], rl_window=1, horizon=2))
    env.reset(0)
    assert not env.step([0, 0, 1]).done
    assert env.step([0, 0, 1]).done
    with pytest.raises(ContractViolation):
        env.step([0, 0, 1])


def test_flu_reset_state():
    env = FluEnv(FluConfig(network={"kind": "ring", "n": 20, "k": 2}, rl_agent_ids=[0]))
    env.reset(0)
    assert env.season == 0
    assert np.all(env.sir_state == 0)
    assert np.all(env.V == 0)


# run_episode ------------------------------------------------------------------------


def test_run_episode_default_only_mg_500_steps():
    env = MinorityGameEnv(GameConfig(n_agents=301, horizon=500))
    trace = run_episode(env, [], 500, seed=1)
    assert len(trace) == 500
    assert len(trace.summaries["attendance"]) == 500


def test_run_episode_horizon_one():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[0]))
    assert len(run_episode(env, [FixedActionAgent(1)], 1, seed=0)) == 1


def test_run_episode_agent_count_mismatch():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[0]))
    with pytest.raises(ContractViolation):
        run_episode(env, [], 5, seed=0)


def test_run_episode_stops_at_done():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[0], horizon=4))
    assert len(run_episode(env, [FixedActionAgent(0)], 10, seed=0)) == 4


def test_reward_bounds_and_observation_shape_stable():
    env = MinorityGameEnv(GameConfig(n_agents=21, rl_agent_ids=[0, 1], horizon=50))
    trace = run_episode(env, [BernoulliAgent(0.5), BernoulliAgent(0.3)], 50, seed=2, record_observations=True)
    assert set(np.unique(trace.rewards)) <= {0.0, 1.0}
    assert all(o.shape == (51, 3) for o in trace.observations)


def test_equal_seeds_give_byte_identical_trace_files(tmp_path):
    env = MinorityGameEnv(GameConfig(n_agents=21, rl_agent_ids=[3], horizon=40))
    for name in ("a", "b"):
        trace = run_episode(env, [BernoulliAgent(0.5)], 40, seed=9)
        write_trace(trace, tmp_path, name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_trace_replay_from_recorded_seed(tmp_path):
    env = MinorityGameEnv(GameConfig(n_agents=21, rl_agent_ids=[3], horizon=30))
    trace = run_episode(env, [BernoulliAgent(0.5)], 30, seed=4)
    write_trace(trace, tmp_path)
    manifest = json.loads((tmp_path / "trace.json").read_text())
    again = run_episode(MinorityGameEnv(GameConfig(**{k: v for k, v in manifest["config"].items() if k != "env"})),
                        [BernoulliAgent(0.5)], 30, seed=manifest["seeds"]["episode"])
    assert np.array_equal(again.actions, trace.actions)
    assert np.array_equal(again.summaries["attendance"], trace.summaries["attendance"])


def test_trace_csv_columns(tmp_path):
    env = MinorityGameEnv(GameConfig(n_agents=21, rl_agent_ids=[3, 4], horizon=5))
    trace = run_episode(env, [FixedActionAgent(0), FixedActionAgent(1)], 5, seed=0)
    _, csv_path = write_trace(trace, tmp_path)
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header[:5] == ["step", "action_0", "action_1", "reward_0", "reward_1"]
    assert {"attendance", "minority", "tie"} <= set(header)

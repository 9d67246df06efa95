import numpy as np
import pytest
from scipy.stats import chisquare

from rlabm.agents import BernoulliAgent
from rlabm.core import run_episode
from rlabm.errors import ContractViolation
from rlabm.minority import (
    BasicAgent,
    BasicPopulation,
    GameConfig,
    HistoryWindow,
    MinorityGameEnv,
    StrategyTable,
    draw_strategy_book,
    find_cycle,
    history_index,
    matches_pattern,
    minority_outcome,
    mg_reward,
    mg_rl_observation,
    mirror_tables,
    select_basic_action,
    update_scores,
)
from rlabm.rng import RngStream


# strategy books ------------------------------------------------------------------


def test_m1_k1_table_is_uniform_over_four_tables():
    r = RngStream(0)
    codes = [history_index(draw_strategy_book(1, 1, r)[0].actions) for _ in range(10_000)]
    counts = np.bincount(codes, minlength=4)
    assert chisquare(counts).pvalue > 1e-3


def test_table_shapes_and_zero_scores():
    book = draw_strategy_book(2, 3, RngStream(1))
    assert len(book) == 3
    assert all(t.actions.shape == (4,) and t.score == 0 for t in book)


def test_duplicates_are_allowed():
    # only four distinct m=1 tables exist, so ten draws must repeat
    book = draw_strategy_book(1, 10, RngStream(2))
    assert len({t.actions.tobytes() for t in book}) < 10


def test_book_contract():
    with pytest.raises(ContractViolation):
        draw_strategy_book(0, 2, RngStream(0))


def test_config_invariants():
    with pytest.raises(ContractViolation):
        GameConfig(n_agents=1)
    with pytest.raises(ContractViolation):
        GameConfig(rl_window=0)
    with pytest.raises(ContractViolation):
        GameConfig(n_agents=5, rl_agent_ids=[5])
    assert GameConfig(memory_m=2, rl_window=6).window == 6


# outcome / reward --------------------------------------------------------------------


def test_minority_examples():
    assert minority_outcome([0, 0, 1]) == (1, False)
    assert minority_outcome([1, 1, 1, 1]) == (0, False)
    with pytest.raises(ContractViolation):
        minority_outcome([1])


def test_tie_uses_coin_and_both_sides_occur():
    seen = {minority_outcome([0, 0, 1, 1], RngStream(s))[0] for s in range(20)}
    assert seen == {0, 1}
    assert minority_outcome([0, 1], RngStream(0))[1] is True


def test_reward_examples():
    assert mg_reward(1, 1, False) == 1
    assert mg_reward(0, 1, False) == 0
    assert mg_reward(1, 1, True) == 0


def test_tie_pays_nobody_in_env():
    env = MinorityGameEnv(GameConfig(n_agents=4, memory_m=1, rl_agent_ids=[0, 1, 2, 3], rl_window=1))
    env.reset(0)
    res = env.step([0, 0, 1, 1])
    assert res.summary["tie"] == 1
    assert res.rewards.sum() == 0


# selection / scoring ------------------------------------------------------------------


def _agent(tables, scores):
    return BasicAgent([StrategyTable(np.array(t, dtype=np.uint8), s) for t, s in zip(tables, scores)])


def test_single_table_always_plays_its_entry():
    a = _agent([[0, 1, 1, 0]], [3])
    for bits in ([0, 0], [1, 0], [0, 1], [1, 1]):
        h = HistoryWindow(bits)
        assert select_basic_action(a, h) == a.tables[0].actions[history_index(bits)]


def test_highest_score_wins_and_ties_go_to_lowest_index():
    h = HistoryWindow([1, 0])  # index 1
    assert select_basic_action(_agent([[0, 1, 0, 0], [0, 0, 0, 0]], [5, 2]), h) == 1
    assert select_basic_action(_agent([[0, 1, 0, 0], [0, 0, 0, 0]], [2, 5]), h) == 0
    assert select_basic_action(_agent([[0, 0, 0, 0], [1, 1, 1, 1]], [4, 4]), h) == 0


def test_short_history_is_rejected():
    with pytest.raises(ContractViolation):
        select_basic_action(_agent([[0, 1, 0, 1]], [0]), HistoryWindow([1]), m=2)


def test_all_tables_prescribing_minority_gain_one():
    agents = [_agent([[1, 1], [1, 1]], [0, 2]), _agent([[1, 1]], [7])]
    update_scores(agents, 1, HistoryWindow([0]), 1)
    assert [a.scores for a in agents] == [[1, 3], [8]]


def test_vectorised_population_matches_per_agent_selection():
    rng = RngStream(3)
    agents = [_agent([t.actions for t in draw_strategy_book(2, 3, rng.fork(f"a{i}"))], rng.integers(0, 4, 3)) for i in range(25)]
    pop = BasicPopulation.from_agents(agents)
    for bits in ([0, 0], [1, 0], [0, 1], [1, 1]):
        h = HistoryWindow(bits)
        expect = [select_basic_action(a, h) for a in agents]
        assert pop.actions(h.index(2)).tolist() == expect


def test_replay_oracle_reproduces_scores():
    """Re-score every table naively from the recorded winners and pre-step histories."""
    cfg = GameConfig(n_agents=31, memory_m=2, strategies_k=3, horizon=200)
    env = MinorityGameEnv(cfg)
    env.reset(5)
    tables = env.population.tables.copy()
    history = list(env.history.bits)
    oracle = np.zeros(tables.shape[:2], dtype=np.int64)
    for _ in range(200):
        pre = history[:2]
        res = env.step([])
        w = res.summary["minority"]
        idx = pre[0] + 2 * pre[1]
        for i in range(tables.shape[0]):
            for j in range(tables.shape[1]):
                oracle[i, j] += int(tables[i, j, idx] == w)
        history = [w] + history[:-1]
    assert np.array_equal(env.population.scores, oracle)
    assert env.population.scores.max() <= 200
    assert np.all(env.population.scores >= 0)


def test_winner_count_equals_minority_size():
    cfg = GameConfig(n_agents=21, rl_agent_ids=[0, 1, 2], horizon=100)
    trace = run_episode(MinorityGameEnv(cfg), [BernoulliAgent(0.5)] * 3, 100, seed=1)
    for t in range(100):
        ones = trace.summaries["attendance"][t]
        minority_size = ones if trace.summaries["minority"][t] == 1 else 21 - ones
        assert minority_size < 21 / 2
        rl_wins = trace.rewards[t].sum()
        basic_wins = trace.summaries["basic_mean_reward"][t] * 18
        assert rl_wins + basic_wins == pytest.approx(minority_size)


# observation -----------------------------------------------------------------------


def test_observation_newest_first():
    h = HistoryWindow([0, 0, 0])
    for w in (1, 0, 1):
        h.push(w)
    assert mg_rl_observation(h, 3).tolist() == [1.0, 0.0, 1.0]


def test_observation_length_five_and_constant():
    env = MinorityGameEnv(GameConfig(n_agents=11, rl_agent_ids=[0], rl_window=5, horizon=20))
    trace = run_episode(env, [BernoulliAgent(0.5)], 20, seed=0, record_observations=True)
    assert trace.observations[0].shape == (21, 5)
    # each observation is the previous one shifted right with the new winner in front
    obs = trace.observations[0]
    for t in range(20):
        assert obs[t + 1][0] == trace.summaries["minority"][t]
        assert np.array_equal(obs[t + 1][1:], obs[t][:-1])


# mirror / periodicity --------------------------------------------------------------


def test_mirror_tables_is_an_involution():
    t = RngStream(0).integers(0, 2, size=(5, 2, 8)).astype(np.uint8)
    assert np.array_equal(mirror_tables(mirror_tables(t)), t)


@pytest.mark.parametrize("seed", range(5))
def test_mirrored_game_is_exact_bit_flip(seed):
    base = GameConfig(n_agents=101, horizon=300)
    a = run_episode(MinorityGameEnv(base), [], 300, seed=seed)
    b = run_episode(MinorityGameEnv(GameConfig(**{**base.to_dict(), "mirror": True})), [], 300, seed=seed)
    assert np.array_equal(b.summaries["minority"], 1 - a.summaries["minority"])
    assert np.array_equal(b.summaries["attendance"], 101 - a.summaries["attendance"])


@pytest.mark.parametrize("seed", range(10))
def test_default_game_cycles_quickly(seed):
    m = 2
    info = find_cycle(GameConfig(n_agents=301, memory_m=m, strategies_k=2), seed, max_steps=2 * 2 ** (m + 3))
    assert info is not None
    assert info.period >= 1


def test_pattern_matching_up_to_rotation_and_relabel():
    pat = [1, 1, 1, 0, 0, 0, 1, 0]
    assert matches_pattern(pat[3:] + pat[:3], pat)
    assert matches_pattern([1 - b for b in pat], pat)
    assert not matches_pattern([1, 0] * 4, pat)


def test_find_cycle_rejects_rl_players():
    with pytest.raises(ContractViolation):
        find_cycle(GameConfig(n_agents=11, rl_agent_ids=[0]), 0)

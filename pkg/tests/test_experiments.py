import json

import numpy as np
import pytest

from rlabm.errors import ConfigError, ContractViolation
from rlabm.experiments import (
    EXPERIMENTS,
    ExperimentSpec,
    MetricsTable,
    degree_quartile_pools,
    detect_period,
    load_spec,
    max_off_diagonal,
    mean_ci,
    null_sync_band,
    rolling_mean,
    run_experiment,
    sync_correlation,
    write_run,
)
from rlabm.nn import load_bundle
from rlabm.rng import RngStream

# tiny schedules so that every experiment runs in about a second
SMALL_FLU_ENV = {
    "network": {"kind": "poisson", "n": 200, "mean": 6, "lambda": 0.5},
    "burn_in": {"window": 10, "tol": float("inf"), "max": 50},
}
SMALL = {
    "mg_single_fixed": {"env": {"n_agents": 31}, "training": {"epochs": 3, "episode_length": 40},
                        "evaluation": {"episode_length": 40}},
    "mg_generalization": {"env": {"n_agents": 31}, "training": {"epochs": 3, "episode_length": 40},
                          "evaluation": {"episode_length": 40, "n_populations": 4}},
    "mg_resampled": {"env": {"n_agents": 31}, "training": {"epochs": 6, "episode_length": 40},
                     "evaluation": {"rolling_window": 2}},
    "mg_multi": {"training": {"epochs": 3, "episode_length": 30}, "evaluation": {"episodes": 2, "episode_length": 30}},
    "flu_single": {"env": SMALL_FLU_ENV, "training": {"iterations": 3, "seasons_per_iteration": 4},
                   "evaluation": {"seasons": 10}},
    "flu_degree": {"env": {**SMALL_FLU_ENV, "ensemble_size": 4}, "training": {"iterations": 3, "seasons_per_iteration": 4},
                   "evaluation": {"seasons": 10, "sync_replicates": 2, "null_replicates": 5}},
}


def small_spec(name, seeds=(1, 2), **kw):
    return ExperimentSpec.from_dict({"experiment": name, "seeds": list(seeds), **SMALL[name], **kw})


# statistics helpers -----------------------------------------------------------------


def test_rolling_mean_examples():
    assert np.allclose(rolling_mean([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert np.array_equal(rolling_mean([4, 5, 6], 1), [4, 5, 6])
    assert np.allclose(rolling_mean([0.7] * 30, 20), 0.7)
    assert len(rolling_mean([1, 2], 3)) == 0
    with pytest.raises(ContractViolation):
        rolling_mean([1], 0)


def test_mean_ci_matches_scipy():
    from scipy import stats

    x = np.array([0.1, 0.3, 0.2, 0.5, 0.4])
    m, lo, hi = mean_ci(x)
    ref = stats.t.interval(0.95, len(x) - 1, loc=x.mean(), scale=stats.sem(x))
    assert m == pytest.approx(x.mean())
    assert (lo, hi) == pytest.approx(ref)


def test_sync_correlation_properties():
    rng = np.random.default_rng(0)
    a = (rng.random((100, 5)) < 0.5).astype(int)
    a[:, 1] = a[:, 0]
    a[:, 2] = 1 - a[:, 0]
    a[:, 4] = 1  # constant
    c = sync_correlation(a)
    assert np.allclose(np.diag(c), 1.0)
    assert np.allclose(c, c.T)
    assert c[0, 1] == pytest.approx(1.0)
    assert c[0, 2] == pytest.approx(-1.0)
    assert np.all(c[4, :4] == 0)
    sub = sync_correlation(a, ensemble=[0, 3])
    assert sub.shape == (2, 2) and sub[0, 1] == pytest.approx(c[0, 3])
    with pytest.raises(ContractViolation):
        sync_correlation(a[:1])


def test_sync_correlation_matches_numpy():
    rng = np.random.default_rng(1)
    a = (rng.random((60, 4)) < 0.3).astype(float)
    assert np.allclose(sync_correlation(a), np.corrcoef(a.T))


def test_independent_policies_stay_inside_null_band():
    """Independent coin-flip agents, 100 seasons, averaged over 20 replicates."""
    rng = np.random.default_rng(2)
    vals = [sync_correlation([rng.random((100, 2)) < 0.5 for _ in range(20)])[0, 1] for _ in range(400)]
    assert np.quantile(np.abs(vals), 0.95) <= 0.1


def test_null_band_shrinks_with_replicates():
    rates = np.full(6, 0.4)
    wide = null_sync_band(rates, 100, 1, 100, RngStream(0))
    narrow = null_sync_band(rates, 100, 20, 100, RngStream(0))
    assert narrow < wide
    assert 0 < narrow < 0.15


def test_max_off_diagonal():
    c = np.array([[1.0, -0.3, 0.1], [-0.3, 1.0, 0.2], [0.1, 0.2, 1.0]])
    assert max_off_diagonal(c) == pytest.approx(0.3)


def test_detect_period():
    assert detect_period([1, 1, 1, 0, 0, 0, 1, 0] * 10) == 8
    assert detect_period([3] * 20) == 1
    assert detect_period(list(range(50))) == 0


def test_degree_quartile_pools():
    deg = np.array([0, 1, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
    low, high = degree_quartile_pools(deg)
    q1, q3 = np.quantile(deg, [0.25, 0.75])
    assert np.all(deg[low] <= q1) and np.all(deg[low] > 0)
    assert np.all(deg[high] >= q3)


# metrics table -------------------------------------------------------------------------


def test_metrics_table_round_trip(tmp_path):
    t = MetricsTable("r1")
    t.extend(0, "win", [0.5, 0.25, 1 / 3])
    t.add(1, 7, "x", 2.0)
    path = tmp_path / "m.csv"
    t.write_csv(path)
    back = MetricsTable.read_csv(path)
    assert back.rows == t.rows
    assert back.metrics() == ["win", "x"]
    steps, vals = back.series("win", 0)
    assert steps.tolist() == [0, 1, 2] and vals[2] == 1 / 3


# spec validation ----------------------------------------------------------------------


@pytest.mark.parametrize(
    "raw",
    [
        {"experiment": "mg_single_fixed"},
        {"experiment": "mg_single_fixed", "seeds": []},
        {"experiment": "mg_single_fixed", "seeds": ["1"]},
        {"experiment": "mg_single_fixed", "seeds": [True]},
        {"experiment": "nope", "seeds": [1]},
        {"experiment": "mg_single_fixed", "seeds": [1], "colour": "red"},
        {"experiment": "mg_single_fixed", "seeds": [1], "schema_version": 2},
        {"experiment": "mg_single_fixed", "seeds": [1], "env": {"n_agents": 1}},
        {"experiment": "mg_single_fixed", "seeds": [1], "training": {"epochs": 0}},
        {"experiment": "mg_single_fixed", "seeds": [1], "env": []},
        {"experiment": "flu_single", "seeds": [1], "env": {"transmission": {"efficacy": 2.0}}},
        {"experiment": "flu_single", "seeds": [1], "env": {"behavior": {"omega_pe": 0.9}}},
        {"experiment": "mg_single_fixed", "seeds": [1], "agents": {"lr_actor": "fast"}},
        {"experiment": "mg_single_fixed", "seeds": [1], "env": {"memory": 2}},
        {"experiment": "mg_single_fixed", "seeds": [1], "env": {"network_path": "g.csv"}},
        {"experiment": "flu_single", "seeds": [1], "evaluation": {"n_populations": 5}},
    ],
)
def test_bad_specs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        ExperimentSpec.from_dict(raw)


def test_defaults_are_filled_and_round_trip():
    s = ExperimentSpec.from_dict({"experiment": "mg_single_fixed", "seeds": [3], "env": {"rl_window": 5}})
    assert s.env["n_agents"] == 301 and s.env["rl_window"] == 5
    assert s.training == {"epochs": 400, "episode_length": 500}
    assert ExperimentSpec.from_dict(s.to_dict()) == s


def test_load_spec_reports_bad_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_spec(p)


# experiment runs -------------------------------------------------------------------


EXPECTED_METRICS = {
    "mg_single_fixed": {"train_win_rate", "untrained_win_rate", "eval_win_rate", "tie_degenerate", "attendance_period"},
    "mg_generalization": {"training_win_rate", "mirror_win_rate", "pop_win_rate", "pop_total_reward", "pop_tie_degenerate"},
    "mg_resampled": {"train_win_rate", "tie_degenerate", "rolling_win_rate"},
    "mg_multi": {"pre_reward_rl", "post_reward_rl", "improvement_rl", "rl_minus_default_post", "train_reward_rl"},
    "flu_single": {"pre_uninfected_rate", "post_uninfected_rate", "default_uninfected_rate", "advantage_pp"},
    "flu_degree": {"low_improvement", "high_improvement", "low_sync_max_abs_corr", "high_sync_null_q95"},
}


@pytest.mark.parametrize("name", sorted(EXPERIMENTS))
def test_small_run_emits_metrics_and_is_deterministic(name, tmp_path):
    spec = small_spec(name)
    a = write_run(spec, run_experiment(spec), tmp_path / "a")
    b = write_run(spec, run_experiment(spec), tmp_path / "b")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "policy.bin").read_bytes() == (b / "policy.bin").read_bytes()
    table = MetricsTable.read_csv(a / "metrics.csv")
    assert EXPECTED_METRICS[name] <= set(table.metrics())
    assert table.trials() == [0, 1]
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["spec"]["seeds"] == [1, 2]
    assert manifest["spec"]["experiment"] == name
    assert (a / "trace.csv").is_file()
    assert load_bundle(a / "policy.bin")


def test_different_seeds_differ():
    x = run_experiment(small_spec("mg_single_fixed", seeds=[1])).metrics.values("train_win_rate")
    y = run_experiment(small_spec("mg_single_fixed", seeds=[2])).metrics.values("train_win_rate")
    assert not np.array_equal(x, y)


def test_trial_results_do_not_depend_on_other_trials():
    both = run_experiment(small_spec("mg_resampled", seeds=[4, 5])).metrics
    alone = run_experiment(small_spec("mg_resampled", seeds=[5])).metrics
    assert np.array_equal(both.values("train_win_rate", 1), alone.values("train_win_rate", 0))


def test_generalization_loads_saved_policy(tmp_path):
    spec = small_spec("mg_single_fixed", seeds=[1])
    run_dir = write_run(spec, run_experiment(spec), tmp_path)
    loaded = run_experiment(small_spec("mg_generalization", seeds=[1], agents={"policy_path": str(run_dir / "policy.bin")}))
    retrained = run_experiment(small_spec("mg_generalization", seeds=[1]))
    # the bundle holds the same actor the in-place trainer produces
    for metric in ("training_win_rate", "mirror_win_rate", "pop_win_rate"):
        assert np.array_equal(loaded.metrics.values(metric), retrained.metrics.values(metric))
    assert len(loaded.metrics.values("pop_win_rate")) == 4


def test_rewards_are_rates():
    m = run_experiment(small_spec("mg_multi")).metrics
    for name in m.metrics():
        if name.startswith(("pre_reward", "post_reward", "train_reward")):
            v = m.values(name)
            assert np.all((v >= 0) & (v <= 1))


def test_outdir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("RLABM_OUTDIR", str(tmp_path / "env-out"))
    spec = small_spec("mg_single_fixed", seeds=[1])
    run_dir = write_run(spec, run_experiment(spec))
    assert run_dir.parent == tmp_path / "env-out"

"""Config-driven experiments.

An :class:`ExperimentSpec` names one experiment, its environment, learners,
schedules and explicit seeds (one trial per seed). Every experiment function
is a pure function of the spec and returns an :class:`ExperimentResult`, which
:func:`write_run` lays out as ``<outdir>/<run-id>/{manifest.json, metrics.csv,
trace.csv, policy.bin}``.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import __version__
from .agents import PolicyAgent, buffer_from_trace, joint_buffers_from_trace, make_policy
from .core import EpisodeTrace, continue_episode, write_trace
from .errors import ConfigError, ContractViolation
from .flu import FluConfig, FluEnv, burn_in
from .minority import GameConfig, MinorityGameEnv
from .nn import MlpParams, init_mlp, load_bundle, save_bundle
from .rl import (
    TrainConfig,
    actor_critic_update,
    mac_train_step,
    reinforce_baseline_update,
    reinforce_update,
)
from .rng import RngStream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ROLLING_WINDOW = 20


# Specs and metric tables ---------------------------------------------------------------


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


_AGENT_DEFAULTS = {"hidden": [20, 20, 20, 20], "gamma": 0.9, "lookahead": 5}

DEFAULTS: dict[str, dict] = {
    "mg_single_fixed": {
        "env": {"n_agents": 301, "memory_m": 2, "strategies_k": 2, "rl_window": 3},
        "agents": {**_AGENT_DEFAULTS, "algorithm": "reinforce", "lr_actor": 5e-4, "lr_critic": 1e-4},
        "training": {"epochs": 400, "episode_length": 500},
        "evaluation": {"episode_length": 500, "greedy": False},
    },
    "mg_generalization": {
        "env": {"n_agents": 301, "memory_m": 2, "strategies_k": 2, "rl_window": 3},
        "agents": {**_AGENT_DEFAULTS, "algorithm": "reinforce", "lr_actor": 5e-4, "lr_critic": 1e-4, "policy_path": None},
        "training": {"epochs": 400, "episode_length": 500},
        "evaluation": {"episode_length": 500, "greedy": False, "n_populations": 100},
    },
    "mg_resampled": {
        "env": {"n_agents": 301, "memory_m": 2, "strategies_k": 2, "rl_window": 3},
        "agents": {**_AGENT_DEFAULTS, "algorithm": "reinforce_baseline", "lr_actor": 5e-4, "lr_critic": 5e-5},
        "training": {"epochs": 1000, "episode_length": 500},
        "evaluation": {"rolling_window": ROLLING_WINDOW},
    },
    "mg_multi": {
        "env": {"n_agents": 10, "memory_m": 3, "strategies_k": 4, "rl_window": 3, "n_rl": 3},
        "agents": {**_AGENT_DEFAULTS, "algorithm": "mac", "lr_actor": 1e-3, "lr_q": 1e-4},
        "training": {"epochs": 601, "episode_length": 200},
        "evaluation": {"episodes": 10, "episode_length": 200},
    },
    "flu_single": {
        "env": {
            "network": {"kind": "powerlaw", "n": 2000, "exponent": 2.5, "kmin": 3, "kmax": 60, "lambda": 0.5},
            "network_seed": None,
            "transmission": {},
            "behavior": {},
            "burn_in": {"window": 50, "tol": 0.01, "max": 2000},
        },
        "agents": {**_AGENT_DEFAULTS, "algorithm": "actor_critic", "lr_actor": 1e-3, "lr_critic": 1e-3},
        "training": {"iterations": 750, "seasons_per_iteration": 10},
        "evaluation": {"seasons": 100},
    },
    "flu_degree": {
        "env": {
            "network": {"kind": "powerlaw", "n": 2000, "exponent": 2.5, "kmin": 3, "kmax": 60, "lambda": 0.5},
            "network_seed": None,
            "transmission": {},
            "behavior": {},
            "burn_in": {"window": 50, "tol": 0.01, "max": 2000},
            "ensemble_size": 40,
        },
        "agents": {**_AGENT_DEFAULTS, "algorithm": "mac", "lr_actor": 1e-3, "lr_q": 1e-4},
        "training": {"iterations": 1500, "seasons_per_iteration": 5},
        "evaluation": {"seasons": 100, "sync_replicates": 20, "null_replicates": 200},
    },
}

_OPTIONAL_KEYS = {
    "agents": {"algorithm", "lr_actor", "lr_critic", "lr_q"},
    "env_mg": {"rl_agent_ids"},
    "env_flu": {"network_path"},
}


def _allowed_keys(name: str, section: str) -> set[str]:
    extra = _OPTIONAL_KEYS.get(section, set())
    if section == "env":
        extra = _OPTIONAL_KEYS["env_mg" if name.startswith("mg_") else "env_flu"]
    return set(DEFAULTS[name][section]) | extra


@dataclass
class ExperimentSpec:
    experiment: str
    run_id: str
    seeds: list[int]
    env: dict = field(default_factory=dict)
    agents: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    outdir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        """Validate a raw spec and fill per-experiment defaults. Raises ConfigError."""
        if not isinstance(raw, dict):
            raise ConfigError("spec must be a JSON object")
        known = {"schema_version", "experiment", "run_id", "seeds", "env", "agents", "training", "evaluation", "outdir"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        name = raw.get("experiment")
        if name not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)}, got {name!r}")
        seeds = raw.get("seeds")
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        for key in ("env", "agents", "training", "evaluation"):
            if key in raw and not isinstance(raw[key], dict):
                raise ConfigError(f"{key} must be an object")
        for key in ("env", "agents", "training", "evaluation"):
            stray = set(raw.get(key, {})) - _allowed_keys(name, key)
            if stray:
                raise ConfigError(f"unknown {key} keys: {sorted(stray)}")
        merged = _deep_merge(DEFAULTS[name], {k: raw[k] for k in ("env", "agents", "training", "evaluation") if k in raw})
        spec = cls(
            experiment=name,
            run_id=str(raw.get("run_id", name)),
            seeds=list(seeds),
            outdir=str(raw.get("outdir", "runs")),
            **merged,
        )
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "run_id": self.run_id,
            "seeds": list(self.seeds),
            "env": self.env,
            "agents": self.agents,
            "training": self.training,
            "evaluation": self.evaluation,
            "outdir": self.outdir,
        }

    def with_seeds(self, seeds: list[int]) -> "ExperimentSpec":
        out = copy.deepcopy(self)
        out.seeds = list(seeds)
        return out

    def train_config(self) -> TrainConfig:
        a = self.agents
        return TrainConfig(
            gamma=float(a.get("gamma", 0.9)),
            lookahead=math.inf if a.get("lookahead") is None else float(a["lookahead"]),
            lr_actor=float(a.get("lr_actor", 1e-2)),
            lr_critic=float(a.get("lr_critic", 1e-2)),
            lr_q=float(a.get("lr_q", 1e-2)),
            epochs=int(self.training.get("epochs", self.training.get("iterations", 1))),
            algorithm=a.get("algorithm", "reinforce"),
        )

    def validate(self) -> None:
        """Build every config object once so bad values fail before a run starts."""
        try:
            self.train_config()
            if self.experiment.startswith("mg_"):
                _game_config(self, 1)
            else:
                _flu_config(self, 0)
        except (ContractViolation, TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid {self.experiment} spec: {exc}") from exc
        for key, value in self.training.items():
            if isinstance(value, (int, float)) and value < 1:
                raise ConfigError(f"training.{key} must be >= 1")


def load_spec(path: str | Path) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return ExperimentSpec.from_dict(raw)


class MetricsTable:
    """Append-only long-format metrics: (run_id, trial, step, metric, value)."""

    HEADER = ("run_id", "trial", "step", "metric", "value")

    def __init__(self, run_id: str, rows: list[tuple] | None = None):
        self.run_id = run_id
        self._rows: list[tuple[str, int, int, str, float]] = list(rows or [])

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def rows(self) -> tuple:
        return tuple(self._rows)

    def add(self, trial: int, step: int, metric: str, value: float) -> None:
        self._rows.append((self.run_id, int(trial), int(step), str(metric), float(value)))

    def extend(self, trial: int, metric: str, values, start: int = 0) -> None:
        for k, v in enumerate(values):
            self.add(trial, start + k, metric, v)

    def metrics(self) -> list[str]:
        return sorted({r[3] for r in self._rows})

    def values(self, metric: str, trial: int | None = None) -> np.ndarray:
        return np.array([r[4] for r in self._rows if r[3] == metric and (trial is None or r[1] == trial)])

    def series(self, metric: str, trial: int) -> tuple[np.ndarray, np.ndarray]:
        rows = [(r[2], r[4]) for r in self._rows if r[3] == metric and r[1] == trial]
        return np.array([s for s, _ in rows], dtype=int), np.array([v for _, v in rows])

    def trials(self) -> list[int]:
        return sorted({r[1] for r in self._rows})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for run_id, trial, step, metric, value in self._rows:
                w.writerow([run_id, trial, step, metric, repr(value)])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != cls.HEADER:
                raise ValueError(f"{path}: unexpected metrics header {header!r}")
            rows = [(r[0], int(r[1]), int(r[2]), r[3], float(r[4])) for r in reader if r]
        return cls(rows[0][0] if rows else "", rows)


@dataclass
class ExperimentResult:
    metrics: MetricsTable
    networks: dict[str, MlpParams] = field(default_factory=dict)
    trace: EpisodeTrace | None = None
    summary: dict[str, Any] = field(default_factory=dict)


# Small statistics helpers -------------------------------------------------------------


def rolling_mean(series, window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` (undefined) entries are omitted."""
    if window < 1:
        raise ContractViolation("window must be >= 1")
    x = np.asarray(series, dtype=float)
    if len(x) < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    """Mean with a Student-t confidence interval."""
    x = np.asarray(values, dtype=float)
    m = float(x.mean())
    if len(x) < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x)))
    return m, m - half, m + half


def _pearson_matrix(actions: np.ndarray) -> np.ndarray:
    a = np.asarray(actions, dtype=float)
    centered = a - a.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0))
    constant = sd == 0
    if constant.any():
        log.debug("%d constant action series; their correlations are set to 0", int(constant.sum()))
    denom = np.outer(sd, sd)
    corr = np.divide(centered.T @ centered, denom, out=np.zeros_like(denom), where=denom > 0)
    np.fill_diagonal(corr, 1.0)
    return corr


def sync_correlation(traces, ensemble=None) -> np.ndarray:
    """Average Pearson correlation matrix of per-season binary actions.

    ``traces`` is one (seasons, agents) action array or a list of them
    (replicates); ``ensemble`` selects columns. Constant series correlate 0
    with everything else by convention; the diagonal is 1.
    """
    if isinstance(traces, np.ndarray) and traces.ndim == 2:
        traces = [traces]
    mats = []
    for actions in traces:
        a = np.asarray(actions)
        if ensemble is not None:
            a = a[:, list(ensemble)]
        if a.shape[0] < 2:
            raise ContractViolation("correlation needs at least two seasons")
        mats.append(_pearson_matrix(a))
    return np.mean(mats, axis=0)


def max_off_diagonal(corr: np.ndarray) -> float:
    mask = ~np.eye(len(corr), dtype=bool)
    return float(np.max(np.abs(corr[mask]))) if mask.any() else 0.0


def null_sync_band(rates, n_seasons: int, n_replicates: int, n_mc: int, rng: RngStream, level: float = 0.95) -> float:
    """Upper ``level`` quantile of max off-diagonal |rho| for independent
    Bernoulli agents with the given action rates, averaged like the observed
    matrix (``n_replicates`` series of ``n_seasons`` each)."""
    rates = np.asarray(rates, dtype=float)
    out = np.empty(n_mc)
    for k in range(n_mc):
        reps = [rng.generator.random((n_seasons, len(rates))) < rates for _ in range(n_replicates)]
        out[k] = max_off_diagonal(sync_correlation(reps))
    return float(np.quantile(out, level))


def detect_period(series, max_period: int = 64) -> int:
    """Smallest p <= max_period with ``x[t] == x[t + p]`` over the second half; 0 if none."""
    x = np.asarray(series)
    tail = x[len(x) // 2 :]
    for p in range(1, min(max_period, len(tail) - 1) + 1):
        if np.array_equal(tail[p:], tail[:-p]):
            return p
    return 0


# Learner plumbing ---------------------------------------------------------------------


def _hidden(spec: ExperimentSpec) -> list[int]:
    return [int(h) for h in spec.agents.get("hidden", [20, 20, 20, 20])]


def _single_update(alg: str, actor: MlpParams, critic: MlpParams, buf, tc: TrainConfig):
    if alg == "reinforce":
        return reinforce_update(actor, buf, tc), critic
    if alg == "reinforce_baseline":
        return reinforce_baseline_update(actor, critic, buf, tc)
    if alg in ("actor_critic", "mac"):
        return actor_critic_update(actor, critic, buf, tc)
    raise ConfigError(f"unknown algorithm {alg!r}")


def _game_config(spec: ExperimentSpec, episode_length: int, mirror: bool = False) -> GameConfig:
    e = spec.env
    n = int(e["n_agents"])
    n_rl = int(e.get("n_rl", 1))
    ids = e.get("rl_agent_ids") or list(range(n - n_rl, n))
    return GameConfig(
        n_agents=n,
        memory_m=int(e["memory_m"]),
        strategies_k=int(e["strategies_k"]),
        horizon=int(episode_length),
        rl_agent_ids=ids,
        rl_window=int(e["rl_window"]),
        mirror=mirror,
    )


def _mg_episode(env: MinorityGameEnv, pop_seed: int, agents, rngs) -> EpisodeTrace:
    obs = env.reset(pop_seed)
    return continue_episode(env, agents, rngs, obs, env.horizon, record_observations=True)


def _tie_degenerate(trace: EpisodeTrace) -> bool:
    return bool(np.any(trace.summaries["basic_split"]))


# Minority game experiments -------------------------------------------------------------


def _train_mg_trial(spec: ExperimentSpec, seed: int, metrics: MetricsTable | None, trial: int, label: str):
    """Train one RL player against a population fixed for the whole trial."""
    tc = spec.train_config()
    root = RngStream(seed, label)
    pop_seed = root.derive_seed("population")
    cfg = _game_config(spec, spec.training["episode_length"])
    env = MinorityGameEnv(cfg)
    L = cfg.rl_window
    actor0 = make_policy(L, 2, _hidden(spec), root.fork("actor"))
    critic = init_mlp(L, _hidden(spec), 1, root.fork("critic"))
    actor = actor0
    agent = PolicyAgent(actor)
    train_rng = root.fork("train")
    win = []
    for epoch in range(int(spec.training["epochs"])):
        trace = _mg_episode(env, pop_seed, [agent], [train_rng.fork(f"epoch-{epoch}")])
        win.append(float(trace.rewards.mean()))
        actor, critic = _single_update(tc.algorithm, actor, critic, buffer_from_trace(trace, 0), tc)
        agent.set_params(actor)
    if metrics is not None:
        metrics.extend(trial, "train_win_rate", win)
    return root, pop_seed, actor0, actor, critic


def _mg_evaluate(spec: ExperimentSpec, actor: MlpParams, pop_seed: int, rng: RngStream, mirror: bool = False) -> EpisodeTrace:
    ev = spec.evaluation
    env = MinorityGameEnv(_game_config(spec, ev.get("episode_length", 500), mirror=mirror))
    agent = PolicyAgent(actor, greedy=bool(ev.get("greedy", False)))
    return _mg_episode(env, pop_seed, [agent], [rng])


def exp_mg_single_fixed(spec: ExperimentSpec) -> ExperimentResult:
    """One RL player (window L) trained against a fixed population per trial."""
    metrics = MetricsTable(spec.run_id)
    networks, first_trace = {}, None
    epochs = int(spec.training["epochs"])
    for trial, seed in enumerate(spec.seeds):
        root, pop_seed, actor0, actor, critic = _train_mg_trial(spec, seed, metrics, trial, "mg-single-fixed")
        before = _mg_evaluate(spec, actor0, pop_seed, root.fork("eval-untrained"))
        after = _mg_evaluate(spec, actor, pop_seed, root.fork("eval"))
        basic_attendance = after.summaries["attendance"] - after.actions[:, 0]
        metrics.add(trial, 0, "untrained_win_rate", before.rewards.mean())
        metrics.add(trial, epochs, "eval_win_rate", after.rewards.mean())
        metrics.add(trial, epochs, "tie_degenerate", _tie_degenerate(after))
        metrics.add(trial, epochs, "attendance_period", detect_period(basic_attendance))
        networks[f"actor_{trial}"] = actor
        networks[f"critic_{trial}"] = critic
        if first_trace is None:
            first_trace = after
    return ExperimentResult(metrics, networks, first_trace)


def exp_mg_generalization(spec: ExperimentSpec) -> ExperimentResult:
    """Evaluate a frozen trained policy on fresh populations and on the mirrored
    training population. The policy is loaded from ``agents.policy_path`` or
    trained as in :func:`exp_mg_single_fixed`."""
    metrics = MetricsTable(spec.run_id)
    n_pop = int(spec.evaluation.get("n_populations", 100))
    networks, first_trace = {}, None
    for trial, seed in enumerate(spec.seeds):
        path = spec.agents.get("policy_path")
        if path:
            bundle = load_bundle(path)
            actor = bundle.get(f"actor_{trial}", bundle.get("actor_0"))
            if actor is None:
                raise ConfigError(f"{path}: no actor network in bundle")
            root = RngStream(seed, "mg-single-fixed")
            pop_seed = root.derive_seed("population")
        else:
            root, pop_seed, _, actor, critic = _train_mg_trial(spec, seed, None, trial, "mg-single-fixed")
            networks[f"critic_{trial}"] = critic
        networks[f"actor_{trial}"] = actor
        eval_root = RngStream(seed, "mg-generalization")
        own = _mg_evaluate(spec, actor, pop_seed, eval_root.fork("training-population"))
        mirrored = _mg_evaluate(spec, actor, pop_seed, eval_root.fork("mirror"), mirror=True)
        metrics.add(trial, 0, "training_win_rate", own.rewards.mean())
        metrics.add(trial, 0, "mirror_win_rate", mirrored.rewards.mean())
        pops = eval_root.fork("populations")
        eval_rngs = eval_root.fork("population-eval")
        for j in range(n_pop):
            trace = _mg_evaluate(spec, actor, pops.derive_seed(f"pop-{j}"), eval_rngs.fork(f"pop-{j}"))
            metrics.add(trial, j, "pop_win_rate", trace.rewards.mean())
            metrics.add(trial, j, "pop_total_reward", trace.rewards.sum())
            metrics.add(trial, j, "pop_tie_degenerate", _tie_degenerate(trace))
        if first_trace is None:
            first_trace = own
    return ExperimentResult(metrics, networks, first_trace)


def exp_mg_resampled(spec: ExperimentSpec) -> ExperimentResult:
    """Train against a freshly drawn population every epoch."""
    tc = spec.train_config()
    metrics = MetricsTable(spec.run_id)
    window = int(spec.evaluation.get("rolling_window", ROLLING_WINDOW))
    networks, first_trace = {}, None
    cfg = _game_config(spec, spec.training["episode_length"])
    env = MinorityGameEnv(cfg)
    for trial, seed in enumerate(spec.seeds):
        root = RngStream(seed, "mg-resampled")
        actor = make_policy(cfg.rl_window, 2, _hidden(spec), root.fork("actor"))
        critic = init_mlp(cfg.rl_window, _hidden(spec), 1, root.fork("critic"))
        agent = PolicyAgent(actor)
        pops = root.fork("populations")
        train_rng = root.fork("train")
        win, degenerate = [], []
        for epoch in range(int(spec.training["epochs"])):
            trace = _mg_episode(env, pops.derive_seed(f"pop-{epoch}"), [agent], [train_rng.fork(f"epoch-{epoch}")])
            win.append(float(trace.rewards.mean()))
            degenerate.append(_tie_degenerate(trace))
            actor, critic = _single_update(tc.algorithm, actor, critic, buffer_from_trace(trace, 0), tc)
            agent.set_params(actor)
            if first_trace is None and epoch == int(spec.training["epochs"]) - 1:
                first_trace = trace
        win_a = np.array(win)
        deg_a = np.array(degenerate)
        metrics.extend(trial, "train_win_rate", win)
        metrics.extend(trial, "tie_degenerate", deg_a.astype(float))
        metrics.extend(trial, "rolling_win_rate", rolling_mean(win_a, window), start=window - 1)
        clean_idx = np.flatnonzero(~deg_a)
        clean_roll = rolling_mean(win_a[clean_idx], window)
        for k, v in enumerate(clean_roll):
            metrics.add(trial, int(clean_idx[k + window - 1]), "rolling_win_rate_clean", v)
        networks[f"actor_{trial}"] = actor
        networks[f"critic_{trial}"] = critic
    return ExperimentResult(metrics, networks, first_trace)


def exp_mg_multi(spec: ExperimentSpec) -> ExperimentResult:
    """MAC training of several RL players in a small game, with pre/post
    reward comparisons on the trial's fixed population."""
    tc = spec.train_config()
    metrics = MetricsTable(spec.run_id)
    cfg = _game_config(spec, spec.training["episode_length"])
    eval_cfg = _game_config(spec, spec.evaluation.get("episode_length", cfg.horizon))
    env, eval_env = MinorityGameEnv(cfg), MinorityGameEnv(eval_cfg)
    n_rl = len(cfg.rl_agent_ids)
    L = cfg.window
    networks, first_trace = {}, None
    n_eval = int(spec.evaluation.get("episodes", 10))

    def evaluate(actors, pop_seed, rng: RngStream, tag: str, trial: int):
        agents = [PolicyAgent(a) for a in actors]
        rl, basic = [], []
        for ep in range(n_eval):
            rngs = [rng.fork(f"ep-{ep}-agent-{i}") for i in range(n_rl)]
            trace = _mg_episode(eval_env, pop_seed, agents, rngs)
            per_agent = trace.rewards.mean(axis=0)
            for i in range(n_rl):
                metrics.add(trial, ep, f"{tag}_reward_agent{i}", per_agent[i])
            metrics.add(trial, ep, f"{tag}_reward_rl", per_agent.mean())
            metrics.add(trial, ep, f"{tag}_reward_default", trace.summaries["basic_mean_reward"].mean())
            rl.append(per_agent.mean())
            basic.append(trace.summaries["basic_mean_reward"].mean())
        return float(np.mean(rl)), float(np.mean(basic)), trace

    for trial, seed in enumerate(spec.seeds):
        root = RngStream(seed, "mg-multi")
        pop_seed = root.derive_seed("population")
        init = root.fork("actors")
        actors = [make_policy(L, 2, _hidden(spec), init.fork(f"agent-{i}")) for i in range(n_rl)]
        q_in = n_rl * L + n_rl * 2
        central_q = init_mlp(q_in, _hidden(spec), n_rl, root.fork("central-q"))
        pre_rl, pre_basic, _ = evaluate(actors, pop_seed, root.fork("eval-pre"), "pre", trial)
        agents = [PolicyAgent(a) for a in actors]
        train_rng = root.fork("train")
        for epoch in range(int(spec.training["epochs"])):
            ep_rng = train_rng.fork(f"epoch-{epoch}")
            trace = _mg_episode(env, pop_seed, agents, [ep_rng.fork(f"agent-{i}") for i in range(n_rl)])
            metrics.add(trial, epoch, "train_reward_rl", trace.rewards.mean())
            buffers = joint_buffers_from_trace(trace, list(range(n_rl)))
            actors, central_q = mac_train_step(actors, central_q, buffers, tc)
            for agent, a in zip(agents, actors):
                agent.set_params(a)
        post_rl, post_basic, last = evaluate(actors, pop_seed, root.fork("eval-post"), "post", trial)
        metrics.add(trial, 0, "improvement_rl", post_rl - pre_rl)
        metrics.add(trial, 0, "rl_minus_default_post", post_rl - post_basic)
        for i, a in enumerate(actors):
            networks[f"actor_{trial}_{i}"] = a
        networks[f"central_q_{trial}"] = central_q
        if first_trace is None:
            first_trace = last
    return ExperimentResult(metrics, networks, first_trace)


# Flu experiments ----------------------------------------------------------------------


def _flu_config(spec: ExperimentSpec, seed: int) -> FluConfig:
    e = spec.env
    net_seed = e.get("network_seed")
    if net_seed is None:
        net_seed = RngStream(seed, "flu-network").derive_seed("network")
    return FluConfig.from_dict(
        {
            "network": dict(e["network"]),
            "network_path": e.get("network_path"),
            "network_seed": int(net_seed),
            "transmission": dict(e.get("transmission", {})),
            "behavior": dict(e.get("behavior", {})),
        }
    )


def _flu_burned_in(spec: ExperimentSpec, seed: int, root: RngStream) -> FluEnv:
    env = FluEnv(_flu_config(spec, seed))
    env.reset(root.derive_seed("env"))
    b = spec.env.get("burn_in", {})
    burn_in(env, int(b.get("window", 50)), float(b.get("tol", 0.01)), int(b.get("max", 2000)))
    return env


def _flu_rollout(env: FluEnv, agents, rng: RngStream, seasons: int) -> EpisodeTrace:
    rngs = [rng.fork(f"agent-{i}") for i in range(len(agents))]
    return continue_episode(env, agents, rngs, env.observations(), seasons, record_observations=True)


def _flu_policy_eval(env: FluEnv, actors, eval_seed: int, seasons: int) -> EpisodeTrace:
    """Play ``seasons`` seasons on a copy of ``env`` (the original is untouched).

    Copies share the env's random streams, so evaluations started from the
    same state differ only through the agents' choices.
    """
    sim = copy.deepcopy(env)
    return _flu_rollout(sim, [PolicyAgent(a) for a in actors], RngStream(eval_seed, "flu-eval"), seasons)


def _flu_default_eval(env: FluEnv, nodes, seasons: int) -> np.ndarray:
    """Uninfected indicators (seasons, nodes) when ``nodes`` follow the default
    model. Uses a copy whose random streams match the policy evaluation."""
    sim = copy.deepcopy(env)
    sim.set_rl_agents([])
    out = np.empty((seasons, len(nodes)))
    for t in range(seasons):
        outcome = sim.season_step(())
        out[t] = ~outcome.infected[list(nodes)]
    return out


def exp_flu_single(spec: ExperimentSpec) -> ExperimentResult:
    """Insert one actor-critic agent after burn-in, train, then compare it with
    the same node following the default model under common random numbers."""
    tc = spec.train_config()
    metrics = MetricsTable(spec.run_id)
    seasons = int(spec.evaluation.get("seasons", 100))
    per_iter = int(spec.training["seasons_per_iteration"])
    networks, first_trace = {}, None
    for trial, seed in enumerate(spec.seeds):
        root = RngStream(seed, "flu-single")
        env = _flu_burned_in(spec, seed, root)
        candidates = np.flatnonzero(env.network.degree > 0)
        node = int(candidates[root.fork("rl-node").integers(0, len(candidates))])
        env.set_rl_agents([node])
        actor = make_policy(7, 2, _hidden(spec), root.fork("actor"))
        critic = init_mlp(7, _hidden(spec), 1, root.fork("critic"))
        actor0 = actor
        agent = PolicyAgent(actor)
        train_rng = root.fork("train")
        for it in range(int(spec.training["iterations"])):
            trace = _flu_rollout(env, [agent], train_rng.fork(f"it-{it}"), per_iter)
            metrics.add(trial, it, "train_uninfected_rate", trace.rewards.mean())
            metrics.add(trial, it, "train_vaccination_rate", trace.actions.mean())
            actor, critic = _single_update(tc.algorithm, actor, critic, buffer_from_trace(trace, 0, truncate_done=False), tc)
            agent.set_params(actor)
        eval_seed = root.derive_seed("eval")
        pre = _flu_policy_eval(env, [actor0], eval_seed, seasons)
        post = _flu_policy_eval(env, [actor], eval_seed, seasons)
        default = _flu_default_eval(env, [node], seasons)
        rl_rate = float(post.rewards.mean())
        def_rate = float(default.mean())
        metrics.add(trial, 0, "rl_node", node)
        metrics.add(trial, 0, "rl_node_degree", env.network.degree[node])
        metrics.add(trial, 0, "pre_uninfected_rate", pre.rewards.mean())
        metrics.add(trial, 0, "post_uninfected_rate", rl_rate)
        metrics.add(trial, 0, "default_uninfected_rate", def_rate)
        metrics.add(trial, 0, "advantage_pp", 100.0 * (rl_rate - def_rate))
        metrics.add(trial, 0, "post_vaccination_rate", post.actions.mean())
        metrics.add(trial, 0, "post_coverage", post.summaries["coverage"].mean())
        metrics.add(trial, 0, "post_attack_rate", post.summaries["attack_rate"].mean())
        networks[f"actor_{trial}"] = actor
        networks[f"critic_{trial}"] = critic
        if first_trace is None:
            first_trace = post
    return ExperimentResult(metrics, networks, first_trace)


def degree_quartile_pools(degree: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nodes at or below the first degree quartile and at or above the third."""
    q1, q3 = np.quantile(degree, [0.25, 0.75])
    return np.flatnonzero((degree <= q1) & (degree > 0)), np.flatnonzero(degree >= q3)


def _train_flu_ensemble(env: FluEnv, template: MlpParams, q_template: MlpParams, spec, tc, rng, metrics, trial, tag):
    n = env.n_agents
    actors = [template.copy() for _ in range(n)]
    central_q = q_template.copy()
    agents = [PolicyAgent(a) for a in actors]
    per_iter = int(spec.training["seasons_per_iteration"])
    for it in range(int(spec.training["iterations"])):
        trace = _flu_rollout(env, agents, rng.fork(f"it-{it}"), per_iter)
        metrics.add(trial, it, f"{tag}_train_uninfected_rate", trace.rewards.mean())
        buffers = joint_buffers_from_trace(trace, list(range(n)), truncate_done=False)
        actors, central_q = mac_train_step(actors, central_q, buffers, tc)
        for agent, a in zip(agents, actors):
            agent.set_params(a)
    return actors, central_q


def exp_flu_degree(spec: ExperimentSpec) -> ExperimentResult:
    """MAC-train a low-degree and a high-degree ensemble from one shared policy
    template and compare their improvement and action synchrony."""
    tc = spec.train_config()
    metrics = MetricsTable(spec.run_id)
    seasons = int(spec.evaluation.get("seasons", 100))
    n_sync = int(spec.evaluation.get("sync_replicates", 20))
    n_null = int(spec.evaluation.get("null_replicates", 200))
    size = int(spec.env.get("ensemble_size", 40))
    networks, first_trace = {}, None
    for trial, seed in enumerate(spec.seeds):
        root = RngStream(seed, "flu-degree")
        base = _flu_burned_in(spec, seed, root)
        low_pool, high_pool = degree_quartile_pools(base.network.degree)
        pick = root.fork("ensembles")
        if min(len(low_pool), len(high_pool)) < size:
            raise ConfigError(f"degree quartiles hold fewer than {size} nodes")
        groups = {
            "low": np.sort(pick.choice(low_pool, size=size, replace=False)),
            "high": np.sort(pick.choice(high_pool, size=size, replace=False)),
        }
        template = make_policy(7, 2, _hidden(spec), root.fork("actor-template"))
        q_template = init_mlp(size * 7 + size * 2, _hidden(spec), size, root.fork("q-template"))
        for tag, nodes in groups.items():
            env = copy.deepcopy(base)
            env.set_rl_agents(nodes)
            actors, central_q = _train_flu_ensemble(
                env, template, q_template, spec, tc, root.fork(f"{tag}-train"), metrics, trial, tag
            )
            eval_seed = root.derive_seed(f"{tag}-eval")
            pre = _flu_policy_eval(env, [template] * size, eval_seed, seasons)
            post = _flu_policy_eval(env, actors, eval_seed, seasons)
            default = _flu_default_eval(env, nodes, seasons)
            pre_rate, post_rate = float(pre.rewards.mean()), float(post.rewards.mean())
            metrics.add(trial, 0, f"{tag}_mean_degree", base.network.degree[nodes].mean())
            metrics.add(trial, 0, f"{tag}_pre_uninfected_rate", pre_rate)
            metrics.add(trial, 0, f"{tag}_post_uninfected_rate", post_rate)
            metrics.add(trial, 0, f"{tag}_default_uninfected_rate", default.mean())
            metrics.add(trial, 0, f"{tag}_improvement", post_rate - pre_rate)
            metrics.add(trial, 0, f"{tag}_post_vaccination_rate", post.actions.mean())
            reps = [
                _flu_policy_eval(env, actors, root.derive_seed(f"{tag}-sync-{r}"), seasons).actions for r in range(n_sync)
            ]
            corr = sync_correlation(reps)
            rates = np.mean([r.mean(axis=0) for r in reps], axis=0)
            band = null_sync_band(rates, seasons, n_sync, n_null, root.fork(f"{tag}-null"))
            metrics.add(trial, 0, f"{tag}_sync_max_abs_corr", max_off_diagonal(corr))
            metrics.add(trial, 0, f"{tag}_sync_null_q95", band)
            for i, a in enumerate(actors):
                networks[f"{tag}_actor_{trial}_{i}"] = a
            networks[f"{tag}_central_q_{trial}"] = central_q
            if first_trace is None:
                first_trace = post
    return ExperimentResult(metrics, networks, first_trace)


EXPERIMENTS: dict[str, Callable[[ExperimentSpec], ExperimentResult]] = {
    "mg_single_fixed": exp_mg_single_fixed,
    "mg_generalization": exp_mg_generalization,
    "mg_resampled": exp_mg_resampled,
    "mg_multi": exp_mg_multi,
    "flu_single": exp_flu_single,
    "flu_degree": exp_flu_degree,
}


# Running and writing ------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    return EXPERIMENTS[spec.experiment](spec)


def manifest_for(spec: ExperimentSpec, result: ExperimentResult) -> dict:
    return {
        "package_version": __version__,
        "spec": spec.to_dict(),
        "seeds": list(spec.seeds),
        "metrics": result.metrics.metrics(),
        "networks": sorted(result.networks),
        "trace": None if result.trace is None else {"config": result.trace.config, "seeds": result.trace.seeds},
    }


def write_run(spec: ExperimentSpec, result: ExperimentResult, outdir: str | Path | None = None) -> Path:
    """Write the run directory and return its path."""
    base = Path(outdir if outdir is not None else os.environ.get("RLABM_OUTDIR", spec.outdir))
    run_dir = base / spec.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest_for(spec, result), indent=2, sort_keys=True) + "\n")
    result.metrics.write_csv(run_dir / "metrics.csv")
    if result.trace is not None:
        write_trace(result.trace, run_dir, "trace")
        (run_dir / "trace.json").unlink()  # config and seeds already live in the manifest
    if result.networks:
        save_bundle(run_dir / "policy.bin", result.networks)
    return run_dir

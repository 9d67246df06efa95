"""Environment contract, episode execution and trace serialisation.

An environment exposes the external decision makers only (the RL agents);
default-model agents are simulated inside the environment as part of its
dynamics. ``reset`` returns one observation per external agent, ``step``
takes one action per external agent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import ContractViolation
from .rng import RngStream


@dataclass
class StepResult:
    observations: list[np.ndarray]
    rewards: np.ndarray
    done: bool
    summary: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.observations) != len(self.rewards):
            raise ContractViolation("observation count must equal reward count")


class Env(Protocol):
    n_agents: int
    horizon: int

    def reset(self, seed: int) -> list[np.ndarray]: ...

    def step(self, joint_actions: Sequence[int]) -> StepResult: ...

    def config_snapshot(self) -> dict[str, Any]: ...


class Agent(Protocol):
    def act(self, observation: np.ndarray, rng: RngStream) -> tuple[int, float]:
        """Return (action id, log-probability of that action)."""
        ...


class EnvBase:
    """Bookkeeping shared by both environments: step counting and ``done``."""

    n_agents: int = 0
    horizon: int = 1

    def _begin_episode(self):
        self._t = 0
        self._done = False
        self._ready = True

    def _check_step(self, joint_actions, n_actions: int) -> np.ndarray:
        if not getattr(self, "_ready", False):
            raise ContractViolation("step() called before reset()")
        if self._done:
            raise ContractViolation("step() called after the episode is done")
        acts = np.asarray(joint_actions, dtype=int).reshape(-1)
        if acts.size != self.n_agents:
            raise ContractViolation(f"expected {self.n_agents} actions, got {acts.size}")
        if acts.size and (acts.min() < 0 or acts.max() >= n_actions):
            raise ContractViolation(f"action ids must lie in [0, {n_actions})")
        return acts

    def _advance(self) -> bool:
        self._t += 1
        if self._t >= self.horizon:
            self._done = True
        return self._done

    @property
    def t(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done


@dataclass
class EpisodeTrace:
    config: dict[str, Any]
    seeds: dict[str, int]
    actions: np.ndarray  # (T, n_agents) int
    rewards: np.ndarray  # (T, n_agents) float
    log_probs: np.ndarray  # (T, n_agents) float
    summaries: dict[str, np.ndarray]
    observations: list[np.ndarray] | None = None  # per agent, (T + 1, width)
    dones: np.ndarray | None = None
    final_observations: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return self.actions.shape[0]

    def columns(self) -> tuple[list[str], list[list]]:
        n = self.actions.shape[1]
        header = ["step"] + [f"action_{i}" for i in range(n)] + [f"reward_{i}" for i in range(n)]
        keys = sorted(self.summaries)
        header += keys
        rows = []
        for t in range(len(self)):
            row = [t] + [int(a) for a in self.actions[t]] + [_fmt(r) for r in self.rewards[t]]
            row += [_fmt(self.summaries[k][t]) for k in keys]
            rows.append(row)
        return header, rows


def _fmt(value) -> str:
    v = float(value)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def run_episode(
    env: Env,
    agents: Sequence[Agent],
    horizon: int,
    seed: int,
    record_observations: bool = False,
) -> EpisodeTrace:
    """Reset ``env`` from ``seed`` and play up to ``horizon`` steps.

    Agent randomness comes from per-agent streams forked off ``seed``, so the
    trace is a pure function of (env config, agents, horizon, seed).
    """
    if horizon < 1:
        raise ContractViolation("horizon must be >= 1")
    if len(agents) != env.n_agents:
        raise ContractViolation(f"env expects {env.n_agents} agents, got {len(agents)}")
    root = RngStream(seed, "episode")
    env_seed = root.derive_seed("env")
    agent_rngs = [root.fork(f"agent-{i}") for i in range(len(agents))]
    obs = env.reset(env_seed)
    return _rollout(env, agents, agent_rngs, obs, horizon, record_observations, {"episode": seed, "env": env_seed})


def continue_episode(
    env: Env,
    agents: Sequence[Agent],
    agent_rngs: Sequence[RngStream],
    observations: list[np.ndarray],
    n_steps: int,
    record_observations: bool = True,
) -> EpisodeTrace:
    """Play ``n_steps`` more steps from the env's current state (no reset).

    Used by continuing tasks such as the seasonal flu model, where a training
    iteration is a window of seasons rather than a fresh episode.
    """
    if len(agents) != env.n_agents:
        raise ContractViolation(f"env expects {env.n_agents} agents, got {len(agents)}")
    return _rollout(env, agents, agent_rngs, observations, n_steps, record_observations, {})


def _rollout(env, agents, agent_rngs, obs, horizon, record_observations, seeds) -> EpisodeTrace:
    n = len(agents)
    actions, rewards, logps, dones = [], [], [], []
    summaries: dict[str, list] = {}
    obs_log = [[np.asarray(o, dtype=float)] for o in obs] if record_observations else None
    for _ in range(horizon):
        step_actions = np.empty(n, dtype=int)
        step_logps = np.empty(n)
        for i, agent in enumerate(agents):
            step_actions[i], step_logps[i] = agent.act(obs[i], agent_rngs[i])
        result = env.step(step_actions)
        actions.append(step_actions)
        logps.append(step_logps)
        rewards.append(np.asarray(result.rewards, dtype=float))
        dones.append(result.done)
        for key, value in result.summary.items():
            summaries.setdefault(key, []).append(value)
        obs = result.observations
        if obs_log is not None:
            for i, o in enumerate(obs):
                obs_log[i].append(np.asarray(o, dtype=float))
        if result.done:
            break
    T = len(actions)
    trace = EpisodeTrace(
        config=env.config_snapshot(),
        seeds=seeds,
        actions=np.array(actions, dtype=int).reshape(T, n),
        rewards=np.array(rewards, dtype=float).reshape(T, n),
        log_probs=np.array(logps, dtype=float).reshape(T, n),
        summaries={k: np.asarray(v) for k, v in summaries.items()},
        observations=[np.array(o) for o in obs_log] if obs_log is not None else None,
        dones=np.array(dones, dtype=bool),
        final_observations=obs,
    )
    return trace


def write_trace(trace: EpisodeTrace, directory: str | Path, name: str = "trace") -> tuple[Path, Path]:
    """Write ``<name>.json`` (config + seeds) and ``<name>.csv`` (per-step table)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.json"
    manifest.write_text(json.dumps({"config": trace.config, "seeds": trace.seeds}, indent=2, sort_keys=True))
    table = directory / f"{name}.csv"
    header, rows = trace.columns()
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return manifest, table

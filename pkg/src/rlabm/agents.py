"""Agents that plug into :func:`rlabm.core.run_episode`."""

from __future__ import annotations

import numpy as np

from .core import EpisodeTrace
from .nn import MlpParams, forward_policy, init_mlp
from .rl import ExperienceBuffer
from .rng import RngStream


class PolicyAgent:
    """Samples from a softmax policy network.

    Probabilities are memoised per observation while the parameters are
    unchanged; minority-game observations take only ``2**L`` values, so an
    episode costs a handful of forward passes.
    """

    def __init__(self, params: MlpParams, greedy: bool = False):
        self.greedy = greedy
        self.set_params(params)

    def set_params(self, params: MlpParams) -> None:
        self.params = params
        self._cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def _lookup(self, observation) -> tuple[np.ndarray, np.ndarray]:
        obs = np.asarray(observation, dtype=float)
        key = obs.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            p = forward_policy(self.params, obs)
            hit = (p, np.cumsum(p))
            if len(self._cache) < 4096:
                self._cache[key] = hit
        return hit

    def probabilities(self, observation) -> np.ndarray:
        return self._lookup(observation)[0]

    def act(self, observation, rng: RngStream) -> tuple[int, float]:
        p, cum = self._lookup(observation)
        if self.greedy:
            a = int(np.argmax(p))
        else:
            a = min(int(np.searchsorted(cum, rng.random(), side="right")), len(p) - 1)
        return a, float(np.log(p[a]))


class FixedActionAgent:
    """Always plays the same action (useful for tests and baselines)."""

    def __init__(self, action: int):
        self.action = int(action)

    def act(self, observation, rng: RngStream) -> tuple[int, float]:
        return self.action, 0.0


class BernoulliAgent:
    """Plays 1 with a fixed probability, independent of the observation."""

    def __init__(self, p_one: float):
        self.p_one = float(p_one)

    def act(self, observation, rng: RngStream) -> tuple[int, float]:
        a = int(rng.random() < self.p_one)
        p = self.p_one if a else 1.0 - self.p_one
        return a, float(np.log(p)) if p > 0 else 0.0


def make_policy(n_in: int, n_actions: int, hidden, rng: RngStream) -> MlpParams:
    return init_mlp(n_in, list(hidden), n_actions, rng)


def buffer_from_trace(trace: EpisodeTrace, agent: int, truncate_done: bool = True) -> ExperienceBuffer:
    """Per-agent buffer from a trace recorded with observations.

    With ``truncate_done`` the last transition is marked done, which zeroes the
    bootstrap at the end of the window.
    """
    obs = trace.observations[agent]
    T = len(trace)
    dones = trace.dones.copy()
    if truncate_done and T:
        dones[-1] = True
    return ExperienceBuffer.from_arrays(
        agent, obs[:T], trace.actions[:, agent], trace.log_probs[:, agent], trace.rewards[:, agent], obs[1 : T + 1], dones
    )


def joint_buffers_from_trace(trace: EpisodeTrace, members: list[int], truncate_done: bool = True) -> list[ExperienceBuffer]:
    """MAC buffers for the agents in ``members`` (slot order = Q head order)."""
    T = len(trace)
    joint_obs = np.concatenate([trace.observations[i] for i in members], axis=1)  # (T + 1, D)
    joint_act = trace.actions[:, members]
    next_act = np.vstack([joint_act[1:], joint_act[-1:]])  # last row is masked by done
    dones = trace.dones.copy()
    if truncate_done and T:
        dones[-1] = True
    buffers = []
    for slot, i in enumerate(members):
        obs = trace.observations[i]
        buffers.append(
            ExperienceBuffer.from_arrays(
                slot, obs[:T], trace.actions[:, i], trace.log_probs[:, i], trace.rewards[:, i], obs[1 : T + 1], dones,
                joint_obs[:T], joint_act, joint_obs[1 : T + 1], next_act,
            )
        )
    return buffers

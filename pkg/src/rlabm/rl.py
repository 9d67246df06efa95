"""Policy-gradient updates and the multi-agent actor-critic (MAC).

All updates are batch updates over one episode's buffer: gradients are summed
over the buffer and applied once per network. Every function returns new
parameter objects and leaves its inputs untouched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .nn import MlpParams, backprop, forward, forward_value, log_policy_grad

log = logging.getLogger(__name__)

ALGORITHMS = ("reinforce", "reinforce_baseline", "actor_critic", "mac")


@dataclass
class TrainConfig:
    gamma: float = 0.9
    lookahead: float = 5  # H; math.inf for untruncated returns
    lr_actor: float = 1e-2
    lr_critic: float = 1e-2
    lr_q: float = 1e-2
    epochs: int = 400
    algorithm: str = "reinforce"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation("gamma must lie in [0, 1]")
        if self.lookahead < 1:
            raise ContractViolation("look-ahead horizon must be >= 1")
        if min(self.lr_actor, self.lr_critic, self.lr_q) <= 0:
            raise ContractViolation("step sizes must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"unknown algorithm {self.algorithm!r}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "lookahead": None if math.isinf(self.lookahead) else self.lookahead,
            "lr_actor": self.lr_actor,
            "lr_critic": self.lr_critic,
            "lr_q": self.lr_q,
            "epochs": self.epochs,
            "algorithm": self.algorithm,
        }


@dataclass
class Transition:
    agent_id: int
    s: np.ndarray
    a: int
    log_prob: float
    r: float
    s_next: np.ndarray | None
    done: bool
    joint_s: np.ndarray | None = None
    joint_a: np.ndarray | None = None
    joint_s_next: np.ndarray | None = None
    joint_a_next: np.ndarray | None = None

    def __post_init__(self):
        if self.log_prob > 0:
            raise ContractViolation("log-probability must be <= 0")
        joint = [self.joint_s, self.joint_a, self.joint_s_next, self.joint_a_next]
        if any(j is None for j in joint) and any(j is not None for j in joint):
            raise ContractViolation("joint fields must be all present or all absent")

    @property
    def multi_agent(self) -> bool:
        return self.joint_s is not None


@dataclass
class ExperienceBuffer:
    """One agent's time-ordered transitions for one episode, stored column-wise."""

    agent_id: int = 0
    capacity: int | None = None
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    next_obs: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    joint_obs: list | None = None
    joint_actions: list | None = None
    next_joint_obs: list | None = None
    next_joint_actions: list | None = None

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, tr: Transition) -> None:
        if self.capacity is not None and len(self) >= self.capacity:
            raise ContractViolation("experience buffer is full")
        if len(self) and (tr.multi_agent != self.multi_agent):
            raise ContractViolation("cannot mix single- and multi-agent transitions")
        self.obs.append(np.asarray(tr.s, dtype=float))
        self.actions.append(int(tr.a))
        self.log_probs.append(float(tr.log_prob))
        self.rewards.append(float(tr.r))
        self.next_obs.append(None if tr.s_next is None else np.asarray(tr.s_next, dtype=float))
        self.dones.append(bool(tr.done))
        if tr.multi_agent:
            if self.joint_obs is None:
                self.joint_obs, self.joint_actions, self.next_joint_obs, self.next_joint_actions = [], [], [], []
            self.joint_obs.append(np.asarray(tr.joint_s, dtype=float))
            self.joint_actions.append(np.asarray(tr.joint_a, dtype=int))
            self.next_joint_obs.append(np.asarray(tr.joint_s_next, dtype=float))
            self.next_joint_actions.append(np.asarray(tr.joint_a_next, dtype=int))

    @property
    def multi_agent(self) -> bool:
        return self.joint_obs is not None

    def clear(self) -> None:
        for name in ("obs", "actions", "log_probs", "rewards", "next_obs", "dones"):
            getattr(self, name).clear()
        self.joint_obs = self.joint_actions = self.next_joint_obs = self.next_joint_actions = None

    def transition(self, t: int) -> Transition:
        joint = {}
        if self.multi_agent:
            joint = dict(
                joint_s=self.joint_obs[t],
                joint_a=self.joint_actions[t],
                joint_s_next=self.next_joint_obs[t],
                joint_a_next=self.next_joint_actions[t],
            )
        return Transition(
            self.agent_id, self.obs[t], self.actions[t], self.log_probs[t], self.rewards[t],
            self.next_obs[t], self.dones[t], **joint,
        )

    @classmethod
    def from_arrays(
        cls,
        agent_id: int,
        obs: np.ndarray,
        actions,
        log_probs,
        rewards,
        next_obs: np.ndarray | None,
        dones,
        joint_obs=None,
        joint_actions=None,
        next_joint_obs=None,
        next_joint_actions=None,
    ) -> "ExperienceBuffer":
        buf = cls(agent_id=agent_id)
        buf.obs = list(np.asarray(obs, dtype=float))
        buf.actions = [int(a) for a in actions]
        buf.log_probs = [float(x) for x in log_probs]
        buf.rewards = [float(x) for x in rewards]
        buf.next_obs = [None] * len(buf.actions) if next_obs is None else list(np.asarray(next_obs, dtype=float))
        buf.dones = [bool(d) for d in dones]
        if joint_obs is not None:
            buf.joint_obs = list(np.asarray(joint_obs, dtype=float))
            buf.joint_actions = list(np.asarray(joint_actions, dtype=int))
            buf.next_joint_obs = list(np.asarray(next_joint_obs, dtype=float))
            buf.next_joint_actions = list(np.asarray(next_joint_actions, dtype=int))
        if any(lp > 0 for lp in buf.log_probs):
            raise ContractViolation("log-probability must be <= 0")
        return buf

    def stacked(self) -> dict[str, np.ndarray]:
        out = {
            "obs": np.array(self.obs),
            "actions": np.array(self.actions, dtype=int),
            "rewards": np.array(self.rewards, dtype=float),
            "dones": np.array(self.dones, dtype=bool),
        }
        if all(o is not None for o in self.next_obs):
            out["next_obs"] = np.array(self.next_obs)
        if self.multi_agent:
            out["joint_obs"] = np.array(self.joint_obs)
            out["joint_actions"] = np.array(self.joint_actions, dtype=int)
            out["next_joint_obs"] = np.array(self.next_joint_obs)
            out["next_joint_actions"] = np.array(self.next_joint_actions, dtype=int)
        return out


def compute_returns(rewards: Sequence[float], gamma: float, horizon: float = math.inf) -> np.ndarray:
    """Truncated discounted returns ``G_t = sum_{j < min(H, T-t)} gamma^j r_{t+j}``."""
    if horizon < 1:
        raise ContractViolation("look-ahead horizon must be >= 1")
    r = np.asarray(rewards, dtype=float)
    T = len(r)
    G = np.zeros(T)
    if math.isinf(horizon) or horizon >= T:
        running = 0.0
        for t in range(T - 1, -1, -1):
            running = r[t] + gamma * running
            G[t] = running
        return G
    H = int(horizon)
    for j in range(H):
        G[: T - j] += gamma**j * r[j:]
    return G


def _empty(buffer: ExperienceBuffer, name: str) -> bool:
    if len(buffer) == 0:
        log.warning("%s: empty buffer, update skipped", name)
        return True
    return False


def reinforce_update(params: MlpParams, buffer: ExperienceBuffer, cfg: TrainConfig) -> MlpParams:
    if _empty(buffer, "reinforce_update"):
        return params.copy()
    data = buffer.stacked()
    G = compute_returns(data["rewards"], cfg.gamma, cfg.lookahead)
    grad = log_policy_grad(params, data["obs"], data["actions"], G)
    return params.add_scaled(grad, cfg.lr_actor)


def reinforce_baseline_update(
    params: MlpParams, value_params: MlpParams, buffer: ExperienceBuffer, cfg: TrainConfig
) -> tuple[MlpParams, MlpParams]:
    """Actor uses ``G_t - v(s_t)``; the baseline takes a gradient step on ``(G_t - v)^2 / 2``."""
    if _empty(buffer, "reinforce_baseline_update"):
        return params.copy(), value_params.copy()
    data = buffer.stacked()
    G = compute_returns(data["rewards"], cfg.gamma, cfg.lookahead)
    v = forward_value(value_params, data["obs"])
    adv = G - v
    actor = params.add_scaled(log_policy_grad(params, data["obs"], data["actions"], adv), cfg.lr_actor)
    critic = value_params.add_scaled(backprop(value_params, data["obs"], adv[:, None]), cfg.lr_critic)
    return actor, critic


def local_advantages(critic: MlpParams, obs, next_obs, rewards, dones, gamma: float) -> np.ndarray:
    v = forward_value(critic, obs)
    v_next = forward_value(critic, next_obs) * (~np.asarray(dones, dtype=bool))
    return np.asarray(rewards, dtype=float) + gamma * v_next - v


def actor_critic_update(
    params: MlpParams, critic_params: MlpParams, buffer: ExperienceBuffer, cfg: TrainConfig
) -> tuple[MlpParams, MlpParams]:
    """One-step advantage ``r + gamma v(s') - v(s)`` drives both actor and critic."""
    if _empty(buffer, "actor_critic_update"):
        return params.copy(), critic_params.copy()
    data = buffer.stacked()
    if "next_obs" not in data:
        raise ContractViolation("actor-critic needs s_{t+1} in every transition")
    adv = local_advantages(critic_params, data["obs"], data["next_obs"], data["rewards"], data["dones"], cfg.gamma)
    actor = params.add_scaled(log_policy_grad(params, data["obs"], data["actions"], adv), cfg.lr_actor)
    critic = critic_params.add_scaled(backprop(critic_params, data["obs"], adv[:, None]), cfg.lr_critic)
    return actor, critic


def mac_deployed_step(
    actor: MlpParams, local_critic: MlpParams, buffer: ExperienceBuffer, cfg: TrainConfig
) -> tuple[MlpParams, MlpParams]:
    """Deployed phase: local critic only; the central Q is not involved."""
    return actor_critic_update(actor, local_critic, buffer, cfg)


# Central critic -------------------------------------------------------------------


def joint_input(joint_obs, joint_actions, n_actions: int = 2) -> np.ndarray:
    """Concatenate joint observations with one-hot joint actions (batch-aware)."""
    s = np.asarray(joint_obs, dtype=float)
    a = np.asarray(joint_actions, dtype=int)
    single = s.ndim == 1
    if single:
        s, a = s[None, :], a[None, :]
    onehot = np.zeros((a.shape[0], a.shape[1] * n_actions))
    rows = np.arange(a.shape[0])[:, None]
    onehot[rows, a + n_actions * np.arange(a.shape[1])[None, :]] = 1.0
    x = np.concatenate([s, onehot], axis=1)
    return x[0] if single else x


def mac_advantage(
    transition: Transition, central_q: MlpParams, gamma: float, n_actions: int = 2, head: int | None = None
) -> float:
    """``r + gamma Q_i(a', s') - Q_i(a, s)`` with head ``i`` = the agent's slot."""
    if not transition.multi_agent:
        raise ContractViolation("MAC advantage needs the joint fields")
    i = transition.agent_id if head is None else head
    q_now = forward(central_q, joint_input(transition.joint_s, transition.joint_a, n_actions))[i]
    q_next = 0.0
    if not transition.done:
        q_next = forward(central_q, joint_input(transition.joint_s_next, transition.joint_a_next, n_actions))[i]
    return float(transition.r + gamma * q_next - q_now)


def _mac_batch_advantages(central_q, data, head, gamma, n_actions):
    x_now = joint_input(data["joint_obs"], data["joint_actions"], n_actions)
    x_next = joint_input(data["next_joint_obs"], data["next_joint_actions"], n_actions)
    q_now = forward(central_q, x_now)[:, head]
    q_next = forward(central_q, x_next)[:, head] * (~data["dones"])
    return data["rewards"] + gamma * q_next - q_now, x_now, x_next


def mac_train_step(
    actors: Sequence[MlpParams],
    central_q: MlpParams,
    buffers: Sequence[ExperienceBuffer],
    cfg: TrainConfig,
    n_actions: int = 2,
) -> tuple[list[MlpParams], MlpParams]:
    """Training phase of MAC.

    For each agent ``i`` (Q head ``i``) and step ``t``: actor ascent along
    ``Adv_{i,t} grad log pi_i``; central critic descent along
    ``grad_Phi Adv_{i,t}^2`` (full gradient through both Q terms). All
    advantages use the pre-update ``Phi``.
    """
    if len(actors) != len(buffers):
        raise ContractViolation("one buffer per actor")
    if central_q.output_width != len(actors):
        raise ContractViolation("central Q needs one output head per agent")
    lengths = {len(b) for b in buffers}
    if len(lengths) != 1:
        raise ContractViolation("buffers are not time-aligned")
    if lengths == {0}:
        log.warning("mac_train_step: empty buffers, update skipped")
        return [a.copy() for a in actors], central_q.copy()
    stacked = [b.stacked() for b in buffers]
    ref = stacked[0]
    for data in stacked:
        if "joint_obs" not in data:
            raise ContractViolation("MAC buffers need the joint fields")
        if not (
            np.array_equal(data["joint_actions"], ref["joint_actions"])
            and np.array_equal(data["joint_obs"], ref["joint_obs"])
            and np.array_equal(data["dones"], ref["dones"])
        ):
            raise ContractViolation("buffers are not time-aligned")
    new_actors = []
    q_grad = central_q.zeros_like()
    for i, (actor, data) in enumerate(zip(actors, stacked)):
        adv, x_now, x_next = _mac_batch_advantages(central_q, data, i, cfg.gamma, n_actions)
        new_actors.append(actor.add_scaled(log_policy_grad(actor, data["obs"], data["actions"], adv), cfg.lr_actor))
        # d(Adv^2)/dPhi = 2 Adv (gamma dQ_i(next) - dQ_i(now))
        up_now = np.zeros((len(adv), central_q.output_width))
        up_now[:, i] = -2.0 * adv
        up_next = np.zeros_like(up_now)
        up_next[:, i] = 2.0 * cfg.gamma * adv * (~data["dones"])
        g_now = backprop(central_q, x_now, up_now)
        g_next = backprop(central_q, x_next, up_next)
        q_grad = q_grad.add_scaled(g_now, 1.0).add_scaled(g_next, 1.0)
    return new_actors, central_q.add_scaled(q_grad, -cfg.lr_q)


def mac_q_loss(central_q: MlpParams, buffers: Sequence[ExperienceBuffer], gamma: float, n_actions: int = 2) -> float:
    """Sum of squared MAC advantages over all agents and steps."""
    total = 0.0
    for i, b in enumerate(buffers):
        adv, _, _ = _mac_batch_advantages(central_q, b.stacked(), i, gamma, n_actions)
        total += float(np.sum(adv**2))
    return total

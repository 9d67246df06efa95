"""Minority game with strategy-book default agents.

History convention: the window is stored newest-first, and an m-bit history is
indexed as ``sum(h[j] << j for j in range(m))`` with ``h[0]`` the most recent
winning group. Strategy tables are arrays of length ``2**m`` over that index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EnvBase, StepResult
from .errors import ContractViolation
from .rng import RngStream


@dataclass
class GameConfig:
    n_agents: int = 301
    memory_m: int = 2
    strategies_k: int = 2
    horizon: int = 500
    rl_agent_ids: list[int] = field(default_factory=list)
    rl_window: int = 3
    mirror: bool = False

    def __post_init__(self):
        self.rl_agent_ids = sorted(int(i) for i in self.rl_agent_ids)
        if self.n_agents < 2:
            raise ContractViolation("n_agents must be >= 2")
        if self.memory_m < 1 or self.strategies_k < 1 or self.rl_window < 1:
            raise ContractViolation("memory_m, strategies_k and rl_window must be >= 1")
        if self.horizon < 1:
            raise ContractViolation("horizon must be >= 1")
        if len(set(self.rl_agent_ids)) != len(self.rl_agent_ids) or any(
            not 0 <= i < self.n_agents for i in self.rl_agent_ids
        ):
            raise ContractViolation("rl_agent_ids must be distinct player indices")

    @property
    def basic_ids(self) -> list[int]:
        rl = set(self.rl_agent_ids)
        return [i for i in range(self.n_agents) if i not in rl]

    @property
    def window(self) -> int:
        return max(self.memory_m, self.rl_window)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "memory_m": self.memory_m,
            "strategies_k": self.strategies_k,
            "horizon": self.horizon,
            "rl_agent_ids": list(self.rl_agent_ids),
            "rl_window": self.rl_window,
            "mirror": self.mirror,
        }


@dataclass
class StrategyTable:
    actions: np.ndarray  # uint8, length 2**m
    score: int = 0


@dataclass
class BasicAgent:
    tables: list[StrategyTable]

    @property
    def scores(self) -> list[int]:
        return [t.score for t in self.tables]


class HistoryWindow:
    """Recent winning groups, newest first, fixed length."""

    def __init__(self, bits: Sequence[int]):
        self.bits = np.asarray(bits, dtype=np.uint8).copy()

    def __len__(self) -> int:
        return len(self.bits)

    def push(self, winner: int) -> None:
        self.bits[1:] = self.bits[:-1]
        self.bits[0] = winner

    def recent(self, n: int) -> np.ndarray:
        if n > len(self.bits):
            raise ContractViolation(f"history holds {len(self.bits)} bits, {n} requested")
        return self.bits[:n]

    def index(self, m: int) -> int:
        return history_index(self.recent(m))


def history_index(bits_newest_first) -> int:
    return int(sum(int(b) << j for j, b in enumerate(bits_newest_first)))


def draw_strategy_book(m: int, k: int, rng: RngStream) -> list[StrategyTable]:
    """k i.i.d. uniform tables; the initial strategy is placed at index 0.

    Placing the uniformly chosen initial strategy first means the lowest-index
    tie-break plays it while all scores are level.
    """
    if m < 1 or k < 1:
        raise ContractViolation("m and k must be >= 1")
    raw = rng.integers(0, 2, size=(k, 2**m)).astype(np.uint8)
    initial = int(rng.integers(0, k))
    order = [initial] + [i for i in range(k) if i != initial]
    return [StrategyTable(raw[i].copy(), 0) for i in order]


def minority_outcome(actions, rng: RngStream | None = None) -> tuple[int, bool]:
    """Return (minority group, tie flag). Ties are broken by a fair coin."""
    a = np.asarray(actions)
    if a.size < 2:
        raise ContractViolation("need at least two players")
    ones = int(a.sum())
    zeros = a.size - ones
    if ones < zeros:
        return 1, False
    if zeros < ones:
        return 0, False
    if rng is None:
        raise ContractViolation("a tie needs an RNG stream for the coin flip")
    return int(rng.integers(0, 2)), True


def select_basic_action(agent: BasicAgent, history: HistoryWindow, m: int | None = None) -> int:
    m = m if m is not None else int(np.log2(len(agent.tables[0].actions)))
    if len(history) < m:
        raise ContractViolation("history shorter than the agent's memory")
    idx = history.index(m)
    best = int(np.argmax(agent.scores))  # argmax returns the first maximum
    return int(agent.tables[best].actions[idx])


def update_scores(agents: Sequence[BasicAgent], minority: int, history: HistoryWindow, m: int) -> None:
    """Virtual scoring: every table earns a point when it would have won.

    ``history`` is the window *before* ``minority`` is appended.
    """
    idx = history.index(m)
    for agent in agents:
        for table in agent.tables:
            if int(table.actions[idx]) == minority:
                table.score += 1


def mg_rl_observation(history: HistoryWindow, window: int) -> np.ndarray:
    return history.recent(window).astype(float)


def mg_reward(action: int, minority: int, tie: bool) -> int:
    return int(action == minority and not tie)


def mirror_tables(tables: np.ndarray) -> np.ndarray:
    """Relabel 0<->1 in both the history index and the prescribed action."""
    return (1 - tables[..., ::-1]).astype(np.uint8)


class BasicPopulation:
    """Vectorised strategy books: ``tables`` (n, k, 2**m) and ``scores`` (n, k)."""

    def __init__(self, tables: np.ndarray, scores: np.ndarray | None = None):
        self.tables = np.asarray(tables, dtype=np.uint8)
        self.scores = np.zeros(self.tables.shape[:2], dtype=np.int64) if scores is None else np.array(scores)
        self._rows = np.arange(self.tables.shape[0])

    @classmethod
    def from_agents(cls, agents: Sequence[BasicAgent]) -> "BasicPopulation":
        tables = np.array([[t.actions for t in a.tables] for a in agents], dtype=np.uint8)
        scores = np.array([[t.score for t in a.tables] for a in agents], dtype=np.int64)
        return cls(tables, scores)

    def to_agents(self) -> list[BasicAgent]:
        return [
            BasicAgent([StrategyTable(self.tables[i, j].copy(), int(self.scores[i, j])) for j in range(self.tables.shape[1])])
            for i in range(self.tables.shape[0])
        ]

    def __len__(self) -> int:
        return self.tables.shape[0]

    def actions(self, hidx: int) -> np.ndarray:
        best = np.argmax(self.scores, axis=1)
        return self.tables[self._rows, best, hidx]

    def update(self, hidx: int, minority: int) -> None:
        self.scores += self.tables[:, :, hidx] == minority

    def relative_scores(self) -> np.ndarray:
        return self.scores - self.scores.min(axis=1, keepdims=True)


class MinorityGameEnv(EnvBase):
    """The game as seen by the RL players in ``cfg.rl_agent_ids``.

    Every player (RL or default) counts towards attendance. ``reset(seed)``
    draws the default population and the warm-up history from ``seed``; the
    same seed therefore replays the same population.
    """

    n_actions = 2

    def __init__(self, cfg: GameConfig):
        self.cfg = cfg
        self.n_agents = len(cfg.rl_agent_ids)
        self.horizon = cfg.horizon
        self.m = cfg.memory_m
        self.population: BasicPopulation | None = None
        self.history: HistoryWindow | None = None

    def config_snapshot(self) -> dict:
        return {"env": "minority_game", **self.cfg.to_dict()}

    def reset(self, seed: int) -> list[np.ndarray]:
        root = RngStream(seed, "minority-game")
        pop_rng = root.fork("strategies")
        books = []
        for i in self.cfg.basic_ids:
            book = draw_strategy_book(self.m, self.cfg.strategies_k, pop_rng.fork(f"agent-{i}"))
            books.append([t.actions for t in book])
        tables = np.array(books, dtype=np.uint8).reshape(len(books), self.cfg.strategies_k, 2**self.m)
        bits = root.fork("history").integers(0, 2, size=self.cfg.window)
        if self.cfg.mirror:
            tables = mirror_tables(tables)
            bits = 1 - bits
        self.population = BasicPopulation(tables)
        self.history = HistoryWindow(bits)
        self._tie_rng = root.fork("ties")
        self._begin_episode()
        return self._observations()

    def set_state(self, population: BasicPopulation, history: HistoryWindow) -> None:
        """Install an explicit population and history (e.g. a mirrored copy)."""
        self.population = population
        self.history = history
        if not hasattr(self, "_tie_rng"):
            self._tie_rng = RngStream(0, "minority-game").fork("ties")
        self._begin_episode()

    def _observations(self) -> list[np.ndarray]:
        obs = mg_rl_observation(self.history, self.cfg.rl_window)
        return [obs.copy() for _ in range(self.n_agents)]

    def step(self, joint_actions) -> StepResult:
        rl_actions = self._check_step(joint_actions, self.n_actions)
        hidx = self.history.index(self.m)
        basic_actions = self.population.actions(hidx) if len(self.population) else np.zeros(0, dtype=np.uint8)
        basic_ones = int(basic_actions.sum())
        ones = basic_ones + int(rl_actions.sum())
        zeros = self.cfg.n_agents - ones
        if ones < zeros:
            minority, tie = 1, False
        elif zeros < ones:
            minority, tie = 0, False
        else:
            minority, tie = int(self._tie_rng.integers(0, 2)), True
        self.population.update(hidx, minority)
        self.history.push(minority)
        rewards = ((rl_actions == minority) & (not tie)).astype(float)
        n_basic = len(self.population)
        basic_winners = 0 if tie else (basic_ones if minority == 1 else n_basic - basic_ones)
        done = self._advance()
        summary = {
            "attendance": ones,
            "minority": minority,
            "tie": int(tie),
            "basic_split": int(2 * basic_ones == n_basic),
            "basic_mean_reward": basic_winners / n_basic if n_basic else 0.0,
        }
        return StepResult(self._observations(), rewards, done, summary)


@dataclass
class CycleInfo:
    start: int
    period: int
    winners: list[int]
    attendance: list[int]


def find_cycle(cfg: GameConfig, seed: int, max_steps: int = 64) -> CycleInfo | None:
    """Exact cycle detection for a default-only game.

    The deterministic state is (last m winners, per-agent relative scores). A
    repeat at step ``t`` of the state first seen at step ``s`` means the game is
    periodic from ``s`` on with period ``t - s``. Returns None if no repeat
    occurs within ``max_steps`` steps.
    """
    if cfg.rl_agent_ids:
        raise ContractViolation("cycle detection needs a default-only population")
    env = MinorityGameEnv(GameConfig(**{**cfg.to_dict(), "horizon": max_steps + 1}))
    env.reset(seed)
    seen: dict[bytes, int] = {}
    winners, attendance = [], []
    for t in range(max_steps + 1):
        key = env.history.recent(env.m).tobytes() + env.population.relative_scores().tobytes()
        if key in seen:
            s = seen[key]
            return CycleInfo(s, t - s, winners[s:t], attendance[s:t])
        seen[key] = t
        if t == max_steps:
            break
        res = env.step([])
        winners.append(int(res.summary["minority"]))
        attendance.append(int(res.summary["attendance"]))
    return None


def matches_pattern(cycle: Sequence[int], pattern: Sequence[int]) -> bool:
    """True if ``cycle`` equals ``pattern`` up to rotation and 0/1 relabelling."""
    cyc = list(cycle)
    pat = list(pattern)
    if len(cyc) != len(pat):
        return False
    flipped = [1 - b for b in pat]
    for r in range(len(cyc)):
        rotated = cyc[r:] + cyc[:r]
        if rotated == pat or rotated == flipped:
            return True
    return False

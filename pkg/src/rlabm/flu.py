"""Seasonal influenza vaccination model on a contact network.

Each season: agents decide to vaccinate (default agents with probability
``w``, RL agents by policy), vaccinated agents become immune with probability
equal to the vaccine efficacy, an epidemic is realised as bond percolation from
a few seed infections, and every agent evaluates the season's outcome and
updates its pro-vaccination experience.

Outcome combinations are coded ``2 * vaccinated + infected``:
0 = (not vaccinated, not infected), 1 = (not vaccinated, infected),
2 = (vaccinated, not infected), 3 = (vaccinated, infected).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .core import EnvBase, StepResult
from .errors import BurnInError, ContractViolation
from .network import ContactNetwork, generate_network, load_network
from .rng import RngStream

log = logging.getLogger(__name__)

COMBOS = ("no_vacc_uninfected", "no_vacc_infected", "vacc_uninfected", "vacc_infected")
OBS_WIDTH = 7
VACCINATE, ABSTAIN = 1, 0


def combo_code(vaccinated, infected):
    return 2 * np.asarray(vaccinated, dtype=np.int64) + np.asarray(infected, dtype=np.int64)


@dataclass
class TransmissionParams:
    gamma_rec: float = 1.0
    efficacy: float = 0.6
    seed_infections: int = 5
    # optional per-season efficacy drawn uniformly from this range
    efficacy_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.gamma_rec <= 0:
            raise ContractViolation("gamma_rec must be positive")
        if not 0.0 <= self.efficacy <= 1.0:
            raise ContractViolation("efficacy must lie in [0, 1]")
        if self.seed_infections < 0:
            raise ContractViolation("seed_infections must be >= 0")


@dataclass
class BehaviorParams:
    beta: tuple[float, float, float] = (1.0, 0.0, 0.0)
    omega_pe: float = 0.5
    omega_sn: float = 0.5
    s: float = 0.5
    # delta values indexed by combo code (see module docstring)
    delta_table: tuple[float, float, float, float] = (0.0, 1.0, 0.9, 0.1)
    prior_coverage: float = 0.4
    # HCW influence and socio-economic factor, inert in the simplified model
    phi: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.delta_table = tuple(float(d) for d in self.delta_table)
        if len(self.beta) != 3 or min(self.beta) < 0 or abs(sum(self.beta) - 1.0) > 1e-9:
            raise ContractViolation("beta coefficients must be convex")
        if min(self.omega_pe, self.omega_sn) < 0 or abs(self.omega_pe + self.omega_sn - 1.0) > 1e-9:
            raise ContractViolation("omega_pe + omega_sn must equal 1")
        if not 0.0 <= self.s <= 1.0:
            raise ContractViolation("s must lie in [0, 1]")
        if len(self.delta_table) != 4 or not all(0.0 <= d <= 1.0 for d in self.delta_table):
            raise ContractViolation("delta table needs four values in [0, 1]")
        if not 0.0 <= self.prior_coverage <= 1.0:
            raise ContractViolation("prior_coverage must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorParams":
        d = dict(d)
        table = d.pop("delta_table", None)
        if isinstance(table, dict):
            table = tuple(table[name] for name in COMBOS)
        if table is not None:
            d["delta_table"] = table
        return cls(**d)


@dataclass
class SeasonOutcome:
    vaccinated: np.ndarray
    immune: np.ndarray
    infected: np.ndarray
    seeds: np.ndarray

    @property
    def n(self) -> int:
        return len(self.infected)

    @property
    def coverage(self) -> float:
        return float(self.vaccinated.mean())

    @property
    def attack_rate(self) -> float:
        return float(self.infected.mean())

    @property
    def n_immune(self) -> int:
        return int(self.immune.sum())

    def counts(self) -> dict[str, int]:
        """End-of-season compartments; infected individuals have recovered."""
        r = int(self.infected.sum())
        imm = self.n_immune
        return {"S": self.n - r - imm, "I": 0, "R": r, "immune": imm}


# Behavioural model ---------------------------------------------------------------


def nsum(s: float, n: int) -> float:
    """``1 + s + ... + s^(n-1)``: the largest reachable experience after n seasons."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if s == 1.0:
        return float(n)
    return (1.0 - s**n) / (1.0 - s)


def evaluate_personal(vaccinated, infected, delta_table) -> np.ndarray | float:
    table = np.asarray(delta_table, dtype=float)
    out = table[combo_code(vaccinated, infected)]
    return float(out) if np.ndim(out) == 0 else out


def evaluate_social(proportions, delta_table) -> float:
    p = np.asarray(proportions, dtype=float)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ContractViolation("alter proportions must sum to 1")
    return float(p @ np.asarray(delta_table, dtype=float))


def combine_evaluations(delta_pe, delta_sn, omega_pe: float, omega_sn: float):
    return omega_pe * delta_pe + omega_sn * delta_sn


def update_experience(v_prev, delta, s: float):
    if np.any(np.asarray(v_prev) < 0):
        raise ContractViolation("experience must be non-negative")
    return s * v_prev + delta


def propensity(v, s: float, n: int):
    return v / nsum(s, n)


def vaccination_probability(upsilon, params: BehaviorParams, phi=None, psi=None):
    ba, bb, bc = params.beta
    phi = params.phi if phi is None else phi
    psi = params.psi if psi is None else psi
    return ba * upsilon + bb * phi + bc * psi


def alter_proportions(network: ContactNetwork, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node share of neighbours in each outcome combo; isolated rows are zero."""
    onehot = np.zeros((network.n_nodes, 4))
    onehot[np.arange(network.n_nodes), codes] = 1.0
    counts = network.adjacency @ onehot
    deg = counts.sum(axis=1)
    isolated = deg == 0
    props = counts / np.where(isolated, 1.0, deg)[:, None]
    return props, isolated


# Transmission ------------------------------------------------------------------


def edge_activation_prob(lam, gamma_rec: float):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0) or gamma_rec <= 0:
        raise ContractViolation("rates must be positive")
    out = -np.expm1(-lam / gamma_rec)
    return float(out) if out.ndim == 0 else out


def apply_vaccination(network: ContactNetwork, decisions, efficacy: float, rng: RngStream) -> np.ndarray:
    """Immunise each vaccinated node with probability ``efficacy`` and switch
    off every edge touching an immune node. Returns the immune mask.

    One uniform is drawn per node whatever the decisions, so streams stay
    aligned across runs that differ only in who vaccinates.
    """
    if not 0.0 <= efficacy <= 1.0:
        raise ContractViolation("efficacy must lie in [0, 1]")
    u = rng.random(network.n_nodes)
    immune = np.asarray(decisions, dtype=bool) & (u < efficacy)
    network.active = ~(immune[network.edges[:, 0]] | immune[network.edges[:, 1]])
    return immune


def run_sir_season(
    network: ContactNetwork,
    seeds,
    params: TransmissionParams,
    rng: RngStream,
    immune: np.ndarray | None = None,
    vaccinated: np.ndarray | None = None,
) -> SeasonOutcome:
    """Bond-percolation realisation of one epidemic.

    Every edge draws one uniform; an edge transmits if it is active and the
    draw is below ``T_ij``. Everything reachable from a seed through
    transmitting edges is infected (and ends the season recovered).
    """
    n = network.n_nodes
    immune = np.zeros(n, dtype=bool) if immune is None else np.asarray(immune, dtype=bool)
    vaccinated = immune.copy() if vaccinated is None else np.asarray(vaccinated, dtype=bool)
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    if seeds.size and immune[seeds].any():
        free = np.flatnonzero(~immune)
        bad = seeds[immune[seeds]]
        keep = seeds[~immune[seeds]]
        pool = np.setdiff1d(free, keep)
        take = min(len(bad), len(pool))
        log.info("reseeding %d immune seed(s) from remaining susceptibles", len(bad))
        seeds = np.concatenate([keep, rng.generator.choice(pool, size=take, replace=False)]) if take else keep
    u = rng.random(network.n_edges)
    T = edge_activation_prob(network.lam, params.gamma_rec) if network.n_edges else np.zeros(0)
    open_edges = network.active & (u < T) & ~immune[network.edges[:, 0]] & ~immune[network.edges[:, 1]]
    infected = np.zeros(n, dtype=bool)
    if seeds.size:
        e = network.edges[open_edges]
        graph = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        infected = np.isin(labels, labels[seeds])
    return SeasonOutcome(vaccinated, immune, infected, seeds)


def estimate_R0(network: ContactNetwork, params: TransmissionParams) -> dict[str, float]:
    """Mean transmissibility times (a) mean degree and (b) mean excess degree."""
    deg = network.degree.astype(float)
    t_mean = float(np.mean(edge_activation_prob(network.lam, params.gamma_rec))) if network.n_edges else 0.0
    k1 = deg.mean()
    k2 = (deg**2).mean()
    excess = (k2 - k1) / k1 if k1 > 0 else 0.0
    return {"mean_degree": k1 * t_mean, "excess_degree": excess * t_mean, "mean_T": t_mean}


# Environment --------------------------------------------------------------------


@dataclass
class FluConfig:
    network: dict = field(default_factory=lambda: {"kind": "powerlaw", "n": 2000, "exponent": 2.5, "kmin": 3, "kmax": 60})
    network_path: str | None = None
    network_seed: int = 0
    transmission: TransmissionParams = field(default_factory=TransmissionParams)
    behavior: BehaviorParams = field(default_factory=BehaviorParams)
    rl_agent_ids: list[int] = field(default_factory=list)
    horizon: int = 10**9

    @classmethod
    def from_dict(cls, d: dict) -> "FluConfig":
        d = dict(d)
        tr = d.pop("transmission", {})
        bh = d.pop("behavior", {})
        if "efficacy_range" in tr and tr["efficacy_range"] is not None:
            tr = {**tr, "efficacy_range": tuple(tr["efficacy_range"])}
        return cls(transmission=TransmissionParams(**tr), behavior=BehaviorParams.from_dict(bh), **d)

    def to_dict(self) -> dict:
        b = self.behavior
        t = self.transmission
        return {
            "network": dict(self.network),
            "network_path": self.network_path,
            "network_seed": self.network_seed,
            "transmission": {
                "gamma_rec": t.gamma_rec,
                "efficacy": t.efficacy,
                "seed_infections": t.seed_infections,
                "efficacy_range": list(t.efficacy_range) if t.efficacy_range else None,
            },
            "behavior": {
                "beta": list(b.beta),
                "omega_pe": b.omega_pe,
                "omega_sn": b.omega_sn,
                "s": b.s,
                "delta_table": dict(zip(COMBOS, b.delta_table)),
                "prior_coverage": b.prior_coverage,
                "phi": b.phi,
                "psi": b.psi,
            },
            "rl_agent_ids": list(self.rl_agent_ids),
            "horizon": self.horizon,
        }


class FluEnv(EnvBase):
    """Seasonal flu model; one ``step`` is one season.

    External agents are the nodes in ``rl_agent_ids``; action 1 = vaccinate.
    Observation per RL agent (width 7): own vaccinated and infected flags from
    the previous season, the four alter-outcome proportions (combo order), and
    a healthcare-worker slot that is always 0 in the simplified model.
    Reward: 1 if the agent was not infected this season.
    """

    n_actions = 2

    def __init__(self, cfg: FluConfig, network: ContactNetwork | None = None):
        self.cfg = cfg
        if network is None:
            if cfg.network_path:
                network = load_network(cfg.network_path)
            else:
                network = generate_network(cfg.network, RngStream(cfg.network_seed, "network"))
        self.network = network
        self.n = network.n_nodes
        self.horizon = cfg.horizon
        self.set_rl_agents(cfg.rl_agent_ids)
        self.last_outcome: SeasonOutcome | None = None

    def set_rl_agents(self, ids) -> None:
        """Swap which nodes are driven externally (e.g. after burn-in)."""
        ids = np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n or len(np.unique(ids)) != len(ids)):
            raise ContractViolation("rl_agent_ids must be distinct node indices")
        self.rl_ids = ids
        self.n_agents = len(ids)

    def config_snapshot(self) -> dict:
        d = self.cfg.to_dict()
        d["rl_agent_ids"] = [int(i) for i in self.rl_ids]
        return {"env": "flu", **d}

    def reset(self, seed: int) -> list[np.ndarray]:
        root = RngStream(seed, "flu")
        self._rng_decide = root.fork("decisions")
        self._rng_immunity = root.fork("immunity")
        self._rng_seeding = root.fork("seeding")
        self._rng_percolation = root.fork("percolation")
        self._rng_efficacy = root.fork("efficacy")
        self.V = np.zeros(self.n)
        self.season = 0
        self.last_vacc = np.zeros(self.n, dtype=bool)
        self.last_inf = np.zeros(self.n, dtype=bool)
        self.props = np.zeros((self.n, 4))
        self.sir_state = np.zeros(self.n, dtype=np.int8)  # 0 = S, 1 = I, 2 = R
        self.last_outcome = None
        self._begin_episode()
        return self.observations()

    # per-agent views --------------------------------------------------------------

    def upsilon(self) -> np.ndarray:
        if self.season == 0:
            return np.full(self.n, self.cfg.behavior.prior_coverage)
        return propensity(self.V, self.cfg.behavior.s, self.season)

    def vaccination_probabilities(self) -> np.ndarray:
        if self.season == 0:
            return np.full(self.n, self.cfg.behavior.prior_coverage)
        return np.clip(vaccination_probability(self.upsilon(), self.cfg.behavior), 0.0, 1.0)

    def observation_of(self, node: int) -> np.ndarray:
        obs = np.zeros(OBS_WIDTH)
        obs[0] = float(self.last_vacc[node])
        obs[1] = float(self.last_inf[node])
        obs[2:6] = self.props[node]
        return obs

    def observations(self) -> list[np.ndarray]:
        return [self.observation_of(int(i)) for i in self.rl_ids]

    # season pipeline ----------------------------------------------------------------

    def decide(self, rl_actions) -> np.ndarray:
        u = self._rng_decide.random(self.n)
        vacc = u < self.vaccination_probabilities()
        vacc[self.rl_ids] = np.asarray(rl_actions, dtype=int) == VACCINATE
        return vacc

    def season_efficacy(self) -> float:
        t = self.cfg.transmission
        draw = self._rng_efficacy.random()
        if t.efficacy_range is None:
            return t.efficacy
        lo, hi = t.efficacy_range
        return float(lo + (hi - lo) * draw)

    def step(self, joint_actions) -> StepResult:
        rl_actions = self._check_step(joint_actions, self.n_actions)
        outcome = self.season_step(rl_actions)
        done = self._advance()
        rewards = (~outcome.infected[self.rl_ids]).astype(float)
        summary = {
            "coverage": outcome.coverage,
            "attack_rate": outcome.attack_rate,
            "n_immune": outcome.n_immune,
            "rl_mean_reward": float(rewards.mean()) if rewards.size else 0.0,
        }
        return StepResult(self.observations(), rewards, done, summary)

    def season_step(self, rl_actions=()) -> SeasonOutcome:
        """Decision -> vaccination -> epidemic -> evaluation -> experience update."""
        trans = self.cfg.transmission
        vacc = self.decide(rl_actions)
        efficacy = self.season_efficacy()
        immune = apply_vaccination(self.network, vacc, efficacy, self._rng_immunity)
        order = self._rng_seeding.permutation(self.n)
        candidates = order[~immune[order]]
        seeds = candidates[: trans.seed_infections]
        outcome = run_sir_season(self.network, seeds, trans, self._rng_percolation, immune=immune, vaccinated=vacc)
        self.sir_state = np.where(outcome.infected, 2, 0).astype(np.int8)
        self._evaluate(outcome)
        self.network.active[:] = True
        self.last_outcome = outcome
        return outcome

    def _evaluate(self, outcome: SeasonOutcome) -> None:
        b = self.cfg.behavior
        codes = combo_code(outcome.vaccinated, outcome.infected)
        table = np.asarray(b.delta_table)
        d_pe = table[codes]
        props, isolated = alter_proportions(self.network, codes)
        d_sn = np.where(isolated, d_pe, props @ table)
        delta = combine_evaluations(d_pe, d_sn, b.omega_pe, b.omega_sn)
        self.V = update_experience(self.V, delta, b.s)
        self.season += 1
        self.last_vacc = outcome.vaccinated.copy()
        self.last_inf = outcome.infected.copy()
        self.props = props


def flu_rl_interface(env: FluEnv, node: int) -> tuple[np.ndarray, float]:
    """(observation, last-season reward) for one node after a completed season."""
    if env.season < 1:
        raise ContractViolation("no completed season yet")
    return env.observation_of(node), float(not env.last_inf[node])


def burn_in(env: FluEnv, window: int = 50, tol: float = 0.01, max_seasons: int = 2000) -> int:
    """Run default-only seasons until coverage and attack rate are stationary.

    Stops at the first season count ``t >= 2 * window`` where the means over
    the last ``window`` seasons differ from the ``window`` before by less than
    ``tol`` for both series. With ``tol = inf`` the criterion is vacuous and
    the run stops after ``window`` seasons. Returns the number of seasons run.
    """
    if window < 10:
        raise ContractViolation("burn-in window must be >= 10")
    saved = env.rl_ids
    env.set_rl_agents([])
    cov, att = [], []
    try:
        for t in range(1, max_seasons + 1):
            out = env.season_step(())
            cov.append(out.coverage)
            att.append(out.attack_rate)
            if math.isinf(tol) and t >= window:
                return t
            if t >= 2 * window:
                dc = abs(np.mean(cov[-window:]) - np.mean(cov[-2 * window : -window]))
                da = abs(np.mean(att[-window:]) - np.mean(att[-2 * window : -window]))
                if dc < tol and da < tol:
                    return t
        raise BurnInError(
            f"no stationary state within {max_seasons} seasons",
            {"coverage": cov[-2 * window :], "attack_rate": att[-2 * window :]},
        )
    finally:
        env.set_rl_agents(saved)

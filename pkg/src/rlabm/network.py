"""Undirected weighted contact networks: generation, loading, saving."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation
from .rng import RngStream

log = logging.getLogger(__name__)


@dataclass
class ContactNetwork:
    """Simple undirected graph; ``edges[e] = (i, j)`` with ``i < j`` and rate ``lam[e]``.

    ``active`` is the per-edge flag owned by the running season (edges touching
    immune nodes are switched off for that season).
    """

    n_nodes: int
    edges: np.ndarray
    lam: np.ndarray
    active: np.ndarray = field(default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (len(self.edges),)).copy()
        if self.n_nodes < 2:
            raise ContractViolation("a network needs at least two nodes")
        if len(self.edges):
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ContractViolation("self-loops are not allowed")
            if self.edges.min() < 0 or self.edges.max() >= self.n_nodes:
                raise ContractViolation("edge endpoint out of range")
        if np.any(self.lam <= 0):
            raise ContractViolation("contact rates must be positive")
        self.edges = np.sort(self.edges, axis=1)
        keys = self.edges[:, 0] * self.n_nodes + self.edges[:, 1]
        if len(np.unique(keys)) != len(keys):
            raise ContractViolation("duplicate edges are not allowed")
        if self.active is None:
            self.active = np.ones(len(self.edges), dtype=bool)
        self._adjacency = None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def degree(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adjacency is None:
            i, j = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(i))
            self._adjacency = sp.csr_matrix(
                (data, (np.concatenate([i, j]), np.concatenate([j, i]))), shape=(self.n_nodes, self.n_nodes)
            )
        return self._adjacency

    def neighbors(self, node: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[node] : a.indptr[node + 1]]

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        for (i, j), lam in zip(self.edges, self.lam):
            g.add_edge(int(i), int(j), weight=float(lam))
        return g


def _fmt(x: float) -> str:
    return repr(float(x))


def save_network(net: ContactNetwork, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "lambda"])
        for (i, j), lam in zip(net.edges, net.lam):
            w.writerow([int(i), int(j), _fmt(lam)])


def load_network(path: str | Path, n_nodes: int | None = None) -> ContactNetwork:
    """Read a CSV edge list with header ``i,j,lambda``.

    The node count is ``max index + 1`` unless ``n_nodes`` is given (isolated
    trailing nodes are otherwise invisible in an edge list).
    """
    edges, lams = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["i", "j", "lambda"]:
            raise ValueError(f"{path}:1: expected header 'i,j,lambda', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                i, j, lam = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if i == j or i < 0 or j < 0 or not lam > 0:
                raise ValueError(f"{path}:{lineno}: invalid edge ({i}, {j}, {lam})")
            edges.append((i, j))
            lams.append(lam)
    n = n_nodes if n_nodes is not None else (max(max(e) for e in edges) + 1 if edges else 0)
    return ContactNetwork(max(n, 2), np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(lams))


# Generation ------------------------------------------------------------------------


def powerlaw_pmf(exponent: float, kmin: int, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    ks = np.arange(kmin, kmax + 1)
    w = ks.astype(float) ** (-exponent)
    return ks, w / w.sum()


def target_mean_degree(spec: dict) -> float:
    kind = spec["kind"]
    if kind == "ring":
        return float(spec.get("k", 2))
    if kind == "regular":
        return float(spec["d"])
    if kind == "poisson":
        return float(spec["mean"])
    if kind == "powerlaw":
        ks, p = powerlaw_pmf(spec.get("exponent", 2.5), spec.get("kmin", 2), spec.get("kmax", 100))
        return float(np.dot(ks, p))
    if kind == "degrees":
        return float(np.mean(spec["degrees"]))
    raise ContractViolation(f"unknown network kind {kind!r}")


def sample_degrees(spec: dict, rng: RngStream) -> np.ndarray:
    n = int(spec["n"])
    kind = spec["kind"]
    if kind == "regular":
        deg = np.full(n, int(spec["d"]))
    elif kind == "poisson":
        deg = rng.generator.poisson(float(spec["mean"]), size=n)
    elif kind == "powerlaw":
        ks, p = powerlaw_pmf(spec.get("exponent", 2.5), spec.get("kmin", 2), spec.get("kmax", 100))
        deg = rng.generator.choice(ks, size=n, p=p)
    elif kind == "degrees":
        deg = np.asarray(spec["degrees"], dtype=np.int64)
        if len(deg) != n:
            raise ContractViolation("degree list length must equal n")
        return deg
    else:
        raise ContractViolation(f"unknown network kind {kind!r}")
    if deg.sum() % 2:
        # parity fix for sampled sequences: one extra stub on a random node
        deg[int(rng.integers(0, n))] += 1
    return deg.astype(np.int64)


def configuration_model(degrees: np.ndarray, rng: RngStream) -> np.ndarray:
    """Erased configuration model: random stub matching, then drop self-loops
    and duplicate edges. Returns an (E, 2) edge array with i < j."""
    stubs = np.repeat(np.arange(len(degrees)), degrees)
    stubs = stubs[rng.permutation(len(stubs))]
    pairs = np.sort(stubs.reshape(-1, 2), axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(pairs, axis=0)
    return pairs


def generate_network(spec: dict, rng: RngStream) -> ContactNetwork:
    """Build a network from a spec dict.

    kinds: ``ring`` (n, k even), ``regular`` (n, d), ``poisson`` (n, mean),
    ``powerlaw`` (n, exponent, kmin, kmax), ``degrees`` (n, degrees). The
    contact rate is the scalar ``lambda`` (default 1.0) on every edge.
    """
    n = int(spec.get("n", 0))
    if n < 2:
        raise ContractViolation("network size must be >= 2")
    lam = float(spec.get("lambda", 1.0))
    if spec["kind"] == "ring":
        k = int(spec.get("k", 2))
        if k % 2 or k >= n:
            raise ContractViolation("ring lattice needs an even k < n")
        edges = [(i, (i + d) % n) for i in range(n) for d in range(1, k // 2 + 1)]
        return ContactNetwork(n, np.array(edges), lam)
    degrees = sample_degrees(spec, rng)
    if not nx.is_graphical(degrees.tolist()):
        raise ContractViolation("degree sequence is not graphical")
    edges = configuration_model(degrees, rng)
    return ContactNetwork(n, edges, lam)

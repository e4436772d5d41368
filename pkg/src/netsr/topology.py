"""Network topology generators and the adjacency container.

The matrix convention follows the coupled-equation form: entry (i, j) is the
weight with which node j drives node i, so a node's in-degree is the number
of stored entries in its row.  Training topologies are undirected with unit
weights; the container itself also accepts directed weighted graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

TOPOLOGY_KINDS = ("grid", "power_law", "small_world", "community", "random")

# Generation defaults per network family.
DEFAULT_PARAMS: dict[str, dict] = {
    "grid": {},
    "power_law": {"m": 5},
    "small_world": {"k": 5, "p": 0.5},
    "community": {"communities": 4, "p_in": 0.25, "p_out": 0.01},
    "random": {"p": 0.1},
}
N_RANGE_DEFAULT = (10, 200)


class InvalidSpec(Exception):
    """Topology parameters are inconsistent."""


@dataclass
class Adjacency:
    """Sparse weighted adjacency; ``entries[(i, j)]`` is A_ij."""

    n: int
    entries: dict[tuple[int, int], float]
    directed: bool = False

    def __post_init__(self):
        for (i, j), w in self.entries.items():
            if i == j:
                raise InvalidSpec(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise InvalidSpec(f"entry ({i},{j}) outside 0..{self.n - 1}")
        if not self.directed:
            for (i, j) in list(self.entries):
                if self.entries.get((j, i)) != self.entries[(i, j)]:
                    raise InvalidSpec("undirected adjacency must be symmetric")

    @classmethod
    def from_undirected_edges(
        cls, n: int, edges: Iterable[tuple[int, int]], weight: float = 1.0
    ) -> "Adjacency":
        entries: dict[tuple[int, int], float] = {}
        for i, j in edges:
            entries[(i, j)] = weight
            entries[(j, i)] = weight
        return cls(n, entries, directed=False)

    def in_neighbors(self, i: int) -> list[tuple[int, float]]:
        """Nodes driving i, sorted by id, with their weights."""
        out = [(j, w) for (r, j), w in self.entries.items() if r == i]
        out.sort()
        return out

    def in_degree(self, i: int) -> int:
        return sum(1 for (r, _j) in self.entries if r == i)

    def in_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for (i, _j) in self.entries:
            deg[i] += 1
        return deg

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dst, src, weight) arrays over all entries, sorted for determinism."""
        items = sorted(self.entries.items())
        if not items:
            return (np.zeros(0, int), np.zeros(0, int), np.zeros(0))
        dst = np.array([i for (i, _), _ in items], int)
        src = np.array([j for (_, j), _ in items], int)
        w = np.array([w for _, w in items], float)
        return dst, src, w

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for (i, j), w in self.entries.items():
            a[i, j] = w
        return a

    @property
    def n_edges(self) -> int:
        if self.directed:
            return len(self.entries)
        return len(self.entries) // 2


def component_count(adj: Adjacency) -> int:
    """Weakly connected components."""
    parent = list(range(adj.n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for (i, j) in adj.entries:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(adj.n)})


@dataclass
class TopologySpec:
    kind: str
    n: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TOPOLOGY_KINDS:
            raise InvalidSpec(f"unknown topology kind {self.kind!r}")
        if self.n < 2:
            raise InvalidSpec(f"need at least 2 nodes, got {self.n}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        self.params = merged


def _seed_int(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def generate_topology(spec: TopologySpec, rng: np.random.Generator) -> Adjacency:
    """Build one graph of the requested family (undirected, unit weights)."""
    n, p = spec.n, spec.params
    if spec.kind == "grid":
        side = math.isqrt(n)
        if side * side != n:
            raise InvalidSpec(f"grid size {n} is not a perfect square")
        g = nx.grid_2d_graph(side, side)
        g = nx.relabel_nodes(g, {(r, c): r * side + c for r, c in g.nodes})
    elif spec.kind == "power_law":
        m = int(p["m"])
        if m < 1 or m + 1 >= n:
            raise InvalidSpec(f"power_law needs 1 <= m and m+1 < n (m={m}, n={n})")
        g = nx.barabasi_albert_graph(
            n, m, seed=_seed_int(rng), initial_graph=nx.complete_graph(m + 1)
        )
    elif spec.kind == "small_world":
        k = int(p["k"])
        if k >= n:
            raise InvalidSpec(f"small_world needs k < n (k={k}, n={n})")
        g = nx.watts_strogatz_graph(n, k, float(p["p"]), seed=_seed_int(rng))
    elif spec.kind == "community":
        sizes = p.get("sizes")
        if sizes is None:
            k = int(p["communities"])
            if k < 1 or k > n:
                raise InvalidSpec(f"bad community count {k} for n={n}")
            base, extra = divmod(n, k)
            sizes = [base + (1 if i < extra else 0) for i in range(k)]
        sizes = [int(s) for s in sizes]
        if sum(sizes) != n:
            raise InvalidSpec(f"community sizes {sizes} do not sum to n={n}")
        p_in, p_out = float(p["p_in"]), float(p["p_out"])
        probs = [
            [p_in if a == b else p_out for b in range(len(sizes))]
            for a in range(len(sizes))
        ]
        g = nx.stochastic_block_model(sizes, probs, seed=_seed_int(rng))
    else:  # random
        g = nx.gnp_random_graph(n, float(p["p"]), seed=_seed_int(rng))
    return Adjacency.from_undirected_edges(n, g.edges())


def sample_spec(rng: np.random.Generator, n_range: tuple[int, int] = N_RANGE_DEFAULT) -> TopologySpec:
    """Random family and size, for training-data synthesis."""
    kind = TOPOLOGY_KINDS[int(rng.integers(len(TOPOLOGY_KINDS)))]
    lo, hi = n_range
    n = int(rng.integers(lo, hi + 1))
    if kind == "grid":
        side = max(2, round(math.sqrt(n)))
        n = side * side
    if kind == "power_law":
        n = max(n, DEFAULT_PARAMS["power_law"]["m"] + 2)
    if kind == "small_world":
        n = max(n, DEFAULT_PARAMS["small_world"]["k"] + 1)
    return TopologySpec(kind, n)


def save_edge_list(adj: Adjacency, path: str | Path) -> None:
    lines = [f"# netsr-topology n={adj.n} directed={int(adj.directed)}"]
    for (i, j), w in sorted(adj.entries.items()):
        if not adj.directed and j < i:
            continue  # one line per undirected edge
        lines.append(f"{i} {j} {w!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_edge_list(path: str | Path) -> Adjacency:
    text = Path(path).read_text().strip().splitlines()
    if not text or not text[0].startswith("# netsr-topology"):
        raise InvalidSpec(f"{path}: missing topology header")
    head = dict(kv.split("=") for kv in text[0].split()[2:])
    n, directed = int(head["n"]), bool(int(head["directed"]))
    entries: dict[tuple[int, int], float] = {}
    for line in text[1:]:
        if not line.strip():
            continue
        i, j, w = line.split()
        entries[(int(i), int(j))] = float(w)
        if not directed:
            entries[(int(j), int(i))] = float(w)
    return Adjacency(n, entries, directed=directed)

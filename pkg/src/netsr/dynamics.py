"""Coupled network dynamics: assembly, integration, benchmark presets.

A system pairs equation skeletons with a topology; node i evolves as the
self part of its own state plus the weighted sum of the interaction part
over its in-neighbors.  Heterogeneous systems share one skeleton and vary
the constants per node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import expr
from .corpus import EquationPair
from .topology import Adjacency, TopologySpec, generate_topology


class UnknownPreset(Exception):
    pass


class SizeMismatch(Exception):
    pass


class BlowUp(Exception):
    """Integration left the finite range; carries the partial trajectory."""

    def __init__(self, message: str, trajectory: "Trajectory", time: float):
        super().__init__(message)
        self.trajectory = trajectory
        self.time = time


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (T,)
    states: np.ndarray  # (T, n, d)

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times/states length mismatch")

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


@dataclass(frozen=True)
class NetworkSystem:
    """Equation pairs on a topology; one pair per state component.

    ``node_constants`` (n, total) overrides the pairs' constant vectors per
    node; its columns follow [self constants, inter constants] for each pair
    in order.
    """

    pairs: tuple[EquationPair, ...]
    adj: Adjacency
    node_constants: np.ndarray | None = None

    def __post_init__(self):
        pairs = self.pairs
        if isinstance(pairs, EquationPair):
            object.__setattr__(self, "pairs", (pairs,))
            pairs = self.pairs
        if not pairs:
            raise ValueError("need at least one equation pair")
        dims = {p.dim for p in pairs}
        if len(dims) != 1:
            raise ValueError("all pairs must share one input dimension")
        if self.node_constants is not None:
            nc = np.asarray(self.node_constants, float)
            total = sum(
                len(p.self_constants) + len(p.inter_constants) for p in pairs
            )
            if nc.shape != (self.adj.n, total):
                raise SizeMismatch(
                    f"node_constants shape {nc.shape} != ({self.adj.n}, {total})"
                )
            object.__setattr__(self, "node_constants", nc)

    @property
    def dim(self) -> int:
        return self.pairs[0].dim

    @property
    def out_dim(self) -> int:
        return len(self.pairs)

    def _constant_columns(self, pair_idx: int) -> tuple[slice, slice]:
        start = 0
        for p in self.pairs[:pair_idx]:
            start += len(p.self_constants) + len(p.inter_constants)
        p = self.pairs[pair_idx]
        s = slice(start, start + len(p.self_constants))
        i = slice(s.stop, s.stop + len(p.inter_constants))
        return s, i


def rhs(system: NetworkSystem, state: np.ndarray) -> np.ndarray:
    """Per-node output (n, out_dim) of the assembled equations."""
    state = np.asarray(state, float)
    n, d = system.adj.n, system.dim
    if state.shape != (n, d):
        raise ValueError(f"state shape {state.shape} != ({n}, {d})")
    dst, src, w = system.adj.edge_arrays()
    out = np.zeros((n, system.out_dim))
    for pi, pair in enumerate(system.pairs):
        scol, icol = system._constant_columns(pi)
        bind_self = {expr.var_symbol("i", k): state[:, k] for k in range(d)}
        self_c = (
            system.node_constants[:, scol].T
            if system.node_constants is not None
            else pair.self_constants
        )
        rs = expr.eval_batch(pair.f_self, bind_self, self_c, shape=(n,))
        _raise_bad(rs, np.arange(n))
        total = rs.values.copy()
        if dst.size:
            bind = {expr.var_symbol("i", k): state[dst, k] for k in range(d)}
            bind.update({expr.var_symbol("j", k): state[src, k] for k in range(d)})
            inter_c = (
                system.node_constants[dst][:, icol].T
                if system.node_constants is not None
                else pair.inter_constants
            )
            ri = expr.eval_batch(pair.f_inter, bind, inter_c, shape=(dst.size,))
            _raise_bad(ri, dst)
            np.add.at(total, dst, w * ri.values)
        out[:, pi] = total
    return out


def _raise_bad(res: expr.EvalResult, node_ids: np.ndarray) -> None:
    bad = ~res.ok
    if bad.any():
        node = int(np.asarray(node_ids)[np.argmax(bad)])
        if res.domain_bad.any():
            raise expr.DomainError(f"domain violation at node {node}")
        raise expr.Overflow(f"overflow at node {node}")


def integrate(
    system: NetworkSystem,
    x0: np.ndarray,
    t_delta: float,
    horizon: float,
) -> Trajectory:
    """Classical fixed-step RK4 from 0 to horizon."""
    if t_delta <= 0 or horizon < t_delta:
        raise ValueError("need t_delta > 0 and horizon >= t_delta")
    if system.out_dim != system.dim:
        raise ValueError(
            f"system maps R^{system.dim} states to R^{system.out_dim} outputs; "
            "integration needs one pair per state component"
        )
    x = np.asarray(x0, float).reshape(system.adj.n, system.dim).copy()
    steps = int(round(horizon / t_delta))
    times = np.arange(steps + 1) * t_delta
    states = np.empty((steps + 1, system.adj.n, system.dim))
    states[0] = x
    for s in range(steps):
        try:
            k1 = rhs(system, x)
            k2 = rhs(system, x + 0.5 * t_delta * k1)
            k3 = rhs(system, x + 0.5 * t_delta * k2)
            k4 = rhs(system, x + t_delta * k3)
        except (expr.DomainError, expr.Overflow) as exc:
            partial = Trajectory(times[: s + 1].copy(), states[: s + 1].copy())
            raise BlowUp(f"rhs failed at t={times[s]:.6g}: {exc}", partial, float(times[s]))
        x = x + (t_delta / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.isfinite(x).all():
            partial = Trajectory(times[: s + 1].copy(), states[: s + 1].copy())
            raise BlowUp(f"state left finite range at t={times[s + 1]:.6g}", partial, float(times[s + 1]))
        states[s + 1] = x
    return Trajectory(times, states)


# ---------------------------------------------------------------------------
# Benchmark dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicsPreset:
    name: str
    pair: EquationPair
    x0_range: tuple[float, float]
    t_delta: float
    t_train: float  # recording horizon
    t_predict: float  # extrapolation horizon

    def sample_x0(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.x0_range
        return rng.uniform(lo, hi, size=(n, self.pair.dim))

    def system(self, adj: Adjacency) -> NetworkSystem:
        return NetworkSystem(self.pair, adj)


def _presets() -> dict[str, DynamicsPreset]:
    P = EquationPair.from_prefix
    table = {
        # protein influx/degradation with mass-action coupling
        "bio": DynamicsPreset(
            "bio",
            P("sub c mul c x_{i,0}", "mul x_{i,0} x_{j,0}", (1.0, -1.0), ()),
            (0.0, 2.0), 0.0001, 0.1, 0.5,
        ),
        # SIS epidemic: recovery plus infection pressure from neighbors
        "epi": DynamicsPreset(
            "epi",
            P("mul c x_{i,0}", "mul sub c x_{i,0} x_{j,0}", (-1.0,), (1.0,)),
            (0.0, 1.0), 0.001, 1.0, 5.0,
        ),
        # gene regulation: linear decay, Hill activation (h=2)
        "gene": DynamicsPreset(
            "gene",
            P("mul c x_{i,0}", "div pow2 x_{j,0} add pow2 x_{j,0} c", (-1.0,), (1.0,)),
            (0.0, 2.0), 0.01, 5.0, 10.0,
        ),
        # heat diffusion along edges
        "heat": DynamicsPreset(
            "heat",
            P("", "mul c sub x_{j,0} x_{i,0}", (), (1.0,)),
            (0.0, 1.0), 0.01, 1.0, 5.0,
        ),
        # mutualistic populations with saturating interaction
        "mutu": DynamicsPreset(
            "mutu",
            P(
                "add c mul x_{i,0} mul sub c div x_{i,0} c sub div x_{i,0} c c",
                "div mul x_{i,0} x_{j,0} add c add mul c x_{i,0} mul c x_{j,0}",
                (1.0, 1.0, 5.0, 1.0, 1.0),
                (5.0, 0.9, 0.1),
            ),
            (0.0, 2.0), 0.001, 1.0, 5.0,
        ),
        # competitive Lotka-Volterra
        "lv": DynamicsPreset(
            "lv",
            P("mul x_{i,0} sub c mul c x_{i,0}", "mul c mul x_{i,0} x_{j,0}", (0.5, 1.0), (-1.0,)),
            (0.0, 5.0), 0.0001, 0.1, 0.5,
        ),
    }
    return table


PRESET_NAMES = tuple(_presets())


def preset(name: str) -> DynamicsPreset:
    try:
        return _presets()[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {PRESET_NAMES}") from None


def heterogeneous_sis(
    sizes: Sequence[int],
    deltas: Sequence[float],
    beta: float = 1.0,
    topology: Adjacency | None = None,
    rng: np.random.Generator | None = None,
) -> NetworkSystem:
    """Epidemic system with community-specific recovery rates.

    Every node shares the skeleton (-delta * x, beta * (1 - x_i) * x_j); the
    delta constant varies with the node's community.  Without an explicit
    topology a stochastic block graph over the given sizes is generated.
    """
    if len(sizes) != len(deltas):
        raise SizeMismatch(f"{len(sizes)} sizes vs {len(deltas)} deltas")
    n = int(sum(sizes))
    if topology is None:
        if rng is None:
            raise ValueError("need a topology or an rng to generate one")
        topology = generate_topology(
            TopologySpec("community", n, {"sizes": list(sizes)}), rng
        )
    if topology.n != n:
        raise SizeMismatch(f"topology has {topology.n} nodes, sizes sum to {n}")
    pair = EquationPair.from_prefix(
        "mul c x_{i,0}",
        "mul c mul sub c x_{i,0} x_{j,0}",
        (-1.0,),
        (float(beta), 1.0),
    )
    node_constants = np.empty((n, 3))
    start = 0
    for size, delta in zip(sizes, deltas):
        node_constants[start : start + size, 0] = -float(delta)
        node_constants[start : start + size, 1] = float(beta)
        node_constants[start : start + size, 2] = 1.0
        start += size
    return NetworkSystem((pair,), topology, node_constants)


def community_slices(sizes: Sequence[int]) -> list[slice]:
    out, start = [], 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_trajectory(
    traj: Trajectory, path: str | Path, meta: dict | None = None
) -> None:
    """Wide tabular text: time column then node-major state columns."""
    parts = [f"{k}={v}" for k, v in sorted((meta or {}).items())]
    n, d = traj.n_nodes, traj.dim
    lines = [f"# netsr-trajectory n={n} d={d}" + ("".join(" " + p for p in parts))]
    for t, row in zip(traj.times, traj.states):
        cells = [repr(float(t))] + [repr(float(v)) for v in row.reshape(-1)]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path: str | Path) -> tuple[Trajectory, dict]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or not lines[0].startswith("# netsr-trajectory"):
        raise ValueError(f"{path}: missing trajectory header")
    meta = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    n, d = int(meta.pop("n")), int(meta.pop("d"))
    times, states = [], []
    for line in lines[1:]:
        vals = [float(v) for v in line.split("\t")]
        times.append(vals[0])
        states.append(np.array(vals[1:]).reshape(n, d))
    return Trajectory(np.array(times), np.array(states)), meta

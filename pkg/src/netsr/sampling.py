"""Observation assembly: derivative estimation, node selection, decorrelation
and distribution scaling.

The application pipeline walks a recorded trajectory into the model's input
format: pick informative nodes, estimate dx/dt with the five-point stencil,
thin each node's time series with Gaussian-mixture clustering, shape the
retained sample toward a normal marginal, and scale states to match the
training distribution.  Derivative targets stay raw; only states are scaled.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.mixture import GaussianMixture

from . import expr
from .topology import Adjacency


class TooShort(Exception):
    """Trajectory has fewer than five points."""


class TooMany(Exception):
    """More nodes requested than the graph has."""


class Degenerate(Exception):
    """Clustering asked for more components than distinct points."""


@dataclass(frozen=True)
class Triplet:
    """One observation: a center state, its neighbor states, its output."""

    center: int
    x_i: np.ndarray  # (d,)
    neighbors: np.ndarray  # (k, d)
    weights: np.ndarray  # (k,) edge weights aligned with neighbors
    y_i: np.ndarray  # (y_dim,)


@dataclass(frozen=True)
class Scaler:
    mu: np.ndarray  # (d,)
    sigma: np.ndarray  # (d,), strictly positive
    clamped: tuple[bool, ...] = ()

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("scaler sigma must be strictly positive")


@dataclass(frozen=True)
class ObservationSet:
    triplets: tuple[Triplet, ...]
    dim: int
    scaler: Scaler | None = None

    def __post_init__(self):
        for t in self.triplets:
            if len(t.x_i) != self.dim:
                raise ValueError("triplet dimension mismatch")

    def __len__(self) -> int:
        return len(self.triplets)


def finite_difference(times: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Five-point centered derivative estimates on a uniform grid.

    ``states`` is (T, ...) sampled at ``times``; returns the interior times
    (first and last two dropped) and matching derivative estimates.
    """
    times = np.asarray(times, float)
    states = np.asarray(states, float)
    if len(times) < 5:
        raise TooShort(f"need at least 5 time points, got {len(times)}")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("finite_difference expects a uniform time grid")
    delta = float(steps[0])
    # grouped as differences so constant signals give exactly zero
    d = (
        8.0 * (states[3:-1] - states[1:-3]) - (states[4:] - states[:-4])
    ) / (12.0 * delta)
    return times[2:-2], d


def select_nodes(adj: Adjacency, count: int) -> list[int]:
    """The ``count`` nodes of highest in-degree; ties go to smaller ids."""
    if count > adj.n:
        raise TooMany(f"asked for {count} of {adj.n} nodes")
    deg = adj.in_degrees()
    order = sorted(range(adj.n), key=lambda i: (-deg[i], i))
    return order[:count]


def _cluster_indices(
    series: np.ndarray, n_clusters: int, per_cluster: int, rng: np.random.Generator
) -> list[int]:
    """Indices of a decorrelated subsample: GMM components, then uniform
    draws without replacement inside each component."""
    series = np.asarray(series, float)
    n = len(series)
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    distinct = len(np.unique(series, axis=0))
    if n_clusters > distinct:
        raise Degenerate(f"{n_clusters} clusters for {distinct} distinct points")
    if n_clusters == 1:
        labels = np.zeros(n, int)
    else:
        gm = GaussianMixture(
            n_components=n_clusters,
            covariance_type="diag",
            max_iter=100,
            tol=1e-6,
            reg_covar=1e-8,
            init_params="kmeans",
            n_init=1,
            random_state=int(rng.integers(0, 2**31 - 1)),
        )
        with warnings.catch_warnings():
            # stopping at the iteration cap is part of the contract
            warnings.simplefilter("ignore", ConvergenceWarning)
            labels = gm.fit_predict(series)
    chosen: list[int] = []
    for comp in range(n_clusters):
        members = np.flatnonzero(labels == comp)
        if len(members) <= per_cluster:
            chosen.extend(int(i) for i in members)
        else:
            picks = rng.choice(members, size=per_cluster, replace=False)
            chosen.extend(int(i) for i in sorted(picks))
    return chosen


def cluster_decorrelate(
    series: Sequence[np.ndarray] | np.ndarray,
    n_clusters: int,
    per_cluster: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    arr = np.atleast_2d(np.asarray(series, float))
    idx = _cluster_indices(arr, n_clusters, per_cluster, rng)
    return [arr[i] for i in idx]


def fit_scaler(points: np.ndarray) -> Scaler:
    """Componentwise mean/std; zero-variance components clamp sigma to 1."""
    pts = np.atleast_2d(np.asarray(points, float))
    if len(pts) < 2:
        raise ValueError("fit_scaler needs at least two points")
    mu = pts.mean(axis=0)
    sigma = pts.std(axis=0)
    clamped = sigma <= 1e-12
    sigma = np.where(clamped, 1.0, sigma)
    return Scaler(mu, sigma, tuple(bool(c) for c in clamped))


def apply_scaler(points: np.ndarray, s: Scaler) -> np.ndarray:
    return (np.asarray(points, float) - s.mu) / s.sigma


def invert_scaler(points: np.ndarray, s: Scaler) -> np.ndarray:
    return np.asarray(points, float) * s.sigma + s.mu


def unscale_equation(pair, s: Scaler):
    """Substitute every variable leaf v with (v - mu)/sigma.

    The result evaluated on raw states equals the input evaluated on scaled
    states; constants are substituted as literals so the placeholder vector
    keeps its alignment.
    """

    def rewrite(tree: expr.ExprTree) -> expr.ExprTree:
        if tree.is_empty:
            return tree
        out: list[expr.Token] = []
        for tok in tree.tokens:
            if tok.kind is expr.TokenKind.VARIABLE:
                _role, k = expr.var_parts(tok.symbol)
                out.extend(
                    [
                        expr.Token(expr.TokenKind.BINARY, "div"),
                        expr.Token(expr.TokenKind.BINARY, "sub"),
                        tok,
                        expr.Token(expr.TokenKind.CONST_LIT, expr.CONST_SYMBOL, float(s.mu[k])),
                        expr.Token(expr.TokenKind.CONST_LIT, expr.CONST_SYMBOL, float(s.sigma[k])),
                    ]
                )
            else:
                out.append(tok)
        return expr.parse_prefix(out)

    return dataclasses.replace(
        pair, f_self=rewrite(pair.f_self), f_inter=rewrite(pair.f_inter)
    )


def unscale_observations(obs: ObservationSet) -> ObservationSet:
    """Map a scaled observation set back to raw coordinates (y untouched)."""
    if obs.scaler is None:
        return obs
    s = obs.scaler
    trips = tuple(
        dataclasses.replace(
            t,
            x_i=invert_scaler(t.x_i, s),
            neighbors=invert_scaler(t.neighbors, s) if len(t.neighbors) else t.neighbors,
        )
        for t in obs.triplets
    )
    return ObservationSet(trips, obs.dim, scaler=None)


def build_observation_set(
    times: np.ndarray,
    states: np.ndarray,
    adj: Adjacency,
    n_nodes: int,
    n_clusters: int,
    per_cluster: int,
    t_points: int,
    rng: np.random.Generator,
) -> tuple[ObservationSet, Scaler]:
    """Full preprocessing pass from a trajectory to scaled model input.

    ``states`` is (T, n, d).  Per selected node: five-point derivatives give
    the targets, clustering thins the time series, and ``t_points`` retained
    indices are kept by greedily matching draws from the fitted normal.
    Neighbor states are read at the center's own time index and scaled with
    the same scaler.
    """
    states = np.asarray(states, float)
    nodes = select_nodes(adj, n_nodes)
    fd_times, derivs = finite_difference(times, states)
    x = states[2:-2]  # aligned with fd_times
    retained: dict[int, list[int]] = {}
    for node in nodes:
        retained[node] = _cluster_indices(x[:, node, :], n_clusters, per_cluster, rng)
    pooled = np.concatenate([x[retained[n], n, :] for n in nodes], axis=0)
    scaler = fit_scaler(pooled)
    d = states.shape[2]
    triplets: list[Triplet] = []
    for node in nodes:
        idx = retained[node]
        draws = rng.normal(scaler.mu, scaler.sigma, size=(t_points, d))
        chosen = _greedy_match(x[idx, node, :], draws)
        nbrs = adj.in_neighbors(node)
        nb_ids = np.array([j for j, _ in nbrs], int)
        nb_w = np.array([w for _, w in nbrs], float)
        for c in chosen:
            t = idx[c]
            nb_states = (
                apply_scaler(x[t, nb_ids, :], scaler)
                if len(nb_ids)
                else np.zeros((0, d))
            )
            triplets.append(
                Triplet(
                    center=node,
                    x_i=apply_scaler(x[t, node, :], scaler),
                    neighbors=nb_states,
                    weights=nb_w,
                    y_i=derivs[t, node, :].copy(),
                )
            )
    obs = ObservationSet(tuple(triplets), dim=d, scaler=scaler)
    return obs, scaler


def _greedy_match(points: np.ndarray, draws: np.ndarray) -> list[int]:
    """For each draw in order, take the nearest unused point; selection only,
    never synthesis, so every retained x keeps its recorded derivative."""
    if len(points) <= len(draws):
        return list(range(len(points)))
    used = np.zeros(len(points), bool)
    out: list[int] = []
    for z in draws:
        dist = np.linalg.norm(points - z, axis=1)
        dist[used] = np.inf
        pick = int(np.argmin(dist))
        used[pick] = True
        out.append(pick)
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_observations(obs: ObservationSet, path: str | Path) -> None:
    """Tabular text format: one triplet per line -- center id, x components,
    neighbor count, flattened neighbor states, weights, y components."""
    path = Path(path)
    y_dim = len(obs.triplets[0].y_i) if obs.triplets else 1
    lines = [f"# netsr-observations dim={obs.dim} y_dim={y_dim} scaled={int(obs.scaler is not None)}"]
    for t in obs.triplets:
        parts = [str(t.center)]
        parts += [repr(float(v)) for v in t.x_i]
        parts.append(str(len(t.neighbors)))
        parts += [repr(float(v)) for v in np.asarray(t.neighbors).reshape(-1)]
        parts += [repr(float(v)) for v in t.weights]
        parts += [repr(float(v)) for v in t.y_i]
        lines.append("\t".join(parts))
    path.write_text("\n".join(lines) + "\n")
    if obs.scaler is not None:
        save_scaler(obs.scaler, path.with_suffix(path.suffix + ".scaler"))


def load_observations(path: str | Path) -> ObservationSet:
    path = Path(path)
    lines = path.read_text().strip().splitlines()
    head = dict(kv.split("=") for kv in lines[0].split()[2:])
    d, y_dim, scaled = int(head["dim"]), int(head["y_dim"]), bool(int(head["scaled"]))
    triplets: list[Triplet] = []
    for line in lines[1:]:
        f = line.split("\t")
        center = int(f[0])
        x_i = np.array([float(v) for v in f[1 : 1 + d]])
        pos = 1 + d
        k = int(f[pos])
        pos += 1
        nb = np.array([float(v) for v in f[pos : pos + k * d]]).reshape(k, d)
        pos += k * d
        w = np.array([float(v) for v in f[pos : pos + k]])
        pos += k
        y = np.array([float(v) for v in f[pos : pos + y_dim]])
        triplets.append(Triplet(center, x_i, nb, w, y))
    scaler = None
    spath = path.with_suffix(path.suffix + ".scaler")
    if scaled and spath.exists():
        scaler = load_scaler(spath)
    return ObservationSet(tuple(triplets), dim=d, scaler=scaler)


def save_scaler(s: Scaler, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "mu": [float(v) for v in s.mu],
                "sigma": [float(v) for v in s.sigma],
                "clamped": list(s.clamped),
            },
            sort_keys=True,
        )
        + "\n"
    )


def load_scaler(path: str | Path) -> Scaler:
    data = json.loads(Path(path).read_text())
    return Scaler(
        np.array(data["mu"], float),
        np.array(data["sigma"], float),
        tuple(bool(c) for c in data.get("clamped", [])),
    )

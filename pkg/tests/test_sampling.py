import dataclasses

import numpy as np
import pytest

from netsr import expr
from netsr.corpus import EquationPair
from netsr.dynamics import NetworkSystem, integrate, preset
from netsr.sampling import (
    Degenerate,
    ObservationSet,
    Scaler,
    TooMany,
    TooShort,
    Triplet,
    apply_scaler,
    build_observation_set,
    cluster_decorrelate,
    finite_difference,
    fit_scaler,
    invert_scaler,
    load_observations,
    save_observations,
    select_nodes,
    unscale_equation,
    unscale_observations,
)
from netsr.topology import Adjacency, TopologySpec, generate_topology


def rng(seed=0):
    return np.random.default_rng(seed)


class TestFiniteDifference:
    def test_exact_on_quadratic(self):
        t = np.arange(0, 2.0001, 0.1)
        x = (t**2)[:, None, None]
        ft, d = finite_difference(t, x)
        i = np.argmin(np.abs(ft - 1.0))
        assert ft[i] == pytest.approx(1.0)
        assert d[i, 0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_constant_gives_zero(self):
        t = np.arange(10) * 0.1
        x = np.full((10, 2, 1), 3.3)
        _, d = finite_difference(t, x)
        assert np.all(d == 0)

    def test_sin_accuracy_and_order(self):
        errs = []
        for delta in (0.01, 0.005):
            t = np.arange(0, 3, delta)
            x = np.sin(2 * t)[:, None, None]
            ft, d = finite_difference(t, x)
            errs.append(np.abs(d[:, 0, 0] - 2 * np.cos(2 * ft)).max())
        assert errs[0] <= 1e-7
        assert 8 <= errs[0] / errs[1] <= 32

    def test_trims_two_points_each_side(self):
        t = np.arange(9) * 0.1
        x = np.zeros((9, 1, 1))
        ft, d = finite_difference(t, x)
        assert len(ft) == 5 and len(d) == 5
        np.testing.assert_allclose(ft, t[2:-2])

    def test_too_short(self):
        with pytest.raises(TooShort):
            finite_difference(np.arange(4) * 0.1, np.zeros((4, 1, 1)))

    def test_commutes_with_affine(self):
        t = np.arange(0, 1, 0.01)
        x = np.sin(3 * t)[:, None, None]
        _, d = finite_difference(t, x)
        _, d2 = finite_difference(t, 2.5 * x + 7.0)
        np.testing.assert_allclose(d2, 2.5 * d, rtol=1e-12, atol=1e-12)


class TestSelectNodes:
    def test_star_hub(self):
        entries = {(0, j): 1.0 for j in range(1, 6)}  # all edges into node 0
        adj = Adjacency(6, entries, directed=True)
        assert select_nodes(adj, 1) == [0]

    def test_ring_tie_break(self):
        adj = Adjacency.from_undirected_edges(6, [(i, (i + 1) % 6) for i in range(6)])
        assert select_nodes(adj, 3) == [0, 1, 2]

    def test_maximal_multiset(self):
        for s in range(20):
            r = rng(s)
            n = int(r.integers(5, 30))
            entries = {}
            for _ in range(int(r.integers(5, 80))):
                i, j = int(r.integers(n)), int(r.integers(n))
                if i != j:
                    entries[(i, j)] = 1.0
            adj = Adjacency(n, entries, directed=True)
            count = int(r.integers(1, n + 1))
            got = select_nodes(adj, count)
            degs = adj.in_degrees()
            chosen = sorted(degs[got], reverse=True)
            best = sorted(degs, reverse=True)[:count]
            assert chosen == best

    def test_too_many(self):
        with pytest.raises(TooMany):
            select_nodes(Adjacency(3, {}, directed=False), 4)


class TestClusterDecorrelate:
    def test_single_cluster_uniform_draws(self):
        series = rng(1).standard_normal((40, 2))
        out = cluster_decorrelate(series, 1, 10, rng(2))
        assert len(out) == 10
        rows = {tuple(p) for p in out}
        assert rows <= {tuple(p) for p in series}

    def test_two_blobs_balanced(self):
        r = rng(3)
        a = r.standard_normal((50, 2)) + np.array([10.0, 10.0])
        b = r.standard_normal((50, 2)) - np.array([10.0, 10.0])
        series = np.vstack([a, b])
        out = np.array(cluster_decorrelate(series, 2, 5, rng(4)))
        near_a = (np.linalg.norm(out - [10, 10], axis=1) < 6).sum()
        near_b = (np.linalg.norm(out + [10, 10], axis=1) < 6).sum()
        assert near_a == 5 and near_b == 5

    def test_output_subset_of_input(self):
        series = rng(5).standard_normal((30, 1))
        out = cluster_decorrelate(series, 3, 4, rng(6))
        pool = {float(v) for v in series[:, 0]}
        assert all(float(p[0]) in pool for p in out)

    def test_degenerate(self):
        series = np.zeros((10, 1))
        with pytest.raises(Degenerate):
            cluster_decorrelate(series, 2, 2, rng(7))


class TestScaler:
    def test_large_sample_standard(self):
        pts = rng(8).standard_normal((20000, 2))
        s = fit_scaler(pts)
        assert np.allclose(s.mu, 0, atol=0.05)
        assert np.allclose(s.sigma, 1, atol=0.05)

    def test_apply_invert_identity(self):
        pts = rng(9).standard_normal((50, 3)) * 4 + 2
        s = fit_scaler(pts)
        np.testing.assert_allclose(invert_scaler(apply_scaler(pts, s), s), pts, atol=1e-12)

    def test_degenerate_variance_clamped(self):
        pts = np.column_stack([np.ones(10), np.arange(10.0)])
        s = fit_scaler(pts)
        assert s.sigma[0] == 1.0 and s.clamped == (True, False)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            Scaler(np.zeros(1), np.zeros(1))


class TestUnscaleEquation:
    def test_substitution_identity(self):
        from netsr.corpus import GenConfig, sample_skeleton

        cfg = GenConfig(b_max=3, u_max=2)
        checked = 0
        for i in range(300):
            if checked >= 100:
                break
            r = np.random.default_rng(i)
            f_self = sample_skeleton(cfg, r, "self", dim=2)
            f_inter = sample_skeleton(cfg, r, "inter", dim=2)
            try:
                pair = EquationPair(
                    f_self,
                    f_inter,
                    tuple(r.uniform(-3, 3, f_self.n_placeholders)),
                    tuple(r.uniform(-3, 3, f_inter.n_placeholders)),
                    2,
                )
            except ValueError:
                continue
            s = Scaler(r.uniform(-2, 2, 2), r.uniform(0.5, 2.0, 2))
            raw_pair = unscale_equation(pair, s)
            x_raw = r.standard_normal(2) * s.sigma + s.mu
            xj_raw = r.standard_normal(2) * s.sigma + s.mu
            bind_raw = {f"x_{{i,{k}}}": x_raw[k] for k in range(2)}
            bind_raw.update({f"x_{{j,{k}}}": xj_raw[k] for k in range(2)})
            x_s, xj_s = (x_raw - s.mu) / s.sigma, (xj_raw - s.mu) / s.sigma
            bind_s = {f"x_{{i,{k}}}": x_s[k] for k in range(2)}
            bind_s.update({f"x_{{j,{k}}}": xj_s[k] for k in range(2)})
            try:
                want = expr.evaluate(pair.f_inter, bind_s, pair.inter_constants)
                got = expr.evaluate(raw_pair.f_inter, bind_raw, raw_pair.inter_constants)
            except (expr.DomainError, expr.Overflow):
                continue
            assert got == pytest.approx(want, rel=1e-9, abs=1e-9)
            checked += 1
        assert checked >= 100


def heat_trajectory(n=16, seed=0):
    r = np.random.default_rng(seed)
    adj = generate_topology(TopologySpec("grid", n), r)
    pre = preset("heat")
    traj = integrate(pre.system(adj), pre.sample_x0(adj.n, r), pre.t_delta, pre.t_train)
    return traj, adj


class TestBuildObservationSet:
    def test_shapes_and_defaults(self):
        traj, adj = heat_trajectory(25)
        obs, scaler = build_observation_set(
            traj.times, traj.states, adj, n_nodes=20, n_clusters=5,
            per_cluster=10, t_points=10, rng=rng(1),
        )
        assert len(obs) == 200  # t_points x n_nodes
        assert obs.scaler is scaler
        assert obs.dim == 1

    def test_neighbor_alignment(self):
        traj, adj = heat_trajectory(16, seed=3)
        obs, scaler = build_observation_set(
            traj.times, traj.states, adj, n_nodes=8, n_clusters=4,
            per_cluster=8, t_points=5, rng=rng(2),
        )
        x = traj.states[2:-2]
        for t in obs.triplets[:40]:
            xi_raw = invert_scaler(t.x_i, scaler)
            diffs = np.abs(x[:, t.center, 0] - xi_raw[0])
            ti = int(np.argmin(diffs))
            assert diffs[ti] < 1e-9
            nbrs = adj.in_neighbors(t.center)
            assert len(nbrs) == len(t.neighbors)
            for (j, w), nb_state, wt in zip(nbrs, t.neighbors, t.weights):
                assert w == wt
                assert invert_scaler(nb_state, scaler)[0] == pytest.approx(
                    x[ti, j, 0], abs=1e-9
                )

    def test_end_to_end_consistency_with_truth(self):
        # predictions of the true equation on unscaled triplets match the
        # finite-difference targets up to stencil error
        traj, adj = heat_trajectory(25, seed=5)
        obs, _ = build_observation_set(
            traj.times, traj.states, adj, n_nodes=10, n_clusters=5,
            per_cluster=10, t_points=8, rng=rng(3),
        )
        raw = unscale_observations(obs)
        pred = expr.predict_pair(preset("heat").pair, raw.triplets)
        y = np.array([t.y_i[0] for t in raw.triplets])
        assert np.median(np.abs(pred - y)) < 1e-6

    def test_fd_accuracy_bound(self):
        traj, adj = heat_trajectory(25, seed=7)
        obs, _ = build_observation_set(
            traj.times, traj.states, adj, n_nodes=10, n_clusters=5,
            per_cluster=10, t_points=8, rng=rng(4),
        )
        raw = unscale_observations(obs)
        pred = expr.predict_pair(preset("heat").pair, raw.triplets)
        y = np.array([t.y_i[0] for t in raw.triplets])
        # five-point stencil truncation ~ |x^(5)| dt^4 / 30
        bound = 10 * (0.01**4)
        assert np.median(np.abs(pred - y)) <= bound


class TestObservationIO:
    def test_round_trip(self, tmp_path):
        traj, adj = heat_trajectory(16, seed=11)
        obs, _ = build_observation_set(
            traj.times, traj.states, adj, n_nodes=5, n_clusters=4,
            per_cluster=6, t_points=4, rng=rng(5),
        )
        path = tmp_path / "obs.tsv"
        save_observations(obs, path)
        back = load_observations(path)
        assert len(back) == len(obs) and back.dim == obs.dim
        for a, b in zip(obs.triplets, back.triplets):
            assert a.center == b.center
            np.testing.assert_array_equal(a.x_i, b.x_i)
            np.testing.assert_array_equal(a.neighbors, b.neighbors)
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.y_i, b.y_i)
        np.testing.assert_array_equal(back.scaler.mu, obs.scaler.mu)
        np.testing.assert_array_equal(back.scaler.sigma, obs.scaler.sigma)

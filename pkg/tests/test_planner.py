import heapq
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bfftraj.errors import ParameterError, SamplingError
from bfftraj.gridworld import OccupancyGrid, free_at, segments_free
from bfftraj.planner import (
    PLANNERS, Ellipse, PlannerConfig, PlanTree, SamplingRegion, check_tree, choose_parent, ellipse_sample,
    irrt_star_plan, near, near_c, path_cost, rewire, rrt_plan, rrt_star_plan, sample, steer, total_cost,
    tree_to_svg,
)
from conftest import open_grid

coords = st.floats(-100, 100, allow_nan=False)


def wall_grid():
    """40 x 40 with a vertical wall at x in [19, 21) and a gap at y in [30, 34)."""
    g = open_grid(40).blocked.copy()
    g[1:30, 19:21] = True
    g[34:39, 19:21] = True
    return OccupancyGrid(g)


class TestSampling:
    def test_degenerate_ellipse_is_segment(self):
        ell = Ellipse((0.0, 0.0), (10.0, 0.0), 10.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = ellipse_sample(ell, rng)
            assert abs(p[1]) < 1e-12 and -1e-12 <= p[0] <= 10 + 1e-12

    def test_ellipse_containment(self):
        ell = Ellipse((3.0, 4.0), (20.0, -7.0), 30.0)
        rng = np.random.default_rng(1)
        pts = np.array([ellipse_sample(ell, rng) for _ in range(10_000)])
        s = np.hypot(*(pts - ell.focus_a).T) + np.hypot(*(pts - ell.focus_b).T)
        assert (s <= ell.c_best + 1e-9).all()
        # uniform fill: about a quarter of samples lie within half the semi-axes
        centre = (np.array(ell.focus_a) + ell.focus_b) / 2
        a, b = 15.0, math.sqrt(30**2 - ell.c_f**2) / 2
        u = (np.array(ell.focus_b) - ell.focus_a) / ell.c_f
        x = (pts - centre) @ u
        y = (pts - centre) @ np.array([-u[1], u[0]])
        frac = np.mean((x / a) ** 2 + (y / b) ** 2 <= 0.25)
        assert abs(frac - 0.25) < 0.02

    def test_corridor_without_exploration(self):
        grid = open_grid(60)
        wps = ((15.0, 15.0), (40.0, 30.0))
        region = SamplingRegion("et_corridor", wps, corridor_radius=5.0, exploration_eps=0.0)
        rng = np.random.default_rng(2)
        for _ in range(2000):
            p = sample(region, grid, rng)
            assert min(math.dist(p, w) for w in wps) <= 5.0

    def test_corridor_union_is_uniform(self):
        # two overlapping disks: density in the lens must not double
        grid = open_grid(60)
        wps = ((28.0, 30.0), (32.0, 30.0))
        region = SamplingRegion("et_corridor", wps, corridor_radius=5.0, exploration_eps=0.0)
        rng = np.random.default_rng(3)
        pts = np.array([sample(region, grid, rng) for _ in range(20_000)])
        lens = (np.hypot(*(pts - wps[0]).T) <= 5) & (np.hypot(*(pts - wps[1]).T) <= 5)
        r, d = 5.0, 4.0
        lens_area = 2 * r * r * math.acos(d / (2 * r)) - d / 2 * math.sqrt(4 * r * r - d * d)
        union = 2 * math.pi * r * r - lens_area
        assert abs(lens.mean() - lens_area / union) < 0.015

    def test_uniform_bounds(self):
        region = SamplingRegion(bounds=(5.0, 6.0, 9.0, 12.0))
        rng = np.random.default_rng(4)
        pts = np.array([sample(region, open_grid(40), rng) for _ in range(500)])
        assert (pts >= (5, 6)).all() and (pts <= (9, 12)).all()

    def test_degenerate_region_raises(self):
        grid = open_grid(20)
        region = SamplingRegion(bounds=(0.0, 0.0, 0.9, 0.9))
        with pytest.raises(SamplingError):
            sample(region, grid, np.random.default_rng(0))

    def test_region_validation(self):
        with pytest.raises(ParameterError):
            SamplingRegion("et_corridor")
        with pytest.raises(ParameterError):
            SamplingRegion(ellipse=Ellipse((0, 0), (10, 0), 5.0))
        with pytest.raises(ParameterError):
            SamplingRegion(mode="gaussian")

    def test_infinite_ellipse_falls_back(self):
        region = SamplingRegion(bounds=(2, 2, 8, 8)).with_ellipse(Ellipse((3, 3), (6, 6), math.inf))
        p = sample(region, open_grid(20), np.random.default_rng(0))
        assert 2 <= p[0] <= 8 and 2 <= p[1] <= 8


class TestPrimitives:
    def test_near_ties_break_low(self):
        t = PlanTree((0.0, 0.0))
        t.add_node((2.0, 0.0), 0)
        t.add_node((0.0, 2.0), 0)
        assert near(t, (1.0, 1.0)) == 0 or near(t, (1.0, 1.0)) == 1
        assert near(t, (1.0, 1.0)) == min(
            range(3), key=lambda i: (math.dist(t.positions[i], (1, 1)), i))

    def test_near_oracle(self):
        rng = np.random.default_rng(0)
        t = PlanTree(rng.uniform(0, 50, 2))
        for _ in range(60):
            t.add_node(rng.uniform(0, 50, 2), int(rng.integers(t.n)))
        for q in rng.uniform(0, 50, (200, 2)):
            want = min(range(t.n), key=lambda i: (math.dist(t.positions[i], q), i))
            assert near(t, q) == want

    def test_near_c_oracle(self):
        rng = np.random.default_rng(1)
        t = PlanTree((25.0, 25.0))
        for _ in range(80):
            t.add_node(rng.uniform(0, 50, 2), 0)
        q = (20.0, 30.0)
        assert near_c(t, q, 8.0) == [i for i in range(t.n) if math.dist(t.positions[i], q) <= 8.0]
        with pytest.raises(ParameterError):
            near_c(t, q, 0.0)

    def test_steer_random_pairs(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-50, 50, (10_000, 2))
        b = rng.uniform(-50, 50, (10_000, 2))
        for r, n in zip(a, b):
            got = steer(r, n, 5.0)
            d = math.dist(r, n)
            if d <= 5.0:
                assert np.array_equal(got, r)
            else:
                assert math.dist(got, n) == pytest.approx(5.0, abs=1e-12)
                # collinear with the sample direction
                cross = (got[0] - n[0]) * (r[1] - n[1]) - (got[1] - n[1]) * (r[0] - n[0])
                assert abs(cross) < 1e-9

    def test_steer_equal_points(self):
        with pytest.raises(ParameterError):
            steer((1.0, 1.0), (1.0, 1.0), 2.0)

    @given(coords, coords, coords, coords, st.floats(0.1, 50))
    def test_steer_never_overshoots(self, x0, y0, x1, y1, step):
        if (x0, y0) == (x1, y1):
            return
        got = steer((x1, y1), (x0, y0), step)
        assert math.dist(got, (x0, y0)) <= step + 1e-9
        assert math.dist(got, (x1, y1)) <= math.dist((x0, y0), (x1, y1)) + 1e-9

    def test_choose_parent_skips_blocked_edge(self):
        g = open_grid(30).blocked.copy()
        g[5:15, 10] = True
        grid = OccupancyGrid(g)
        t = PlanTree((5.5, 10.0))
        t.add_node((8.0, 14.0), 0)         # cheap but blocked
        far = t.add_node((14.0, 22.0), 0)  # detour around the wall end
        y_new = (12.5, 11.0)
        assert not segments_free(grid, [t.positions[1]], [y_new])[0]
        assert choose_parent(t, [1, far], 1, y_new, grid) == far

    def test_choose_parent_all_blocked(self):
        g = open_grid(30).blocked.copy()
        g[1:29, 10] = True
        t = PlanTree((5.5, 10.0))
        with pytest.raises(ParameterError):
            choose_parent(t, [0], 0, (15.5, 10.0), OccupancyGrid(g))

    def test_rewire_dogleg(self):
        grid = open_grid(40)
        t = PlanTree((5.0, 5.0))
        a = t.add_node((5.0, 25.0), 0)
        b = t.add_node((20.0, 25.0), a)
        c = t.add_node((25.0, 25.0), b)
        n = t.add_node((15.0, 15.0), 0)
        changed = rewire(t, [0, a, b, c, n], n, grid)
        # c first gets cheaper through b's new branch, then cheaper still directly
        assert changed == [b, c]
        assert t.parents[b] == n and t.parents[c] == n
        assert t.costs[c] == pytest.approx(2 * math.dist((5, 5), (15, 15)))
        assert t.children[a] == []
        assert check_tree(t, grid) == []

    def test_costs(self):
        assert total_cost(3.0, (0, 0), (3, 4)) == 8.0
        assert path_cost([(0, 0), (3, 4), (3, 10)]) == 11.0
        assert path_cost([(1, 1)]) == 0.0

    def test_check_tree_detects_corruption(self):
        grid = open_grid(20)
        t = PlanTree((2.0, 2.0))
        t.add_node((5.0, 2.0), 0)
        t._cost[1] = 2.0
        assert any("stored cost" in p for p in check_tree(t, grid))


def _cfg(**kw):
    base = dict(step_size=3.0, goal_tolerance=3.0, max_iterations=600, rng_seed=0)
    base.update(kw)
    return PlannerConfig(**base)


class TestPlanners:
    def test_target_within_one_step(self):
        grid = open_grid(30)
        res = rrt_plan(grid, SamplingRegion(), (10.0, 10.0), (12.0, 10.0), _cfg())
        assert res.solved and res.iterations_used == 0
        np.testing.assert_array_equal(res.path, [[10, 10], [12, 10]])
        assert res.total_cost == 2.0

    def test_start_equals_target(self):
        res = rrt_star_plan(open_grid(20), SamplingRegion(), (5.0, 5.0), (5.0, 5.0), _cfg())
        assert res.total_cost == 0.0 and len(res.path) == 1

    def test_blocked_endpoint(self):
        with pytest.raises(ParameterError):
            rrt_plan(open_grid(20), SamplingRegion(), (0.5, 0.5), (5.0, 5.0), _cfg())

    def test_zero_budget_unsolved(self):
        res = rrt_plan(wall_grid(), SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(max_iterations=0))
        assert not res.solved and res.total_cost == math.inf
        assert json.loads(res.to_json())["total_cost_m"] is None

    @pytest.mark.parametrize("alg", sorted(PLANNERS))
    def test_paths_valid_and_trees_consistent(self, alg):
        grid = wall_grid()
        res = PLANNERS[alg](grid, SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(max_iterations=1500))
        assert res.solved
        assert check_tree(res.tree, grid) == []
        p = res.path
        assert np.array_equal(p[0], [5, 5]) and np.array_equal(p[-1], [35, 5])
        assert segments_free(grid, p[:-1], p[1:]).all()
        assert path_cost(p) == pytest.approx(res.total_cost, abs=1e-9)
        # must pass through the gap
        assert (p[:, 1] > 29).any()

    def test_rrt_star_infinite_radius_three_nodes(self):
        # every node connects straight to the root on open ground
        grid = open_grid(40)
        cfg = _cfg(neighbor_radius=1e9, step_size=100.0, max_iterations=3, goal_tolerance=0.5)
        res = rrt_star_plan(grid, SamplingRegion(), (20.0, 20.0), (38.0, 38.0), cfg)
        t = res.tree
        assert t.n == 4
        assert (t.parents[1:] == 0).all()
        np.testing.assert_allclose(t.costs[1:], np.hypot(*(t.positions[1:] - (20, 20)).T))

    def test_rrt_stops_at_first_solution(self):
        res = rrt_plan(open_grid(40), SamplingRegion(), (5.0, 5.0), (35.0, 35.0), _cfg(max_iterations=5000))
        assert res.solved and res.iterations_used < 5000
        assert res.tree.goal_nodes == [res.tree.n - 1]

    def test_informed_trace(self):
        grid = wall_grid()
        start, target = np.array([5.0, 5.0]), np.array([35.0, 5.0])
        res = irrt_star_plan(grid, SamplingRegion(), start, target, _cfg(max_iterations=1500, record_trace=True))
        cb = res.trace["c_best"]
        assert all(b <= a for a, b in zip(cb, cb[1:]))
        informed = [(x, y, c) for _, x, y, c in res.trace["samples"] if math.isfinite(c)]
        assert len(informed) > 100
        for x, y, c in informed:
            assert math.dist((x, y), start) + math.dist((x, y), target) <= c + 1e-9
        assert res.total_cost == cb[-1]

    def test_rrt_star_cost_non_increasing(self):
        grid = wall_grid()
        costs = []
        for iters in (300, 600, 1200):
            res = rrt_star_plan(grid, SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(max_iterations=iters))
            costs.append(res.total_cost)
        assert costs[0] >= costs[1] >= costs[2]

    def test_deterministic(self):
        grid = wall_grid()
        a = irrt_star_plan(grid, SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(rng_seed=9))
        b = irrt_star_plan(grid, SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(rng_seed=9))
        assert a.to_json(include_wall_time=False) == b.to_json(include_wall_time=False)
        np.testing.assert_array_equal(a.tree.positions, b.tree.positions)

    def test_json_and_svg(self):
        grid = wall_grid()
        res = rrt_plan(grid, SamplingRegion(), (5.0, 5.0), (35.0, 5.0), _cfg(max_iterations=2000))
        doc = json.loads(res.to_json())
        assert doc["algorithm"] == "rrt" and doc["path"][0] == [5.0, 5.0]
        assert doc["total_cost_m"] == pytest.approx(path_cost(doc["path"]))
        svg = tree_to_svg(grid, res)
        assert svg.startswith("<svg") and "polyline" in svg


def lattice_shortest(grid, start, target):
    """Dijkstra over free cell centres, 8-connected, diagonal moves cost sqrt(2)."""
    h, w = grid.blocked.shape
    s = (int(start[1]), int(start[0]))
    goal = (int(target[1]), int(target[0]))
    dist = {s: math.dist(start, (s[1] + 0.5, s[0] + 0.5))}
    heap = [(dist[s], s)]
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if (r, c) == goal:
            return d + math.dist(target, (c + 0.5, r + 0.5))
        if d > dist[(r, c)]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if (dr or dc) and 0 <= rr < h and 0 <= cc < w and not grid.blocked[rr, cc]:
                    if dr and dc and (grid.blocked[r, cc] or grid.blocked[rr, c]):
                        continue
                    nd = d + math.hypot(dr, dc)
                    if nd < dist.get((rr, cc), math.inf):
                        dist[(rr, cc)] = nd
                        heapq.heappush(heap, (nd, (rr, cc)))
    return math.inf


def test_rrt_star_close_to_lattice_optimum():
    grid = wall_grid()
    start, target = (5.5, 5.5), (35.5, 5.5)
    ref = lattice_shortest(grid, start, target)
    costs = [
        rrt_star_plan(grid, SamplingRegion(), start, target, _cfg(max_iterations=2500, rng_seed=s)).total_cost
        for s in range(3)
    ]
    assert np.median(costs) <= 1.05 * ref

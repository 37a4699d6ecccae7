"""RRT, RRT* and informed RRT* over an occupancy grid.

Trees are stored as growable numpy arrays (position, parent, cost) plus
per-node child lists so rewiring can push cost changes down a subtree.
A node counts as reaching the goal when it lies within ``goal_tolerance``
of the target and has line of sight to it; the reported path then ends at
the target itself, so the path length equals the total cost
``cost_to_root + |node - target|``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ParameterError, SamplingError
from .gridworld import OccupancyGrid, free_at, grid_to_svg, segments_free

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class TreeNode:
    position: tuple[float, float]
    parent: int | None
    cost_to_root: float


class PlanTree:
    """Append-only tree rooted at the start position."""

    def __init__(self, root: Sequence[float], capacity: int = 1024):
        self._pos = np.zeros((capacity, 2))
        self._parent = np.full(capacity, -1, dtype=np.int64)
        self._cost = np.zeros(capacity)
        self.children: list[list[int]] = []
        self.n = 0
        self.goal_nodes: list[int] = []
        self.c_best = math.inf
        self.best_goal_node: int | None = None
        self._add(np.asarray(root, dtype=float), -1, 0.0)

    def __len__(self):
        return self.n

    @property
    def positions(self) -> np.ndarray:
        return self._pos[: self.n]

    @property
    def parents(self) -> np.ndarray:
        return self._parent[: self.n]

    @property
    def costs(self) -> np.ndarray:
        return self._cost[: self.n]

    def node(self, i: int) -> TreeNode:
        p = int(self._parent[i])
        return TreeNode(tuple(map(float, self._pos[i])), None if p < 0 else p, float(self._cost[i]))

    def _add(self, pos: np.ndarray, parent: int, cost: float) -> int:
        if self.n == len(self._pos):
            grow = len(self._pos)
            self._pos = np.concatenate([self._pos, np.zeros((grow, 2))])
            self._parent = np.concatenate([self._parent, np.full(grow, -1, dtype=np.int64)])
            self._cost = np.concatenate([self._cost, np.zeros(grow)])
        i = self.n
        self._pos[i] = pos
        self._parent[i] = parent
        self._cost[i] = cost
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def add_node(self, pos: Sequence[float], parent: int) -> int:
        pos = np.asarray(pos, dtype=float)
        return self._add(pos, parent, self._cost[parent] + float(np.linalg.norm(pos - self._pos[parent])))

    def set_parent(self, i: int, parent: int) -> None:
        """Re-parent node ``i`` and recompute costs over its subtree."""
        old = int(self._parent[i])
        self.children[old].remove(i)
        self.children[parent].append(i)
        self._parent[i] = parent
        stack = [i]
        while stack:
            k = stack.pop()
            p = self._parent[k]
            self._cost[k] = self._cost[p] + float(np.linalg.norm(self._pos[k] - self._pos[p]))
            stack.extend(self.children[k])

    def path_to(self, i: int) -> np.ndarray:
        out = []
        while i >= 0:
            out.append(self._pos[i])
            i = int(self._parent[i])
        return np.array(out[::-1])

    def update_best(self, target: np.ndarray) -> float:
        """Refresh ``c_best`` from the goal nodes; never increases."""
        for g in self.goal_nodes:
            c = total_cost(self._cost[g], self._pos[g], target)
            if c < self.c_best:
                self.c_best, self.best_goal_node = c, g
        return self.c_best


@dataclass(frozen=True)
class Ellipse:
    focus_a: tuple[float, float]
    focus_b: tuple[float, float]
    c_best: float

    @property
    def c_f(self) -> float:
        return math.dist(self.focus_a, self.focus_b)


@dataclass(frozen=True)
class SamplingRegion:
    """Where random positions are drawn from.

    ``bounds`` ``(x0, y0, x1, y1)`` limits the uniform-free mode (and the
    exploration fallback); ``None`` means the whole grid.
    """

    mode: str = "uniform_free"
    et_waypoints: tuple[tuple[float, float], ...] = ()
    corridor_radius: float = 10.0
    ellipse: Ellipse | None = None
    exploration_eps: float = 0.1
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.mode not in ("uniform_free", "et_corridor", "informed_ellipse"):
            raise ParameterError(f"unknown sampling mode {self.mode!r}")
        if not self.corridor_radius > 0:
            raise ParameterError("corridor_radius must be positive")
        if not 0 <= self.exploration_eps <= 1:
            raise ParameterError("exploration_eps must lie in [0, 1]")
        if self.mode == "et_corridor" and not self.et_waypoints:
            raise ParameterError("et_corridor mode needs at least one waypoint")
        if self.ellipse is not None and self.ellipse.c_best < self.ellipse.c_f:
            raise ParameterError("ellipse c_best is shorter than the focal distance")
        object.__setattr__(self, "et_waypoints", tuple(tuple(map(float, w)) for w in self.et_waypoints))

    def with_ellipse(self, ellipse: Ellipse | None) -> SamplingRegion:
        mode = self.mode if ellipse is None else "informed_ellipse"
        return replace(self, ellipse=ellipse, mode=mode)


@dataclass(frozen=True)
class PlannerConfig:
    step_size: float = 5.0
    goal_tolerance: float = 5.0
    max_iterations: int = 1000
    neighbor_radius: float | None = None
    rng_seed: int = 0
    record_trace: bool = False

    def __post_init__(self):
        if not self.step_size > 0 or not self.goal_tolerance > 0:
            raise ParameterError("step_size and goal_tolerance must be positive")
        if self.max_iterations < 0:
            raise ParameterError("max_iterations must be >= 0")
        if self.neighbor_radius is not None and not self.neighbor_radius > 0:
            raise ParameterError("neighbor_radius must be positive")

    @property
    def radius(self) -> float:
        return 2.0 * self.step_size if self.neighbor_radius is None else self.neighbor_radius


@dataclass
class PlanResult:
    algorithm: str
    seed: int
    path: np.ndarray
    total_cost: float
    iterations_used: int
    wall_time: float
    tree: PlanTree | None = None
    trace: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return len(self.path) > 0

    def to_json(self, include_wall_time: bool = True) -> str:
        doc = {
            "seed": self.seed,
            "algorithm": self.algorithm,
            "iterations": self.iterations_used,
            "total_cost_m": self.total_cost if math.isfinite(self.total_cost) else None,
            "wall_time_s": self.wall_time if include_wall_time else None,
            "path": [[float(x), float(y)] for x, y in self.path],
        }
        return json.dumps(doc, indent=1)


def _uniform_in_bounds(grid, region, rng):
    x0, y0, x1, y1 = region.bounds if region.bounds is not None else (0.0, 0.0, *grid.extent)
    return rng.uniform((x0, y0), (x1, y1))


def _in_disk(rng, center, radius):
    r = radius * math.sqrt(rng.random())
    t = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([center[0] + r * math.cos(t), center[1] + r * math.sin(t)])


def ellipse_sample(ellipse: Ellipse, rng: np.random.Generator) -> np.ndarray:
    """Uniform point in the ellipse: unit-disk draw under the affine map."""
    fa, fb = np.asarray(ellipse.focus_a), np.asarray(ellipse.focus_b)
    c_f = ellipse.c_f
    a = ellipse.c_best / 2.0
    b = math.sqrt(max(ellipse.c_best**2 - c_f**2, 0.0)) / 2.0
    u = (fb - fa) / c_f if c_f > 0 else np.array([1.0, 0.0])
    r = math.sqrt(rng.random())
    t = rng.uniform(0.0, 2.0 * math.pi)
    x, y = a * r * math.cos(t), b * r * math.sin(t)
    return (fa + fb) / 2.0 + x * u + y * np.array([-u[1], u[0]])


def sample(region: SamplingRegion, grid: OccupancyGrid, rng: np.random.Generator) -> np.ndarray:
    """One free position drawn from ``region``.

    An ellipse with an infinite ``c_best`` falls back to the corridor (if
    waypoints exist) or uniform sampling.
    """
    ell = region.ellipse
    use_ellipse = region.mode == "informed_ellipse" and ell is not None and math.isfinite(ell.c_best)
    wps = region.et_waypoints
    for _ in range(MAX_REJECTIONS):
        if use_ellipse:
            p = ellipse_sample(ell, rng)
        elif wps and region.mode != "uniform_free" and rng.random() >= region.exploration_eps:
            # pick a disk, then thin by coverage count: uniform over the union
            p = _in_disk(rng, wps[rng.integers(len(wps))], region.corridor_radius)
            covering = int((np.hypot(*(np.asarray(wps) - p).T) <= region.corridor_radius).sum())
            if rng.random() * covering >= 1.0:
                continue
        else:
            p = _uniform_in_bounds(grid, region, rng)
        if free_at(grid, p[0], p[1]):
            return p
    raise SamplingError(f"{MAX_REJECTIONS} consecutive rejections; sampling region is degenerate")


def near(tree: PlanTree, y_rand: Sequence[float]) -> int:
    """Index of the nearest node; ``argmin`` already breaks ties low."""
    d = np.hypot(*(tree.positions - np.asarray(y_rand, dtype=float)).T)
    return int(np.argmin(d))


def steer(y_rand: Sequence[float], y_near: Sequence[float], step_size: float) -> np.ndarray:
    y_rand = np.asarray(y_rand, dtype=float)
    y_near = np.asarray(y_near, dtype=float)
    delta = y_rand - y_near
    dist = float(np.hypot(*delta))
    if dist == 0.0:
        raise ParameterError("steer direction is undefined for y_rand == y_near")
    if dist <= step_size:
        return y_rand.copy()
    return y_near + step_size * (delta / dist)


def near_c(tree: PlanTree, y_new: Sequence[float], radius: float) -> list[int]:
    if not radius > 0:
        raise ParameterError("radius must be positive")
    d = np.hypot(*(tree.positions - np.asarray(y_new, dtype=float)).T)
    return np.flatnonzero(d <= radius).tolist()


def choose_parent(
    tree: PlanTree, candidates: Sequence[int], y_near: int, y_new: Sequence[float], grid: OccupancyGrid
) -> int:
    """Cheapest collision-free parent for ``y_new``; lowest index on ties."""
    idx = np.array(sorted(set(candidates) | {y_near}), dtype=np.int64)
    y_new = np.asarray(y_new, dtype=float)
    pos = tree.positions[idx]
    cost = tree.costs[idx] + np.hypot(*(pos - y_new).T)
    order = np.lexsort((idx, cost))
    ok = segments_free(grid, pos[order], np.repeat(y_new[None], len(idx), 0))
    if not ok.any():
        raise ParameterError("no collision-free parent for the new node")
    return int(idx[order[int(np.argmax(ok))]])


def rewire(tree: PlanTree, neighbors: Sequence[int], new_index: int, grid: OccupancyGrid) -> list[int]:
    """Re-parent neighbors that get strictly cheaper through ``new_index``."""
    p_new = tree.positions[new_index]
    c_new = tree.costs[new_index]
    cand = [k for k in neighbors if k != new_index and k != tree.parents[new_index]]
    if not cand:
        return []
    cand = np.array(cand, dtype=np.int64)
    via = c_new + np.hypot(*(tree.positions[cand] - p_new).T)
    better = cand[via < tree.costs[cand]]
    if len(better) == 0:
        return []
    ok = segments_free(grid, np.repeat(p_new[None], len(better), 0), tree.positions[better])
    changed = []
    for k in better[ok]:
        # an earlier re-parenting may already have lowered this neighbor
        if c_new + float(np.linalg.norm(tree.positions[k] - p_new)) < tree.costs[k]:
            tree.set_parent(int(k), new_index)
            changed.append(int(k))
    return changed


def total_cost(cost_to_root: float, y_new: Sequence[float], target: Sequence[float]) -> float:
    return float(cost_to_root) + math.dist(tuple(y_new), tuple(target))


def path_cost(path) -> float:
    path = np.asarray(path, dtype=float)
    if len(path) < 2:
        return 0.0
    return float(np.hypot(*np.diff(path, axis=0).T).sum())


def check_tree(tree: PlanTree, grid: OccupancyGrid, tol: float = 1e-9) -> list[str]:
    """Independent walk over the tree; returns a list of violated invariants."""
    problems = []
    par = tree.parents
    pos = tree.positions
    if par[0] != -1 or tree.costs[0] != 0.0:
        problems.append("root has a parent or nonzero cost")
    for i in range(1, tree.n):
        seen, k, length = set(), i, 0.0
        while k != 0:
            if k in seen or k < 0:
                problems.append(f"node {i} does not reach the root")
                break
            seen.add(k)
            length += float(np.linalg.norm(pos[k] - pos[par[k]]))
            k = int(par[k])
        else:
            if abs(length - tree.costs[i]) > tol:
                problems.append(f"node {i}: stored cost {tree.costs[i]!r} != path length {length!r}")
    if tree.n > 1:
        ok = segments_free(grid, pos[par[1:]], pos[1:])
        problems += [f"edge into node {i + 1} crosses a blocked cell" for i in np.flatnonzero(~ok)]
    return problems


def _reaches_goal(grid, p, target, eps):
    return math.dist(tuple(p), tuple(target)) <= eps and bool(segments_free(grid, [p], [target])[0])


def _validate_endpoints(grid, start, target):
    for name, p in (("start", start), ("target", target)):
        if not free_at(grid, p[0], p[1]):
            raise ParameterError(f"{name} {tuple(p)} is not free")


def _plan(grid, region, start, target, config, algorithm):
    t0 = time.perf_counter()
    start = np.asarray(start, dtype=float)
    target = np.asarray(target, dtype=float)
    _validate_endpoints(grid, start, target)
    rng = np.random.default_rng(config.rng_seed)
    tree = PlanTree(start, capacity=max(16, config.max_iterations + 1))
    trace = {"samples": [], "c_best": []} if config.record_trace else {}
    star = algorithm != "rrt"
    informed = algorithm == "irrt_star"

    if np.array_equal(start, target):
        return PlanResult(algorithm, config.rng_seed, start[None].copy(), 0.0, 0, time.perf_counter() - t0, tree, trace)
    if _reaches_goal(grid, start, target, config.goal_tolerance):
        tree.goal_nodes.append(0)
        tree.update_best(target)

    it = 0
    cur_region = region
    while it < config.max_iterations and not (algorithm == "rrt" and tree.goal_nodes):
        it += 1
        if informed and math.isfinite(tree.c_best):
            cur_region = region.with_ellipse(Ellipse(tuple(start), tuple(target), max(tree.c_best, math.dist(start, target))))
        y_rand = sample(cur_region, grid, rng)
        if trace:
            trace["samples"].append((it, float(y_rand[0]), float(y_rand[1]), tree.c_best))
        i_near = near(tree, y_rand)
        if np.array_equal(y_rand, tree.positions[i_near]):
            continue
        y_new = steer(y_rand, tree.positions[i_near], config.step_size)
        if not segments_free(grid, [tree.positions[i_near]], [y_new])[0]:
            continue
        if star:
            nbrs = near_c(tree, y_new, config.radius)
            parent = choose_parent(tree, nbrs, i_near, y_new, grid)
            i_new = tree.add_node(y_new, parent)
            rewire(tree, nbrs, i_new, grid)
        else:
            i_new = tree.add_node(y_new, i_near)
        if _reaches_goal(grid, y_new, target, config.goal_tolerance):
            tree.goal_nodes.append(i_new)
        tree.update_best(target)
        if trace:
            trace["c_best"].append(tree.c_best)

    if tree.best_goal_node is None:
        path, cost = np.zeros((0, 2)), math.inf
    else:
        path = tree.path_to(tree.best_goal_node)
        if not np.array_equal(path[-1], target):
            path = np.vstack([path, target])
        cost = tree.c_best
    return PlanResult(algorithm, config.rng_seed, path, cost, it, time.perf_counter() - t0, tree, trace)


def rrt_plan(grid, region, start, target, config: PlannerConfig = PlannerConfig()) -> PlanResult:
    """Grow a tree until a node reaches the goal region; return that path."""
    return _plan(grid, region, start, target, config, "rrt")


def rrt_star_plan(grid, region, start, target, config: PlannerConfig = PlannerConfig()) -> PlanResult:
    """RRT with cheapest-parent selection and rewiring; runs the full budget."""
    return _plan(grid, region, start, target, config, "rrt_star")


def irrt_star_plan(grid, region, start, target, config: PlannerConfig = PlannerConfig()) -> PlanResult:
    """RRT* that samples the ``c_best`` ellipse once a solution exists."""
    return _plan(grid, region, start, target, config, "irrt_star")


PLANNERS = {"rrt": rrt_plan, "rrt_star": rrt_star_plan, "irrt_star": irrt_star_plan}


def tree_to_svg(grid: OccupancyGrid, result: PlanResult, scale: float = 2.0) -> str:
    """Tree edges in green, the final path in red."""
    parts = []
    tree = result.tree
    if tree is not None and tree.n > 1:
        pos, par = tree.positions, tree.parents
        edges = " ".join(
            f"M{pos[p][0]:.3f},{pos[p][1]:.3f}L{pos[i][0]:.3f},{pos[i][1]:.3f}"
            for i, p in enumerate(par) if p >= 0
        )
        parts.append(f'<path d="{edges}" stroke="#31a354" stroke-width="0.3" fill="none"/>')
    if len(result.path) > 1:
        pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in result.path)
        parts.append(f'<polyline points="{pts}" stroke="#de2d26" stroke-width="1" fill="none"/>')
    return grid_to_svg(grid, "\n".join(parts), scale)

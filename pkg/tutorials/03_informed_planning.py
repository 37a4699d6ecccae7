"""Plan a route through the 401 x 401 m city with RRT, RRT* and informed RRT*.

Also shows the informed ellipse shrinking and a plan restricted to a corridor
around an estimated trajectory. SVGs go to ``tutorial_out/``.
"""

import math
from pathlib import Path

import numpy as np

from bfftraj import bench
from bfftraj.gridworld import generate_city_grid
from bfftraj.planner import PLANNERS, PlannerConfig, SamplingRegion, check_tree, irrt_star_plan, tree_to_svg

out = Path("tutorial_out")
out.mkdir(exist_ok=True)

grid = generate_city_grid(7)
start, target = bench.CITY_START, bench.CITY_TARGET
region = bench.bench_region(grid, start, target)
print(f"start {start} -> target {target}, straight line {math.dist(start, target):.1f} m")
print("sampling box", region.bounds)

# Same seed for all three: they draw the same first samples, so differences
# come from how each algorithm connects them.
cfg = PlannerConfig(step_size=5.0, goal_tolerance=5.0, max_iterations=1000, rng_seed=4)
for name, plan in PLANNERS.items():
    res = plan(grid, region, start, target, cfg)
    assert not check_tree(res.tree, grid)
    print(f"{name:10s} cost {res.total_cost:7.2f} m  tree {res.tree.n:4d} nodes  "
          f"{res.iterations_used:4d} iterations  {res.wall_time:.2f} s")
    (out / f"plan_{name}.svg").write_text(tree_to_svg(grid, res))

# The ellipse that informed RRT* samples from tightens as c_best drops. The
# trace holds one c_best entry per successful tree extension.
res = irrt_star_plan(grid, region, start, target, PlannerConfig(5.0, 5.0, 1000, rng_seed=4, record_trace=True))
cb = np.array(res.trace["c_best"])
first = int(np.argmax(np.isfinite(cb)))
c_f = math.dist(start, target)
for it in (first, first + 100, first + 300, len(cb) - 1):
    c = cb[it]
    minor = math.sqrt(c * c - c_f * c_f)
    print(f"extension {it + 1:4d}: c_best {c:7.2f} m, ellipse axes {c:6.1f} x {minor:6.1f} m")

# With an estimated trajectory, samples concentrate in a corridor around it.
waypoints = [start, (215.0, 150.0), (200.0, 100.0), (180.0, 60.0), target]
corridor = SamplingRegion("et_corridor", tuple(waypoints), corridor_radius=15.0, exploration_eps=0.1,
                          bounds=region.bounds)
for label, reg in (("box", region), ("corridor", corridor)):
    costs = [PLANNERS["rrt_star"](grid, reg, start, target, PlannerConfig(5.0, 5.0, 400, rng_seed=s)).total_cost
             for s in range(5)]
    print(f"RRT* with 400 iterations, {label:8s}: median cost {np.median(costs):.1f} m")

"""Estimation metrics, sequence-length / noise sweeps and planner benchmarks."""

from __future__ import annotations

import csv
import io
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import ParameterError
from .fingerprint import BeamCodebook, ChannelScene, calibrate_threshold
from .gridworld import BlockSpec, OccupancyGrid, generate_city_grid
from .planner import PLANNERS, PlannerConfig, SamplingRegion
from .seq2seq import TrainConfig, TransformerConfig, constant_velocity_baseline, predict, train
from .trajectories import MotionProfile, Trajectory, attach_corpus, generate_corpus, split_corpus

# benchmark query on the 401 x 401 m city
CITY_START = (215.0, 193.0)
CITY_TARGET = (177.0, 46.0)

# 64 x 64 m desk city: three 14 m avenues each way around 10 m blocks
DESK_BLOCKS = BlockSpec(10, 10, 14)
DESK_SIZE = 64


def desk_grid(seed: int = 3) -> OccupancyGrid:
    return generate_city_grid(seed, DESK_SIZE, DESK_SIZE, 1.0, DESK_BLOCKS, jitter=0)


def desk_scene(grid: OccupancyGrid, noise_sigma_db: float = 6.0, target_density: float = 0.03) -> ChannelScene:
    """Transmitter at the grid center; threshold calibrated on the grid."""
    w, h = grid.extent
    scene = ChannelScene(tx_position=(w / 2, h / 2), noise_sigma_db=noise_sigma_db)
    eta = calibrate_threshold(grid, BeamCodebook(), scene, target_density, stride=2)
    return scene.with_(threshold_eta_db=eta)


def transformer_config_for(
    grid: OccupancyGrid,
    profile: MotionProfile,
    T_obs: int,
    horizon: int,
    codebook: BeamCodebook | None = None,
    scene: ChannelScene | None = None,
    input_mode: str = "fingerprint",
    **overrides,
) -> TransformerConfig:
    """Architecture defaults with coordinates normalized to the grid."""
    w, h = grid.extent
    codebook = codebook or BeamCodebook()
    scene = scene or ChannelScene()
    kw = dict(
        T_obs=T_obs,
        horizon=horizon,
        input_mode=input_mode,
        input_dim=codebook.M * scene.n_samples if input_mode == "fingerprint" else 2,
        coord_center=(w / 2, h / 2),
        coord_scale=max(w, h) / 2,
        step_scale=profile.avg_speed / profile.sample_rate,
    )
    kw.update(overrides)
    return TransformerConfig(**kw)


# metrics ---------------------------------------------------------------


def _aligned(predicted, truth, pred_ids=None, truth_ids=None):
    if pred_ids is not None or truth_ids is not None:
        if pred_ids is None or truth_ids is None or list(pred_ids) != list(truth_ids):
            raise ParameterError("predictions and truth are not aligned by trajectory id")
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.ndim != 3 or p.shape[-1] != 2:
        raise ParameterError(f"prediction shape {p.shape} != truth shape {t.shape} (need (N, horizon, 2))")
    return p, t


def per_trajectory_errors(predicted, truth, pred_ids=None, truth_ids=None) -> np.ndarray:
    """Norm of each trajectory's concatenated target-segment residual."""
    p, t = _aligned(predicted, truth, pred_ids, truth_ids)
    return np.sqrt(((p - t) ** 2).sum(axis=(1, 2)))


def rmse(predicted, truth, pred_ids=None, truth_ids=None) -> float:
    """``sqrt(mean_n |y_n - yhat_n|^2)`` over concatenated segments."""
    e = per_trajectory_errors(predicted, truth, pred_ids, truth_ids)
    if len(e) == 0:
        raise ParameterError("rmse of an empty corpus")
    return float(math.sqrt(np.mean(e**2)))


def rmse_per_point(predicted, truth) -> float:
    """RMS Euclidean distance per predicted point (``rmse / sqrt(horizon)``)."""
    p, t = _aligned(predicted, truth)
    return float(math.sqrt(np.mean(((p - t) ** 2).sum(axis=-1))))


def percentile95(errors: Sequence[float]) -> float:
    """Nearest-rank 95th percentile: smallest value with >= 95% of errors at or below it."""
    e = np.sort(np.asarray(errors, dtype=float))
    if len(e) == 0:
        raise ParameterError("percentile of an empty list")
    return float(e[math.ceil(0.95 * len(e)) - 1])


@dataclass(frozen=True)
class TrajectoryMetrics:
    rmse_m: float
    rmse_per_point_m: float
    p95_rmse_m: float
    per_trajectory_errors: tuple[float, ...]
    N: int


def evaluate(predicted, truth) -> TrajectoryMetrics:
    e = per_trajectory_errors(predicted, truth)
    return TrajectoryMetrics(
        rmse(predicted, truth), rmse_per_point(predicted, truth), percentile95(e), tuple(map(float, e)), len(e)
    )


def turn_mask(trajs: Sequence[Trajectory], threshold: float = math.pi / 12) -> np.ndarray:
    """Trajectories whose heading departs from the last observed step by more
    than ``threshold`` radians somewhere in the predicted horizon.

    A stop in the observed tail (zero last step) counts as a turn whenever the
    horizon moves at all.
    """
    out = np.zeros(len(trajs), dtype=bool)
    for k, t in enumerate(trajs):
        pts = t.positions[t.T_obs - 2:]
        d = np.diff(pts, axis=0)
        v, rest = d[0], d[1:]
        nv = np.hypot(*v)
        nr = np.hypot(*rest.T)
        if nv == 0:
            out[k] = bool((nr > 0).any())
            continue
        cos = (rest @ v) / np.maximum(nr * nv, 1e-300)
        ang = np.where(nr > 0, np.arccos(np.clip(cos, -1, 1)), math.pi)
        out[k] = bool((ang > threshold).any())
    return out


# sweeps ----------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    profile: str
    L: int
    sigma_db: float
    model: str
    rmse_m: float
    rmse_per_point_m: float
    p95_m: float
    n: int


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence, cls) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(cls)])
    for r in rows:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def rows_from_csv(text: str, cls) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    names = [f.name for f in fields(cls)]
    if header != names:
        raise ParameterError(f"CSV header {header} != {names}")
    types = {f.name: f.type for f in fields(cls)}
    conv = {"int": int, "float": float, "str": str, "bool": lambda s: s == "True"}
    return [cls(*(conv[types[n]](v) for n, v in zip(names, row))) for row in reader]


def drop_columns(csv_text: str, columns: Sequence[str]) -> str:
    """Copy of a CSV without ``columns`` (for wall-time-free comparisons)."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    keep = [i for i, name in enumerate(rows[0]) if name not in set(columns)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep])
    return buf.getvalue()


def evaluate_models(
    params, config: TransformerConfig, test: Sequence[Trajectory], profile: str, sigma_db: float, L: int
) -> list[SweepRow]:
    """TN and constant-velocity rows for one test set."""
    truth = np.stack([t.target for t in test])
    obs = np.stack([t.observed for t in test])
    out = []
    preds = {"tn": predict(params, config, test), "cv": constant_velocity_baseline(obs, config.horizon)}
    for name, pred in preds.items():
        m = evaluate(pred, truth)
        out.append(SweepRow(profile, L, float(sigma_db), name, m.rmse_m, m.rmse_per_point_m, m.p95_rmse_m, m.N))
    return out


def sweep_sequence_length(
    grid: OccupancyGrid,
    profile: MotionProfile,
    lengths: Sequence[int] = (5, 7, 10, 15),
    sigmas_db: Sequence[float] = (6.0, 9.0),
    n: int = 1000,
    seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    scene: ChannelScene | None = None,
    codebook: BeamCodebook | None = None,
    turn_only: bool = False,
    workers: int = 1,
    log=None,
) -> list[SweepRow]:
    """One model per ``L`` trained at the first sigma, tested at every sigma."""
    codebook = codebook or BeamCodebook()
    scene = scene or desk_scene(grid, sigmas_db[0])
    rows = []
    for L in lengths:
        corpus = generate_corpus(grid, profile, n, L, seed + L)
        split = split_corpus([t.id for t in corpus], seed=seed)
        noisy = {
            s: attach_corpus(grid, corpus, codebook, scene.with_(noise_sigma_db=float(s)), seed, workers)
            for s in sigmas_db
        }
        T_obs = corpus[0].T_obs
        cfg = transformer_config_for(grid, profile, T_obs, L - T_obs, codebook, scene)
        result = train(noisy[sigmas_db[0]], split, cfg, train_cfg, log=log)
        for s in sigmas_db:
            by_id = {t.id: t for t in noisy[s]}
            test = [by_id[i] for i in split.test]
            if turn_only:
                test = [t for t, m in zip(test, turn_mask(test)) if m]
            if test:
                rows += evaluate_models(result.params, cfg, test, profile.kind, s, L)
    return rows


def sweep_to_svg(rows: Sequence[SweepRow], width: int = 480, height: int = 300) -> str:
    """RMSE against L, one polyline per (model, sigma)."""
    series: dict[str, list[tuple[int, float]]] = {}
    for r in rows:
        series.setdefault(f"{r.model} {r.sigma_db:g} dB", []).append((r.L, r.rmse_per_point_m))
    if not series:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"/>'
    xs = [x for s in series.values() for x, _ in s]
    ys = [y for s in series.values() for _, y in s]
    x0, x1 = min(xs), max(xs) if max(xs) > min(xs) else min(xs) + 1
    y1 = max(ys) * 1.1 or 1.0
    pad = 40

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - y / y1 * (height - 2 * pad)

    colors = ["#3182bd", "#de2d26", "#31a354", "#756bb1", "#e6550d", "#636363"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" font-size="12">sequence length L</text>',
             f'<text x="4" y="{pad - 10}" font-size="12">RMSE per point (m)</text>']
    for k, (label, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        c = colors[k % len(colors)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" stroke="{c}" fill="none" stroke-width="2"/>')
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 14 * k}" font-size="11" fill="{c}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# planner benchmark -----------------------------------------------------


@dataclass(frozen=True)
class PlanRunRow:
    algorithm: str
    seed: int
    cost_m: float
    runtime_s: float
    iterations: int
    solved: bool


@dataclass(frozen=True)
class PlannerBenchRow:
    algorithm: str
    median_cost_m: float
    median_runtime_s: float
    seeds: int

    def __post_init__(self):
        if self.seeds < 1:
            raise ParameterError("a benchmark row needs at least one seed")


def bench_region(grid: OccupancyGrid, start, target, margin: float = 20.0) -> SamplingRegion:
    """Uniform sampling over the start/target bounding box grown by ``margin``."""
    w, h = grid.extent
    return SamplingRegion(bounds=(
        max(0.0, min(start[0], target[0]) - margin), max(0.0, min(start[1], target[1]) - margin),
        min(w, max(start[0], target[0]) + margin), min(h, max(start[1], target[1]) + margin),
    ))


def _bench_seed(args):
    grid, region, start, target, cfg, algorithms = args
    out = []
    for name in algorithms:
        r = PLANNERS[name](grid, region, start, target, cfg)
        out.append(PlanRunRow(name, cfg.rng_seed, r.total_cost, r.wall_time, r.iterations_used, r.solved))
    return out


def planner_benchmark(
    grid: OccupancyGrid,
    region: SamplingRegion | None = None,
    start=CITY_START,
    target=CITY_TARGET,
    step: float = 5.0,
    iterations: int = 1000,
    seeds: int | Sequence[int] = 20,
    goal_tolerance: float = 5.0,
    algorithms: Sequence[str] = ("rrt", "rrt_star", "irrt_star"),
    workers: int = 1,
) -> tuple[list[PlanRunRow], list[PlannerBenchRow]]:
    """Paired-seed runs of every planner plus per-algorithm medians."""
    region = region or bench_region(grid, start, target)
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    jobs = [
        (grid, region, tuple(start), tuple(target),
         PlannerConfig(step, goal_tolerance, iterations, rng_seed=s), tuple(algorithms))
        for s in seed_list
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_bench_seed, jobs))
    else:
        parts = [_bench_seed(j) for j in jobs]
    runs = sorted((r for p in parts for r in p), key=lambda r: (list(algorithms).index(r.algorithm), r.seed))
    summary = []
    for name in algorithms:
        mine = [r for r in runs if r.algorithm == name]
        summary.append(PlannerBenchRow(
            name,
            float(statistics.median(r.cost_m for r in mine)),
            float(statistics.median(r.runtime_s for r in mine)),
            len(mine),
        ))
    return runs, summary

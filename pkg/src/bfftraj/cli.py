"""Command-line pipeline: environment, datasets, training, estimation, planning.

Every subcommand reads an optional JSON run configuration (``--config``),
applies flag overrides, and stamps the resulting seed and config digest into
each artifact it writes. Failures exit with a category-specific code.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import _io, bench
from .errors import BFTError, FormatError, ParameterError, SamplingError
from .fingerprint import BeamCodebook, ChannelScene, build_dataset, calibrate_threshold, save_dataset
from .gridworld import BlockSpec, OccupancyGrid, generate_city_grid, grid_to_svg, load_grid, save_grid
from .numcore import load_params, save_params
from .planner import PLANNERS, PlannerConfig, SamplingRegion, tree_to_svg
from .seq2seq import TrainConfig, TransformerConfig, constant_velocity_baseline, init_params, predict, train
from .trajectories import PROFILES, MotionProfile, attach_corpus, generate_corpus, load_corpus, save_corpus, split_corpus

SCHEMA_VERSION = 1

EXIT_CODES = {"config": 2, "io": 3, "numeric": 4, "budget": 5}

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "output_dir": "bft_out",
    "grid": {
        "width_cells": 401, "height_cells": 401, "cell_size": 1.0,
        "block_w": 28, "block_h": 28, "street_w": 10, "jitter": None,
    },
    "codebook": {"M": 32, "beamwidth_sigma": 2 * math.pi / 32},
    "scene": {
        **{f.name: getattr(ChannelScene(), f.name) for f in fields(ChannelScene)},
        "threshold_eta_db": "auto",
        "target_density": 0.03,
    },
    "profile": {"kind": "vehicle"},
    "corpus": {"n": 2000, "L": 10, "T_obs": None, "split": [0.70, 0.15, 0.15]},
    "model": {
        "d_model": 64, "h": 2, "N_e": 2, "N_d": 2, "d_ff": 256, "dropout_p": 0.01,
        "input_mode": "fingerprint", "pe_width": "d_model",
    },
    "train": {f.name: f.default for f in fields(TrainConfig)},
    "planner": {
        "step_size": 5.0, "goal_tolerance": 5.0, "max_iterations": 1000, "neighbor_radius": None,
        "corridor_radius": 10.0, "exploration_eps": 0.1, "margin": 20.0,
    },
    "bench": {"lengths": [5, 7, 10, 15], "sigmas_db": [6.0, 9.0], "n": 1000, "seeds": 20},
}
DEFAULTS["scene"]["tx_position"] = [200.0, 200.0]

_PROFILE_KEYS = {"kind"} | {f.name for f in fields(MotionProfile)}


class RunConfig:
    """Validated, fully resolved run configuration."""

    def __init__(self, data: dict | None = None):
        merged = copy.deepcopy(DEFAULTS)
        data = copy.deepcopy(data or {})
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ParameterError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        for key, value in data.items():
            if key not in merged:
                raise ParameterError(f"unknown config key {key!r}")
            if isinstance(merged[key], dict):
                if not isinstance(value, dict):
                    raise ParameterError(f"config section {key!r} must be an object")
                allowed = _PROFILE_KEYS if key == "profile" else set(merged[key])
                unknown = set(value) - allowed
                if unknown:
                    raise ParameterError(f"unknown key(s) in {key!r}: {sorted(unknown)}")
                merged[key].update(value)
            else:
                merged[key] = value
        self.data = merged
        self._validate()

    @classmethod
    def load(cls, path: str | Path | None) -> RunConfig:
        if path is None:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from None
        except ValueError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ParameterError("config root must be a JSON object")
        return cls(raw)

    def override(self, section: str | None, key: str, value) -> None:
        if value is None:
            return
        target = self.data if section is None else self.data[section]
        target[key] = value
        self._validate()

    def _validate(self) -> None:
        try:
            self.block_spec()
            self.codebook()
            self.scene(eta=-50.0)
            self.profile()
            self.train_config()
            self.planner_config(0)
            c = self.data["corpus"]
            if int(c["n"]) < 1 or int(c["L"]) < 2:
                raise ParameterError("corpus needs n >= 1 and L >= 2")
            eta = self.data["scene"]["threshold_eta_db"]
            if eta != "auto" and not isinstance(eta, (int, float)):
                raise ParameterError("scene.threshold_eta_db must be a number or 'auto'")
            if not isinstance(self.data["seed"], int):
                raise ParameterError("seed must be an integer")
        except TypeError as exc:
            raise ParameterError(f"invalid config value: {exc}") from None

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    def digest(self) -> str:
        """Hash of everything that can change a result; the output location cannot."""
        return _io.digest_of({k: v for k, v in self.data.items() if k != "output_dir"})

    def provenance(self) -> dict:
        return {"seed": self.seed, "config_digest": self.digest()}

    def block_spec(self) -> BlockSpec:
        g = self.data["grid"]
        return BlockSpec(int(g["block_w"]), int(g["block_h"]), int(g["street_w"]))

    def codebook(self) -> BeamCodebook:
        return BeamCodebook(**self.data["codebook"])

    def scene(self, grid: OccupancyGrid | None = None, eta: float | None = None) -> ChannelScene:
        s = {k: v for k, v in self.data["scene"].items() if k != "target_density"}
        s["tx_position"] = tuple(s["tx_position"])
        if eta is None:
            eta = s["threshold_eta_db"]
            if eta == "auto":
                if grid is None:
                    raise ParameterError("threshold calibration needs a grid")
                probe = ChannelScene(**{**s, "threshold_eta_db": 0.0})
                eta = calibrate_threshold(grid, self.codebook(), probe, float(self.data["scene"]["target_density"]))
        s["threshold_eta_db"] = float(eta)
        return ChannelScene(**s)

    def profile(self) -> MotionProfile:
        p = dict(self.data["profile"])
        kind = p.pop("kind", "vehicle")
        if kind not in PROFILES:
            raise ParameterError(f"unknown profile kind {kind!r}")
        base = asdict(PROFILES[kind])
        base.update(p)
        base["kind"] = kind
        return MotionProfile(**base)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.data["train"])

    def transformer_config(self, grid: OccupancyGrid, T_obs: int, horizon: int) -> TransformerConfig:
        return bench.transformer_config_for(
            grid, self.profile(), T_obs, horizon, self.codebook(), self.scene(eta=0.0), **self.data["model"]
        )

    def planner_config(self, seed: int) -> PlannerConfig:
        p = self.data["planner"]
        return PlannerConfig(
            float(p["step_size"]), float(p["goal_tolerance"]), int(p["max_iterations"]),
            p["neighbor_radius"], seed,
        )


def _workers(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("BFT_WORKERS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ParameterError(f"BFT_WORKERS={env!r} is not an integer") from None
    if n < 1:
        raise ParameterError("workers must be >= 1")
    return n


def _point(text: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from None
    return x, y


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _path(cfg: RunConfig, given: str | None, default: str) -> Path:
    return Path(given) if given else cfg.output_dir / default


def _out(cfg: RunConfig, given: str | None, default: str) -> Path:
    p = _path(cfg, given, default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_grid(path: Path) -> OccupancyGrid:
    if not path.exists():
        raise FormatError(f"grid file {path} does not exist (run gen-env first)")
    return load_grid(path)


def stamp_csv(text: str, meta: dict) -> str:
    """Prefix a CSV with a ``#`` provenance comment line."""
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n" + text


def unstamp_csv(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# subcommands -----------------------------------------------------------


def cmd_gen_env(cfg: RunConfig, args) -> int:
    g = cfg.data["grid"]
    grid = generate_city_grid(
        cfg.seed, int(g["width_cells"]), int(g["height_cells"]), float(g["cell_size"]),
        cfg.block_spec(), g["jitter"],
    )
    out = _out(cfg, args.out, "grid.bfgw")
    save_grid(grid, out, cfg.provenance())
    out.with_suffix(".svg").write_text(grid_to_svg(grid))
    print(f"{out}: {grid.width_cells}x{grid.height_cells} cells, {grid.n_free} free")
    return 0


def cmd_gen_dataset(cfg: RunConfig, args) -> int:
    grid = _load_grid(_path(cfg, args.grid, "grid.bfgw"))
    scene = cfg.scene(grid)
    ds = build_dataset(grid, cfg.codebook(), scene, args.stride, cfg.seed, _workers(args.workers))
    out = _out(cfg, args.out, "dataset.bffd")
    save_dataset(ds, out, {**cfg.provenance(), "threshold_eta_db": scene.threshold_eta_db})
    print(f"{out}: {len(ds.positions)} fingerprints, digest {ds.digest()}")
    return 0


def cmd_gen_trajectories(cfg: RunConfig, args) -> int:
    grid = _load_grid(_path(cfg, args.grid, "grid.bfgw"))
    c = cfg.data["corpus"]
    scene = cfg.scene(grid)
    profile = cfg.profile()
    corpus = generate_corpus(grid, profile, int(c["n"]), int(c["L"]), cfg.seed, c["T_obs"])
    corpus = attach_corpus(grid, corpus, cfg.codebook(), scene, cfg.seed, _workers(args.workers))
    out = _out(cfg, args.out, "corpus.bftr")
    meta = {**cfg.provenance(), "profile": asdict(profile), "threshold_eta_db": scene.threshold_eta_db}
    save_corpus(corpus, out, out.with_suffix(".bffd"), meta, grid.digest(), scene.digest())
    print(f"{out}: {len(corpus)} {profile.kind} trajectories, L={c['L']}")
    return 0


def _split(cfg: RunConfig, corpus):
    return split_corpus([t.id for t in corpus], cfg.data["corpus"]["split"], cfg.seed)


def cmd_train(cfg: RunConfig, args) -> int:
    grid = _load_grid(_path(cfg, args.grid, "grid.bfgw"))
    corpus, _ = load_corpus(_path(cfg, args.corpus, "corpus.bftr"))
    t0 = corpus[0]
    tcfg = cfg.transformer_config(grid, t0.T_obs, t0.horizon)
    result = train(corpus, _split(cfg, corpus), tcfg, cfg.train_config(), log=_log)
    out = _out(cfg, args.out, "model.bfnn")
    meta = {**cfg.provenance(), "transformer": asdict(tcfg), "best_epoch": result.best_epoch}
    save_params(out, result.params.arrays(), meta)
    out.with_name("loss.csv").write_text(stamp_csv(result.loss_csv(), cfg.provenance()))
    print(f"{out}: best epoch {result.best_epoch}, val mse {result.best_val:.4f} m^2")
    return 0


def _load_model(path: Path):
    arrays, meta = load_params(path)
    if "transformer" not in meta:
        raise FormatError(f"{path}: checkpoint lacks the transformer config")
    tcfg = TransformerConfig(**meta["transformer"])
    params = init_params(tcfg)
    params.load(arrays)
    return params, tcfg


def cmd_estimate(cfg: RunConfig, args) -> int:
    params, tcfg = _load_model(_path(cfg, args.model, "model.bfnn"))
    corpus, _ = load_corpus(_path(cfg, args.corpus, "corpus.bftr"))
    if args.subset != "all":
        keep = set(getattr(_split(cfg, corpus), args.subset))
        corpus = [t for t in corpus if t.id in keep]
    if not corpus:
        raise ParameterError(f"subset {args.subset!r} is empty")
    pred = predict(params, tcfg, corpus)
    truth = np.stack([t.target for t in corpus])
    cv = constant_velocity_baseline(np.stack([t.observed for t in corpus]), tcfg.horizon)
    m, mc = bench.evaluate(pred, truth), bench.evaluate(cv, truth)
    doc = {
        **cfg.provenance(),
        "subset": args.subset,
        "n": m.N,
        "rmse_m": m.rmse_m,
        "rmse_per_point_m": m.rmse_per_point_m,
        "p95_m": m.p95_rmse_m,
        "cv_rmse_m": mc.rmse_m,
        "estimates": [
            {"id": int(t.id), "positions": [[float(x), float(y)] for x, y in p]} for t, p in zip(corpus, pred)
        ],
    }
    out = _out(cfg, args.out, "estimates.json")
    out.write_text(json.dumps(doc, indent=1))
    print(f"{out}: {m.N} trajectories, rmse {m.rmse_m:.3f} m (constant velocity {mc.rmse_m:.3f} m)")
    return 0


def _et_waypoints(path: Path, traj_id: int | None) -> list[list[float]]:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    if "waypoints" in doc:
        return doc["waypoints"]
    ests = doc.get("estimates", [])
    if traj_id is not None:
        ests = [e for e in ests if e["id"] == traj_id]
    if not ests:
        raise ParameterError(f"{path}: no estimated trajectory to sample around")
    return ests[0]["positions"]


def cmd_plan(cfg: RunConfig, args) -> int:
    grid = _load_grid(_path(cfg, args.grid, "grid.bfgw"))
    p = cfg.data["planner"]
    start = args.start or bench.CITY_START
    target = args.target or bench.CITY_TARGET
    if args.et:
        region = SamplingRegion(
            "et_corridor", tuple(map(tuple, _et_waypoints(Path(args.et), args.traj_id))),
            float(p["corridor_radius"]), exploration_eps=float(p["exploration_eps"]),
            bounds=bench.bench_region(grid, start, target, float(p["margin"])).bounds,
        )
    else:
        region = bench.bench_region(grid, start, target, float(p["margin"]))
    alg = args.alg.replace("-", "_")
    result = PLANNERS[alg](grid, region, start, target, cfg.planner_config(cfg.seed))
    doc = json.loads(result.to_json())
    doc["config_digest"] = cfg.digest()
    out = _out(cfg, args.out, "plan.json")
    out.write_text(json.dumps(doc, indent=1))
    out.with_suffix(".svg").write_text(tree_to_svg(grid, result))
    if not result.solved:
        raise SamplingError(f"{alg}: no path within {result.iterations_used} iterations (empty path written)")
    print(f"{out}: {alg} cost {result.total_cost:.2f} m, {len(result.path)} waypoints")
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    grid = _load_grid(_path(cfg, args.grid, "grid.bfgw"))
    b = cfg.data["bench"]
    workers = _workers(args.workers)
    prov = cfg.provenance()
    if args.kind == "planner":
        p = cfg.data["planner"]
        start = args.start or bench.CITY_START
        target = args.target or bench.CITY_TARGET
        runs, summary = bench.planner_benchmark(
            grid, bench.bench_region(grid, start, target, float(p["margin"])), start, target,
            float(p["step_size"]), int(p["max_iterations"]), int(b["seeds"]), float(p["goal_tolerance"]),
            workers=workers,
        )
        out = _out(cfg, args.out, "planner_runs.csv")
        out.write_text(stamp_csv(bench.rows_to_csv(runs, bench.PlanRunRow), prov))
        out.with_name("planner_summary.csv").write_text(
            stamp_csv(bench.rows_to_csv(summary, bench.PlannerBenchRow), prov)
        )
        for row in summary:
            print(f"{row.algorithm:10s} median cost {row.median_cost_m:8.2f} m  runtime {row.median_runtime_s:.2f} s")
    else:
        rows = bench.sweep_sequence_length(
            grid, cfg.profile(), b["lengths"], b["sigmas_db"], int(b["n"]), cfg.seed, cfg.train_config(),
            cfg.scene(grid), cfg.codebook(), args.turn_only, workers, log=_log,
        )
        out = _out(cfg, args.out, "sweep.csv")
        out.write_text(stamp_csv(bench.rows_to_csv(rows, bench.SweepRow), prov))
        out.with_suffix(".svg").write_text(bench.sweep_to_svg(rows))
        for r in rows:
            print(f"L={r.L:2d} sigma={r.sigma_db:g} {r.model}: rmse {r.rmse_m:.3f} m, p95 {r.p95_m:.3f} m")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    """Collect the run's results into one CSV, without wall-time fields."""
    d = Path(args.dir) if args.dir else cfg.output_dir
    rows: list[tuple[str, str, str]] = []
    loss = d / "loss.csv"
    if loss.exists():
        hist = list(csv.DictReader(io.StringIO(unstamp_csv(loss.read_text()))))
        if hist:
            best = min(hist, key=lambda r: float(r["val_mse"]))
            rows += [("train", "epochs", str(len(hist))), ("train", "best_epoch", best["epoch"]),
                     ("train", "best_val_mse", best["val_mse"])]
    est = d / "estimates.json"
    if est.exists():
        doc = json.loads(est.read_text())
        rows += [("estimate", k, repr(doc[k])) for k in ("n", "rmse_m", "rmse_per_point_m", "p95_m", "cv_rmse_m")]
    plan = d / "plan.json"
    if plan.exists():
        doc = json.loads(plan.read_text())
        rows += [("plan", "algorithm", doc["algorithm"]), ("plan", "total_cost_m", repr(doc["total_cost_m"])),
                 ("plan", "iterations", str(doc["iterations"]))]
    summ = d / "planner_summary.csv"
    if summ.exists():
        for r in bench.rows_from_csv(unstamp_csv(summ.read_text()), bench.PlannerBenchRow):
            rows.append(("planner_bench", f"{r.algorithm}.median_cost_m", repr(r.median_cost_m)))
    sweep = d / "sweep.csv"
    if sweep.exists():
        for r in bench.rows_from_csv(unstamp_csv(sweep.read_text()), bench.SweepRow):
            rows.append(("sweep", f"{r.profile}.L{r.L}.sigma{r.sigma_db:g}.{r.model}.rmse_m", repr(r.rmse_m)))
    if not rows:
        raise FormatError(f"{d}: no results to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "key", "value"])
    w.writerows(rows)
    out = Path(args.out) if args.out else d / "report.csv"
    out.write_text(stamp_csv(buf.getvalue(), cfg.provenance()))
    sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bfftraj", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help="output directory (default from config)")
    common.add_argument("--out", help="primary output file")
    common.add_argument("--workers", type=int, help="process fan-out cap (default: $BFT_WORKERS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-env", parents=[common], help="generate the occupancy grid")

    p = sub.add_parser("gen-dataset", parents=[common], help="fingerprints on a lattice of free cells")
    p.add_argument("grid", nargs="?")
    p.add_argument("--stride", type=int, default=4)

    p = sub.add_parser("gen-trajectories", parents=[common], help="trajectory corpus with fingerprints")
    p.add_argument("grid", nargs="?")
    p.add_argument("--n", type=int)
    p.add_argument("--length", "-L", type=int, dest="L")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--sigma", type=float, help="noise sigma in dB")

    p = sub.add_parser("train", parents=[common], help="train the transformer")
    p.add_argument("corpus", nargs="?")
    p.add_argument("--grid")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("estimate", parents=[common], help="estimate trajectories with a checkpoint")
    p.add_argument("model", nargs="?")
    p.add_argument("corpus", nargs="?")
    p.add_argument("--subset", choices=["train", "val", "test", "all"], default="test")

    p = sub.add_parser("plan", parents=[common], help="run one planner query")
    p.add_argument("grid", nargs="?")
    p.add_argument("--alg", choices=["rrt", "rrt-star", "irrt-star"], default="irrt-star")
    p.add_argument("--start", type=_point)
    p.add_argument("--target", type=_point)
    p.add_argument("--step", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--et", help="estimates JSON (or {'waypoints': ...}) for corridor sampling")
    p.add_argument("--traj-id", type=int)

    p = sub.add_parser("bench", parents=[common], help="planner benchmark or estimation sweep")
    p.add_argument("kind", choices=["planner", "sweep"])
    p.add_argument("grid", nargs="?")
    p.add_argument("--seeds", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--start", type=_point)
    p.add_argument("--target", type=_point)
    p.add_argument("--lengths", type=_ints)
    p.add_argument("--sigmas", type=_floats)
    p.add_argument("--n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--turn-only", action="store_true")

    p = sub.add_parser("report", parents=[common], help="summarize a run directory as CSV")
    p.add_argument("dir", nargs="?")
    return ap


COMMANDS = {
    "gen-env": cmd_gen_env, "gen-dataset": cmd_gen_dataset, "gen-trajectories": cmd_gen_trajectories,
    "train": cmd_train, "estimate": cmd_estimate, "plan": cmd_plan, "bench": cmd_bench, "report": cmd_report,
}


def _apply_flags(cfg: RunConfig, args) -> None:
    cfg.override(None, "seed", args.seed)
    cfg.override(None, "output_dir", args.out_dir)
    flag_map = [
        ("n", "corpus", "n"), ("L", "corpus", "L"), ("epochs", "train", "epochs"),
        ("step", "planner", "step_size"), ("iters", "planner", "max_iterations"),
        ("seeds", "bench", "seeds"), ("lengths", "bench", "lengths"), ("sigmas", "bench", "sigmas_db"),
        ("sigma", "scene", "noise_sigma_db"),
    ]
    for attr, section, key in flag_map:
        cfg.override(section, key, getattr(args, attr, None))
    if getattr(args, "profile", None):
        cfg.data["profile"] = {"kind": args.profile}
        cfg.override(None, "seed", cfg.seed)
    if args.command == "bench" and args.kind == "sweep" and args.n is not None:
        cfg.override("bench", "n", args.n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        _apply_flags(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except BFTError as exc:
        print(f"bfftraj: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"bfftraj: io error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest

from bfftraj import cli
from bfftraj.gridworld import load_grid
from bfftraj.numcore import load_params
from bfftraj.trajectories import load_corpus

DESK = {
    "seed": 3,
    "grid": {"width_cells": 64, "height_cells": 64, "block_w": 10, "block_h": 10, "street_w": 14, "jitter": 0},
    "scene": {"tx_position": [32.0, 32.0]},
    "corpus": {"n": 24, "L": 6},
    "model": {"d_model": 8, "h": 2, "N_e": 1, "N_d": 1, "d_ff": 16},
    "train": {"epochs": 2, "batch_size": 8},
    "planner": {"max_iterations": 400},
    "bench": {"seeds": 1},
}


def write_config(d, **extra):
    cfg = json.loads(json.dumps(DESK))
    cfg["output_dir"] = str(d)
    for section, values in extra.items():
        cfg.setdefault(section, {}).update(values)
    path = d / "run.json"
    d.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg))
    return str(path)


def run_pipeline(d):
    conf = write_config(d)
    steps = [
        ["gen-env"], ["gen-trajectories"], ["train"], ["estimate"],
        ["plan", "--alg", "rrt-star", "--start", "5,5", "--target", "58,32"],
        ["report"],
    ]
    for s in steps:
        assert cli.main(s + ["--config", conf]) == 0, s
    return conf


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    run_pipeline(d)
    return d


class TestPipeline:
    def test_artifacts(self, run_dir):
        for name in ("grid.bfgw", "grid.svg", "corpus.bftr", "corpus.bffd", "model.bfnn", "loss.csv",
                     "estimates.json", "plan.json", "plan.svg", "report.csv"):
            assert (run_dir / name).exists(), name

    def test_grid_matches_config(self, run_dir):
        grid, meta = load_grid(run_dir / "grid.bfgw", with_meta=True)
        assert grid.blocked.shape == (64, 64)
        assert meta["seed"] == 3 and len(meta["config_digest"]) > 8

    def test_provenance_stamps_agree(self, run_dir):
        cfg = cli.RunConfig.load(run_dir / "run.json")
        digest = cfg.digest()
        assert (run_dir / "loss.csv").read_text().startswith(f"# config_digest={digest} seed=3\n")
        assert json.loads((run_dir / "estimates.json").read_text())["config_digest"] == digest
        assert json.loads((run_dir / "plan.json").read_text())["config_digest"] == digest
        _, meta = load_params(run_dir / "model.bfnn")
        assert meta["config_digest"] == digest
        assert meta["transformer"]["d_model"] == 8

    def test_loss_log(self, run_dir):
        lines = cli.unstamp_csv((run_dir / "loss.csv").read_text()).splitlines()
        assert lines[0] == "epoch,train_mse,val_mse,lr"
        assert len(lines) == 3

    def test_plan_json(self, run_dir):
        doc = json.loads((run_dir / "plan.json").read_text())
        assert doc["algorithm"] == "rrt_star" and doc["path"][0] == [5.0, 5.0] and doc["path"][-1] == [58.0, 32.0]
        seg = np.diff(np.array(doc["path"]), axis=0)
        assert np.hypot(*seg.T).sum() == pytest.approx(doc["total_cost_m"])

    def test_deterministic_rerun(self, run_dir, tmp_path):
        other = tmp_path / "again"
        run_pipeline(other)
        for name in ("loss.csv", "report.csv", "estimates.json"):
            a = (run_dir / name).read_text()
            b = (other / name).read_text()
            if name == "estimates.json":
                a, b = json.loads(a), json.loads(b)
            assert a == b, name
        pa = json.loads((run_dir / "plan.json").read_text())
        pb = json.loads((other / "plan.json").read_text())
        pa.pop("wall_time_s"), pb.pop("wall_time_s")
        assert pa == pb
        la, _ = load_params(run_dir / "model.bfnn")
        lb, _ = load_params(other / "model.bfnn")
        assert all(np.array_equal(la[k], lb[k]) for k in la)

    def test_et_corridor_plan(self, run_dir, tmp_path):
        wp = tmp_path / "wp.json"
        wp.write_text(json.dumps({"waypoints": [[5, 5], [5, 32], [32, 32], [58, 32]]}))
        out = tmp_path / "et_plan.json"
        rc = cli.main(["plan", "--config", str(run_dir / "run.json"), "--start", "5,5", "--target", "58,32",
                       "--et", str(wp), "--out", str(out)])
        assert rc == 0 and json.loads(out.read_text())["path"][-1] == [58.0, 32.0]


def test_train_zero_epochs(run_dir, tmp_path):
    out = tmp_path / "m0.bfnn"
    assert cli.main(["train", "--config", str(run_dir / "run.json"), "--epochs", "0", "--out", str(out)]) == 0
    params, meta = load_params(out)
    assert meta["best_epoch"] == 0 and params


def test_planner_bench(run_dir, tmp_path):
    out = tmp_path / "runs.csv"
    rc = cli.main(["bench", "planner", "--config", str(run_dir / "run.json"), "--start", "5,5",
                   "--target", "58,32", "--iters", "200", "--out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert text.startswith("# config_digest=")
    assert "algorithm,seed,cost_m" in text
    assert (tmp_path / "planner_summary.csv").exists()


def test_unsolved_plan_exit_code(run_dir, tmp_path):
    rc = cli.main(["plan", "--config", str(run_dir / "run.json"), "--start", "5,5", "--target", "58,58",
                   "--iters", "0", "--out", str(tmp_path / "p.json")])
    assert rc == cli.EXIT_CODES["budget"]
    assert json.loads((tmp_path / "p.json").read_text())["path"] == []


class TestErrors:
    def test_unknown_key(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"grid": {"colour": 1}}))
        assert cli.main(["gen-env", "--config", str(p)]) == 2
        assert "colour" in capsys.readouterr().err

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"extras": {}}))
        assert cli.main(["gen-env", "--config", str(p)]) == 2

    def test_schema_version(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"schema_version": 99}))
        assert cli.main(["gen-env", "--config", str(p)]) == 2

    def test_invalid_value(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"model": {"d_model": 7, "h": 2}, "output_dir": str(tmp_path)}))
        assert cli.main(["gen-env", "--config", str(p)]) == 0
        assert cli.main(["train", "--config", str(p)]) in (2, 3)

    def test_missing_config(self, tmp_path):
        assert cli.main(["gen-env", "--config", str(tmp_path / "none.json")]) == 3

    def test_missing_grid(self, tmp_path):
        assert cli.main(["plan", str(tmp_path / "none.bfgw")]) == 3

    def test_corrupt_grid(self, tmp_path):
        bad = tmp_path / "g.bfgw"
        bad.write_bytes(b"nonsense")
        assert cli.main(["plan", str(bad)]) == 3

    def test_bad_workers_env(self, run_dir, monkeypatch):
        monkeypatch.setenv("BFT_WORKERS", "many")
        assert cli.main(["gen-trajectories", "--config", str(run_dir / "run.json"),
                         "--out", str(run_dir / "unused.bftr")]) == 2


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("BFT_WORKERS", "3")
    assert cli._workers(None) == 3
    assert cli._workers(1) == 1
    monkeypatch.delenv("BFT_WORKERS")
    assert cli._workers(None) == 1


def test_workers_do_not_change_corpus(run_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("BFT_WORKERS", "2")
    out = tmp_path / "c2.bftr"
    assert cli.main(["gen-trajectories", "--config", str(run_dir / "run.json"), "--out", str(out)]) == 0
    a, meta_a = load_corpus(out)
    b, meta_b = load_corpus(run_dir / "corpus.bftr")
    meta_a.pop("fingerprint_file"), meta_b.pop("fingerprint_file")
    assert meta_a == meta_b
    assert [t.id for t in a] == [t.id for t in b]
    for x, y in zip(a, b):
        assert np.array_equal(x.positions, y.positions) and np.array_equal(x.fingerprints, y.fingerprints)


class TestRunConfig:
    def test_digest_ignores_key_order_and_tracks_values(self):
        a = cli.RunConfig({"seed": 1, "grid": {"jitter": 0, "block_w": 20}})
        b = cli.RunConfig({"grid": {"block_w": 20, "jitter": 0}, "seed": 1})
        c = cli.RunConfig({"grid": {"block_w": 21, "jitter": 0}, "seed": 1})
        assert a.digest() == b.digest() != c.digest()

    def test_digest_recomputes_from_defaults(self):
        assert cli.RunConfig().digest() == cli.RunConfig({"schema_version": 1}).digest()

    def test_override_validates(self):
        cfg = cli.RunConfig()
        with pytest.raises(Exception):
            cfg.override("train", "epochs", 500)

    def test_csv_stamp_round_trip(self):
        text = "a,b\n1,2\n"
        stamped = cli.stamp_csv(text, {"seed": 4, "config_digest": "abc"})
        assert stamped.splitlines()[0] == "# config_digest=abc seed=4"
        assert cli.unstamp_csv(stamped) == text

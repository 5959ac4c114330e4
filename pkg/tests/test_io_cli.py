import json

import numpy as np
import pytest
import yaml

from egoplan import io
from egoplan.cli import main
from egoplan.config import OUT_ENV, ConfigError, load_config
from egoplan.errors import SchemaError
from egoplan.netlet import ResponseRegressor
from egoplan.scene import gen_scenario


@pytest.mark.parametrize("tpl", ["empty", "cut_in", "intersection_right", "ped_crossing"])
def test_scenario_round_trip(tpl, tmp_path):
    s = gen_scenario(tpl, 4)
    io.save_scenario(s, tmp_path / "s.json")
    back = io.load_scenario(tmp_path / "s.json")
    assert io.dumps(io.scenario_to_dict(back)) == io.dumps(io.scenario_to_dict(s))
    np.testing.assert_array_equal(back.ego_gt_future.waypoints, s.ego_gt_future.waypoints)


def test_schema_errors_name_the_path(tmp_path):
    d = io.scenario_to_dict(gen_scenario("cut_in", 0))
    d["agents"][0]["box"] = [1.0, 2.0]
    with pytest.raises(SchemaError, match="agents"):
        io.validate_scenario(d)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(SchemaError, match="bad.json"):
        io.load_scenario(tmp_path / "bad.json")
    with pytest.raises(OSError, match="missing.json"):
        io.load_scenario(tmp_path / "missing.json")


def test_config_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert load_config()["refine"]["N"] == 2
    assert load_config()["out"] == "out"
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"refine": {"N": 3}, "seed": 5}))
    cfg = load_config(f)
    assert cfg["refine"]["N"] == 3 and cfg["seed"] == 5
    assert load_config(f, {"refine.N": 1, "seed": None})["refine"]["N"] == 1
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envout"))
    assert load_config()["out"] == str(tmp_path / "envout")
    f.write_text(yaml.safe_dump({"refine": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        load_config(f)
    with pytest.raises(ConfigError):
        load_config(None, {"workers": 0})


def test_gen_is_deterministic_and_valid(tmp_path):
    assert main(["gen", "empty", "1", "--out", str(tmp_path / "a")]) == 0
    files = list((tmp_path / "a").glob("*.json"))
    assert len(files) == 1 and json.loads(files[0].read_text())["agents"] == []
    assert main(["gen", "cut_in", "5", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert main(["gen", "cut_in", "5", "--seed", "3", "--out", str(tmp_path / "c")]) == 0
    for f in sorted((tmp_path / "b").glob("*.json")):
        io.validate_scenario(json.loads(f.read_text()))
        assert f.read_bytes() == (tmp_path / "c" / f.name).read_bytes()
    assert main(["gen", "nope", "1", "--out", str(tmp_path / "d")]) == 2


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main(["run"]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "c.yaml"
    bad.write_text("refine: [1, 2")
    assert main(["run", str(tmp_path), "--config", str(bad)]) == 2


@pytest.fixture(scope="module")
def batch(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch")
    main(["gen", "cut_in", "3", "--out", str(root / "scen")])
    main(["gen", "empty", "1", "--out", str(root / "scen")])
    return root


def test_run_writes_plans_and_config(batch):
    out = batch / "run1"
    assert main(["run", str(batch / "scen"), "--out", str(out)]) == 0
    plans = sorted(out.glob("*.plan.json"))
    assert len(plans) == 4
    assert yaml.safe_load((out / "config.yaml").read_text())["refine"]["N"] == 2
    empty = json.loads((out / "empty_000000.plan.json").read_text())
    assert empty["schema"] == "plan/1"
    assert empty["stages"][-1]["cost_after"]["total"] == pytest.approx(0.0, abs=1e-9)
    assert main(["run", str(batch / "scen"), "--out", str(batch / "run2")]) == 0
    for p in plans:
        assert p.read_bytes() == (batch / "run2" / p.name).read_bytes()


def test_run_partial_failure(batch, tmp_path):
    d = tmp_path / "scen"
    d.mkdir()
    (d / "good.json").write_bytes((batch / "scen" / "empty_000000.json").read_bytes())
    (d / "broken.json").write_text("{}")
    assert main(["run", str(d), "--out", str(tmp_path / "o")]) == 1
    assert (tmp_path / "o" / "good.plan.json").exists()


def test_eval_gt_and_methods(batch, capsys):
    main(["run", str(batch / "scen"), "--out", str(batch / "runA"), "--stages", "1"])
    out = batch / "eval"
    code = main(["eval", "--scenarios", str(batch / "scen"), "--gt", "--plans", f"n1={batch / 'runA'}",
                 "--out", str(out)])
    assert code == 0
    rep = json.loads((out / "report.json").read_text())["rows"]
    gt = [r for r in rep if r["method"] == "ground-truth"]
    assert len(gt) == 2 and all(r["l2_avg"] == 0.0 for r in gt)
    assert "n1 vs ground-truth" in capsys.readouterr().out


def test_eval_unmatched_plan(batch, tmp_path):
    d = tmp_path / "plans"
    d.mkdir()
    (d / "ghost.plan.json").write_text(json.dumps({"schema": "plan/1", "dt": 0.5, "waypoints": [[0, 0]] * 6}))
    assert main(["eval", "--scenarios", str(batch / "scen"), "--gt", "--plans", f"x={d}",
                 "--out", str(tmp_path / "o")]) == 1


def test_eval_divergence_batch(tmp_path):
    main(["gen", "divergence", "5", "--out", str(tmp_path / "s")])
    assert main(["eval", "--scenarios", str(tmp_path / "s"), "--gt", "--out", str(tmp_path / "o")]) == 0
    rows = {r["protocol"]: r for r in json.loads((tmp_path / "o" / "report.json").read_text())["rows"]}
    assert rows["grid"]["col_3s"] > rows["obb"]["col_3s"]


def test_train_checkpoint_round_trip(tmp_path):
    assert main(["train-response", "--synthetic", "1", "--steps", "10", "--C", "8",
                 "--out", str(tmp_path)]) == 0
    model = ResponseRegressor.load(tmp_path / "response.netlet.json")
    assert model.C == 8
    assert len((tmp_path / "loss.csv").read_text().splitlines()) == 12


def test_denoise_rows(tmp_path):
    assert main(["denoise", "--trials", "67", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "denoise.csv").read_text().splitlines()
    assert lines[0].split(",")[-1] == "residual_after"
    assert len(lines) - 1 == 201


def test_plots(tmp_path):
    from egoplan.bevgrid import BevGrid, GridSpec

    grid = BevGrid(GridSpec(), np.zeros(GridSpec().shape))
    (tmp_path / "g.json").write_text(json.dumps(grid.to_dict()))
    assert main(["plot", "bev", str(tmp_path / "g.json"), str(tmp_path / "g.svg")]) == 0
    text = (tmp_path / "g.svg").read_text()
    assert text.startswith("<svg") and len({line.split('fill="')[1][:7] for line in text.splitlines()
                                            if "<rect" in line}) == 1
    s = gen_scenario("cut_in", 2)
    io.save_scenario(s, tmp_path / "s.json")
    assert main(["run", str(tmp_path / "s.json"), "--out", str(tmp_path / "p")]) == 0
    assert main(["plot", "scene", str(tmp_path / "s.json"), str(tmp_path / "s.svg"),
                 "--plan", str(tmp_path / "p" / "s.plan.json")]) == 0
    assert "<polygon" in (tmp_path / "s.svg").read_text()
    main(["train-response", "--synthetic", "1", "--steps", "3", "--C", "8", "--out", str(tmp_path / "t")])
    assert main(["plot", "curve", str(tmp_path / "t" / "loss.csv"), str(tmp_path / "c.svg")]) == 0
    assert main(["plot", "bev", str(tmp_path / "t" / "loss.csv"), str(tmp_path / "x.svg")]) == 1


def test_report_table1(tmp_path, capsys):
    f = tmp_path / "rows.csv"
    f.write_text("method,l2_1s,l2_2s,l2_3s,col_1s,col_2s,col_3s\n"
                 "UniAD,0.48,0.96,1.65,0.05,0.17,0.71\nours,0.16,0.33,0.59,0.00,0.04,0.18\n")
    assert main(["report", str(f), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "L2 reduced 65.0%" in out and "collision reduced 76.3%" in out
    assert main(["report", str(f), "--baseline", "VAD", "--out", str(tmp_path / "o")]) == 2


def test_ego_dims_from_config(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"ego": {"length": 5.0, "width": 2.0}}))
    from egoplan.config import build

    assert build(load_config(f))["ego_dims"] == (5.0, 2.0)
    f.write_text(yaml.safe_dump({"ego": {"length": -1.0}}))
    with pytest.raises(ConfigError):
        load_config(f)

import json
import subprocess
import sys

import numpy as np
import pytest

from firecastnet import cli, model
from firecastnet import tensor as tn
from firecastnet.data import load_cube


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small synthetic cube plus level-1 mesh built through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["data", "synth", "--seed", "3", "--years", "2015:2019", "--h", "16", "--w", "32", "--out", str(d / "cube.sfdc")]) == 0
    assert cli.main(["mesh", "build", "--levels", "1", "--grid", "16x32", "--out", str(d / "mesh.bin")]) == 0
    return d


def _zero_checkpoint(d, ws):
    cfg = model.FireCastNetConfig(ts=6, embed_channels=4, mesh_hidden=4, processor_layers=1, mesh_level=1)
    state = model.init_parameters(cfg, 0, scheme="zeros")
    run = {"subcommand": "train", "flags": {"mesh": str(ws / "mesh.bin"), "horizon": 1}}
    model.save_checkpoint(d / "zero", state, 0, {"run_config": run, "model_id": "zero"})
    return d / "zero"


def test_mesh_stats_level6(tmp_path, capsys):
    assert cli.main(["mesh", "build", "--levels", "6", "--out", str(tmp_path / "m.bin")]) == 0
    capsys.readouterr()
    assert cli.main(["mesh", "stats", str(tmp_path / "m.bin")]) == 0
    out = capsys.readouterr().out
    assert "nodes=40962" in out
    assert "edges=163830" in out


def test_synth_is_byte_identical(tmp_path):
    args = ["data", "synth", "--seed", "7", "--years", "2017:2019", "--h", "8", "--w", "16"]
    out = tmp_path / "c.sfdc"
    assert cli.main(args + ["--out", str(out)]) == 0
    out.rename(tmp_path / "first")
    assert cli.main(args + ["--out", str(out)]) == 0
    assert (tmp_path / "first").read_bytes() == out.read_bytes()
    assert load_cube(out).num_times == 3 * 46


def test_bad_ts_is_usage_error(workspace, tmp_path, capsys):
    code = cli.main(["train", "--cube", str(workspace / "cube.sfdc"), "--mesh", str(workspace / "mesh.bin"), "--ts", "13", "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err
    assert "6, 12, 24" in err


def test_exit_codes_via_entry_point(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "firecastnet.cli", *a], capture_output=True, text=True)
    r = run("mesh", "stats", str(tmp_path / "missing.bin"))
    assert r.returncode == 2
    assert r.stderr.strip().splitlines()[-1].startswith("error: no such file")
    assert run("mesh", "frobnicate").returncode == 1
    assert run("data", "synth", "--out", "x", "--bogus").returncode == 1
    r = run("mesh", "build", "--levels", "0", "--out", str(tmp_path / "m"), "--threads", "1")
    assert r.returncode == 0
    cfg = json.loads(r.stderr.split("config: ", 1)[1].splitlines()[0])
    assert cfg["subcommand"] == "mesh build" and cfg["flags"]["threads"] == 1


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("FIRECAST_THREADS", "2")
    assert cli.resolve_threads(None) == 2
    assert cli.resolve_threads(1) == 1
    monkeypatch.setenv("FIRECAST_THREADS", "zero")
    with pytest.raises(cli.UsageError):
        cli.resolve_threads(None)


def test_zero_model_predicts_one_half(workspace, tmp_path):
    ck = _zero_checkpoint(tmp_path, workspace)
    out = tmp_path / "pred"
    assert cli.main(["predict", "--ckpt", str(ck), "--cube", str(workspace / "cube.sfdc"), "--out", str(out), "--export-map"]) == 0
    bins = sorted(out.glob("*.bin"))
    assert len(bins) == 46
    for b in bins[:5]:
        assert np.all(tn.load_tensor(b) == 0.5)
    pgm = bins[0].with_suffix(".pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 16\n255\n")
    assert set(pgm[len(b"P5\n32 16\n255\n"):]) == {128}
    meta = json.loads(bins[0].with_suffix(".json").read_text())
    assert meta["time"] == "2019-01-01" and meta["model_id"] == "zero"
    assert meta["run_config"]["subcommand"] == "predict"


def test_horizon_timestamp_arithmetic(workspace, tmp_path):
    ck = _zero_checkpoint(tmp_path, workspace)
    out = tmp_path / "pred8"
    assert cli.main(["predict", "--ckpt", str(ck), "--cube", str(workspace / "cube.sfdc"), "--horizon", "8", "--out", str(out)]) == 0
    slab = load_cube(workspace / "cube.sfdc")
    metas = [json.loads(p.read_text()) for p in sorted(out.glob("*.json"))]
    assert len(metas) == 46
    for m in metas:
        assert m["horizon"] == 8
        assert m["target_index"] - m["input_end_index"] == 8
        assert str(slab.times[m["target_index"]]) == m["time"]
        assert str(slab.times[m["input_end_index"]]) == m["input_end"]


def test_eval_and_baseline_reports(workspace, tmp_path):
    ck = _zero_checkpoint(tmp_path, workspace)
    pred = tmp_path / "pred"
    cube = str(workspace / "cube.sfdc")
    assert cli.main(["predict", "--ckpt", str(ck), "--cube", cube, "--out", str(pred)]) == 0
    assert cli.main(["data", "region", "--cube", cube, "--name", "north", "--lat", "0:90", "--lon=-180:180", "--out", str(tmp_path / "north.sfrm")]) == 0
    assert cli.main(["eval", "--pred", str(pred), "--cube", cube, "--regions", str(tmp_path / "north.sfrm"), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert set(rep) == {"model_id", "horizon", "global", "regions", "config"}
    assert set(rep["global"]["baselines"]) == {"anyfire", "majority"}
    assert list(rep["regions"]) == ["north"]
    # constant scores: AP equals positive rate
    assert rep["global"]["auprc"] == pytest.approx(rep["global"]["positive_rate"], abs=1e-12)
    assert cli.main(["baseline", "--cube", cube, "--kind", "majority", "--out", str(tmp_path / "b.json")]) == 0
    b = json.loads((tmp_path / "b.json").read_text())
    assert b["model_id"] == "naive-majority"
    assert b["global"]["auprc"] == pytest.approx(rep["global"]["baselines"]["majority"], abs=1e-15)


def test_eval_rejects_bad_sidecar(workspace, tmp_path):
    d = tmp_path / "p"
    d.mkdir()
    (d / "2019-01-01.json").write_text("{}")
    assert cli.main(["eval", "--pred", str(d), "--cube", str(workspace / "cube.sfdc"), "--out", str(tmp_path / "r")]) == 2


def test_train_predict_attribute_pipeline(workspace, tmp_path):
    cube, mesh = str(workspace / "cube.sfdc"), str(workspace / "mesh.bin")
    run = tmp_path / "run"
    args = ["train", "--cube", cube, "--mesh", mesh, "--ts", "6", "--overlap", "0", "--epochs", "2",
            "--sgdr-cycles", "1", "1", "--hidden", "4", "--layers", "1", "--threads", "1", "--quiet", "--out", str(run)]
    assert cli.main(args) == 0
    for name in ("metrics.jsonl", "best.json", "best.bin", "last.json", "last.bin", "run_config.json", "summary.json"):
        assert (run / name).is_file(), name
    manifest = json.loads((run / "best.json").read_text())
    assert manifest["run_config"]["flags"]["ts"] == 6
    assert cli.main(["attribute", "--ckpt", str(run), "--cube", cube, "--horizon", "1", "--steps", "4", "--out", str(tmp_path / "a.json")]) == 0
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["steps"] == 4
    assert sum(rep["shares"].values()) == pytest.approx(1.0, abs=1e-6)
    assert set(rep["positional"]) == {"cos_lat", "sin_lon", "cos_lon"}


def test_build_lam_from_region(tmp_path, capsys):
    cube = tmp_path / "cube.sfdc"
    assert cli.main(["data", "synth", "--years", "2018:2019", "--h", "32", "--w", "64", "--out", str(cube)]) == 0
    assert cli.main(["data", "region", "--cube", str(cube), "--name", "box", "--lat", "30:45", "--lon=-10:20", "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    lam = tmp_path / "lam.bin"
    assert cli.main(["mesh", "build-lam", "--region", str(tmp_path / "r"), "--fine", "4", "--coarse", "2", "--buffer-km", "400,800", "--out", str(lam)]) == 0
    assert cli.main(["mesh", "stats", str(lam)]) == 0
    out = capsys.readouterr().out
    nodes = int(out.split("nodes=")[1].split()[0])
    assert 162 < nodes < 2562
    assert cli.main(["mesh", "build-lam", "--region", str(tmp_path / "r"), "--buffer-km", "400", "--out", str(lam)]) == 1

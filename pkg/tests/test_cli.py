import json

import pytest

from crossdet.cli import run


@pytest.fixture
def scenario(tmp_path):
    out = tmp_path / "scn"
    assert run(["synth", "--out", str(out), "--seed", "3", "--quiet",
                "--spec", str(_spec(tmp_path))]) == 0
    return out


def _spec(tmp_path):
    p = tmp_path / "spec.json"
    p.write_text(json.dumps({"n_frames": 4}))
    return p


def _eval_args(scn, out):
    return ["evaluate", "--det", str(scn / "det_rgbd.jsonl"), "--gt", str(scn / "gt.jsonl"),
            "--clouds", str(scn / "clouds"), "--calib", str(scn / "calib.json"), "--out", str(out),
            "--quiet"]


def test_missing_required_argument_is_usage_error(capsys):
    assert run(["evaluate", "--det", "x.jsonl"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["evaluate", "--det", "a", "--gt", "b", "--gate", "wide"]) == 1


def test_evaluate_pipeline(scenario, tmp_path):
    out = tmp_path / "eval"
    assert run(_eval_args(scenario, out) + ["--plot"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["ap"] <= 1.0
    assert (out / "curve.csv").read_text().startswith("detector,threshold,precision,recall,f1\n")
    assert (out / "pr.svg").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert set(manifest["outputs"]) == {"report.json", "curve.csv", "pr.svg"}
    assert manifest["config"]["seed"] is None
    assert all(len(v) == 64 for v in manifest["inputs"].values())


def test_corrupted_cloud_is_data_error(scenario, tmp_path, capsys):
    bad = scenario / "clouds" / "000002.bin"
    bad.write_bytes(bad.read_bytes()[:-3])
    out = tmp_path / "eval"
    assert run(_eval_args(scenario, out)) == 2
    assert "000002.bin" in capsys.readouterr().err
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["status"] == "failed" and "000002.bin" in manifest["error"]


def test_missing_input_file_is_data_error(tmp_path):
    assert run(["evaluate", "--det", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope"),
                "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_genlabels_fuse_plot(scenario, tmp_path):
    labels = tmp_path / "labels"
    assert run(["genlabels", "--teacher-det", str(scenario / "det_rgbd.jsonl"), "--clouds",
                str(scenario / "clouds"), "--calib", str(scenario / "calib.json"), "--out", str(labels),
                "--aug-count", "2", "--jobs", "2", "--quiet"]) == 0
    manifest = json.loads((labels / "manifest.json").read_text())
    assert manifest["n_frames"] == 8 and manifest["config"]["seed"] == 42
    fused = tmp_path / "fused" / "det.jsonl"
    assert run(["fuse", "--det", str(scenario / "det_rgbd.jsonl"), "--det", str(scenario / "det_lidar.jsonl"),
                "--out", str(fused), "--quiet"]) == 0
    assert fused.read_text().count("fused:lidar+rgbd") > 0
    assert run(["fuse", "--det", str(scenario / "det_rgbd.jsonl"), "--fov-partition", "kinect",
                "--out", str(fused), "--quiet"]) == 1
    out = tmp_path / "eval"
    assert run(_eval_args(scenario, out)) == 0
    assert run(["plot", "--report", str(out / "report.json"), "--out", str(tmp_path / "plot" / "pr.svg")]) == 0
    assert "<polyline" in (tmp_path / "plot" / "pr.svg").read_text()


def test_losscheck(capsys):
    assert run(["losscheck", "--points", "20"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert run(["losscheck", "--points", "5", "--tolerance", "1e-30"]) == 2

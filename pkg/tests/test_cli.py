import csv
import json
import shutil

import numpy as np
import pytest

from cdslice.cli import main
from cdslice.dataio import load_manifest
from cdslice.geometry import load_slices, read_cloud, scan_max_points
from cdslice.model import load_params

SMALL = ["--slices", "8"]
TRAIN = SMALL + ["--width-scale", "0.125", "--epochs", "2", "--lr", "1e-3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "12", "--out", str(root / "data"), "--points", "256", "--seed", "7"]) == 0
    assert main(["train", str(root / "data" / "manifest.csv"), "--out", str(root / "run"), *TRAIN]) == 0
    manifest = load_manifest(root / "data" / "manifest.csv")
    sample = manifest.split("test")[0]
    assert main(["eval", str(root / "run" / "best.cdpm"), str(root / "data" / "manifest.csv"), "--out", str(root / "eval")]) == 0
    return root, sample


# ------------------------------------------------------------ synth / scan


def test_synth_writes_split_manifest(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", 20, "--out", tmp_path / "d", "--points", 128, "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["splits"] == {"train": 14, "val": 3, "test": 3}
    assert payload["cd_std"] > 0
    assert len(list((tmp_path / "d" / "clouds").glob("*.pcld"))) == 20
    assert (tmp_path / "d" / "run_config.json").exists()


def test_synth_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth", 5, "--out", tmp_path / name, "--points", 64, "--seed", 3)
    assert (tmp_path / "a" / "manifest.csv").read_text() == (tmp_path / "b" / "manifest.csv").read_text()


def test_scan_matches_library(workspace, capsys):
    root, _ = workspace
    manifest = load_manifest(root / "data" / "manifest.csv")
    expected = scan_max_points([read_cloud(r.cloud_path) for r in manifest.rows], 8)
    code, out, _ = run(capsys, "scan", root / "data" / "manifest.csv", *SMALL, "--json")
    assert code == 0 and json.loads(out)["m_max"] == expected
    code, out, _ = run(capsys, "scan", root / "data" / "manifest.csv", *SMALL)
    assert f"M_max: {expected}" in out


def test_scan_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "scan", tmp_path / "nope.csv")
    assert code != 0 and "error" in err


# ------------------------------------------------------------ preprocess


def test_preprocess_idempotent(workspace, tmp_path, capsys):
    root, _ = workspace
    m = root / "data" / "manifest.csv"
    assert run(capsys, "preprocess", m, *SMALL, "--out", tmp_path / "c1")[0] == 0
    assert run(capsys, "preprocess", m, *SMALL, "--out", tmp_path / "c1")[0] == 0
    assert run(capsys, "preprocess", m, *SMALL, "--out", tmp_path / "c2")[0] == 0
    files = sorted(p.name for p in (tmp_path / "c1").glob("*.slct"))
    assert len(files) == 12
    for name in files:
        assert (tmp_path / "c1" / name).read_bytes() == (tmp_path / "c2" / name).read_bytes()
    cached = load_manifest(tmp_path / "c1" / "manifest.csv")
    assert len(cached) == 12


def test_preprocess_env_cache_dir(workspace, tmp_path, capsys, monkeypatch):
    root, _ = workspace
    monkeypatch.setenv("CDSLICE_CACHE_DIR", str(tmp_path / "envcache"))
    assert run(capsys, "preprocess", root / "data" / "manifest.csv", *SMALL)[0] == 0
    assert len(list((tmp_path / "envcache").glob("*.slct"))) == 12


def test_preprocess_overflow_reported_by_id(workspace, tmp_path, capsys):
    root, _ = workspace
    code, out, err = run(capsys, "preprocess", root / "data" / "manifest.csv", *SMALL, "--m-max", 5,
                         "--out", tmp_path / "c", "--json")
    assert code == 3
    failed = json.loads(out)["failed"]
    assert len(failed) == 12 and failed[0]["id"].startswith("body_")
    assert "failed" in err
    code, _, _ = run(capsys, "preprocess", root / "data" / "manifest.csv", *SMALL, "--m-max", 5,
                     "--out", tmp_path / "c2", "--lenient")
    assert code == 0


def test_preprocess_default_shape(tmp_path, capsys):
    run(capsys, "synth", 3, "--out", tmp_path / "d", "--points", 2000)
    assert run(capsys, "preprocess", tmp_path / "d" / "manifest.csv", "--m-max", 6500, "--out", tmp_path / "c")[0] == 0
    s = load_slices(next((tmp_path / "c").glob("*.slct")))
    assert s.data.shape == (80, 6500, 2)


def test_train_from_cache(workspace, tmp_path, capsys):
    root, _ = workspace
    run(capsys, "preprocess", root / "data" / "manifest.csv", *SMALL, "--out", tmp_path / "c")
    code, _, _ = run(capsys, "train", tmp_path / "c" / "manifest.csv", "--out", tmp_path / "r", *TRAIN)
    assert code == 0
    direct = (root / "run" / "train_log.csv").read_text().splitlines()
    cached = (tmp_path / "r" / "train_log.csv").read_text().splitlines()
    strip = lambda lines: [line.rsplit(",", 1)[0] for line in lines]  # noqa: E731
    assert strip(direct) == strip(cached)


# ------------------------------------------------------------ train


def test_train_outputs(workspace):
    root, _ = workspace
    for name in ("best.cdpm", "final.cdpm", "train_log.csv", "run_config.json"):
        assert (root / "run" / name).exists()
    cfg = json.loads((root / "run" / "run_config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["slice"]["n_slices"] == 8
    assert load_params(root / "run" / "best.cdpm").config.n_slices == 8


def test_train_same_seed_same_log(workspace, tmp_path, capsys):
    root, _ = workspace
    run(capsys, "train", root / "data" / "manifest.csv", "--out", tmp_path / "again", *TRAIN)
    strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]  # noqa: E731
    assert strip(tmp_path / "again" / "train_log.csv") == strip(root / "run" / "train_log.csv")
    assert (tmp_path / "again" / "best.cdpm").read_bytes() == (root / "run" / "best.cdpm").read_bytes()


def test_train_init_from_mismatch_refused(workspace, tmp_path, capsys):
    root, _ = workspace
    code, _, err = run(capsys, "train", root / "data" / "manifest.csv", "--out", tmp_path / "x",
                       "--slices", "10", "--width-scale", "0.125", "--epochs", "1",
                       "--init-from", root / "run" / "best.cdpm")
    assert code == 2 and "n_slices" in err


def test_config_file_precedence(workspace, tmp_path, capsys):
    root, _ = workspace
    (tmp_path / "cfg.json").write_text(json.dumps({"train": {"epochs": 1, "learning_rate": 0.5}, "slice": {"n_slices": 8}}))
    code, _, _ = run(capsys, "train", root / "data" / "manifest.csv", "--out", tmp_path / "r",
                     "--config", tmp_path / "cfg.json", "--width-scale", "0.125", "--lr", "1e-3")
    assert code == 0
    cfg = json.loads((tmp_path / "r" / "run_config.json").read_text())
    assert cfg["train"]["epochs"] == 1 and cfg["train"]["learning_rate"] == 1e-3


def test_unknown_config_key(workspace, tmp_path, capsys):
    root, _ = workspace
    (tmp_path / "cfg.json").write_text(json.dumps({"trian": {}}))
    code, _, err = run(capsys, "scan", root / "data" / "manifest.csv", "--config", tmp_path / "cfg.json")
    assert code == 2 and "trian" in err


# ------------------------------------------------------------ eval


def test_eval_outputs(workspace):
    root, _ = workspace
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    assert set(metrics) == {"mse", "mae", "r_squared", "max_ae", "n"}
    with open(root / "eval" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    manifest = load_manifest(root / "data" / "manifest.csv")
    assert {r["id"] for r in rows} == {r.sample_id for r in manifest.split("test")}
    assert metrics["n"] == len(rows)


def test_eval_split_flag(workspace, tmp_path, capsys):
    root, _ = workspace
    code, out, _ = run(capsys, "eval", root / "run" / "best.cdpm", root / "data" / "manifest.csv",
                       "--split", "train", "--out", tmp_path, "--json")
    assert code == 0 and json.loads(out)["n"] == len(load_manifest(root / "data" / "manifest.csv").split("train"))


# ------------------------------------------------------------ predict / sensitivity


def test_predict_repeatable_with_latency(workspace, capsys):
    root, sample = workspace
    outs = [run(capsys, "predict", root / "run" / "best.cdpm", sample.cloud_path)[1] for _ in range(2)]
    cd_lines = [o.splitlines()[0] for o in outs]
    assert cd_lines[0] == cd_lines[1] and cd_lines[0].startswith("Cd: ")
    assert "slicing" in outs[0] and "forward" in outs[0] and "ms" in outs[0]
    code, out, _ = run(capsys, "predict", root / "run" / "best.cdpm", sample.cloud_path, "--json")
    payload = json.loads(out)
    assert payload["slicing_ms"] >= 0 and payload["forward_ms"] > 0


def test_predict_malformed_cloud(workspace, tmp_path, capsys):
    root, _ = workspace
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2\n")
    code, _, err = run(capsys, "predict", root / "run" / "best.cdpm", bad)
    assert code != 0 and "error" in err
    code, _, _ = run(capsys, "predict", root / "run" / "best.cdpm", tmp_path / "missing.pcld")
    assert code != 0


def test_sensitivity_outputs(workspace, tmp_path, capsys):
    root, sample = workspace
    cloud = read_cloud(sample.cloud_path)
    # leave a gap so one slice is empty
    pts = cloud.points[(cloud.points[:, 0] < 0.9) | (cloud.points[:, 0] > 2.0)]
    gap = tmp_path / "gap.txt"
    np.savetxt(gap, pts)
    code, _, _ = run(capsys, "sensitivity", root / "run" / "best.cdpm", gap, "--out", tmp_path / "s")
    assert code == 0
    with open(tmp_path / "s" / "sensitivity.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    empty = [r for r in rows if r["points"] == "0"]
    assert empty and all(float(r["delta_cd"]) == 0.0 for r in empty)
    assert (tmp_path / "s" / "sensitivity.svg").read_text().lstrip().startswith("<?xml")


# ------------------------------------------------------------ report


def test_report_figures(workspace, tmp_path, capsys):
    root, _ = workspace
    code, _, _ = run(capsys, "report", root / "run" / "train_log.csv", root / "eval" / "predictions.csv", "--out", tmp_path)
    assert code == 0
    for name in ("loss_curve", "val_r2", "scatter", "error_hist"):
        assert (tmp_path / f"{name}.svg").exists()
    assert 'id="reference-y-equals-x"' in (tmp_path / "scatter.svg").read_text()
    with open(tmp_path / "error_hist.csv") as fh:
        rows = list(csv.DictReader(fh))
    widths = {round(float(r["upper"]) - float(r["lower"]), 12) for r in rows}
    assert widths == {0.005}


def test_report_byte_stable(workspace, tmp_path, capsys):
    root, _ = workspace
    for d in ("a", "b"):
        run(capsys, "report", root / "run" / "train_log.csv", root / "eval" / "predictions.csv", "--out", tmp_path / d)
    for name in ("loss_curve", "val_r2", "scatter", "error_hist"):
        assert (tmp_path / "a" / f"{name}.svg").read_bytes() == (tmp_path / "b" / f"{name}.svg").read_bytes()


def test_report_custom_bin_width(workspace, tmp_path, capsys):
    root, _ = workspace
    run(capsys, "report", root / "run" / "train_log.csv", root / "eval" / "predictions.csv", "--out", tmp_path,
        "--bin-width", "0.01")
    with open(tmp_path / "error_hist.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {round(float(r["upper"]) - float(r["lower"]), 12) for r in rows} == {0.01}


# ------------------------------------------------------------ gradcheck


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert "pointnet.conv0.weight" in out and "regressor.fc2.bias" in out and "lstm.l1.bwd.w_hh" in out


def test_gradcheck_fails_with_impossible_tolerance(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tolerance", "1e-15", "--json")
    assert code == 1 and json.loads(out)["passed"] is False


def test_inputs_not_mutated(workspace, tmp_path, capsys):
    root, _ = workspace
    data = tmp_path / "data"
    shutil.copytree(root / "data", data)
    before = {p: p.read_bytes() for p in data.rglob("*") if p.is_file()}
    run(capsys, "scan", data / "manifest.csv", *SMALL)
    run(capsys, "eval", root / "run" / "best.cdpm", data / "manifest.csv", "--out", tmp_path / "e")
    assert {p: p.read_bytes() for p in data.rglob("*") if p.is_file()} == before

"""End-to-end command-line coverage: config validation, commands, exit codes."""

import json

import numpy as np
import pytest

from deformapprox.cli import ConfigError, load_config, main

SMALL_CONFIG = {
    "rig": {"kind": "arm", "segments": 8, "radial": 8, "path": "rig.json"},
    "dataset": {"path": "frames.dataset", "frames": 12, "mode": "clip", "seed": 0},
    "split": {"stride": 4, "offset": 0},
    "model": {"path": "model.daxb", "checkpoint_dir": "checkpoints",
              "hidden": [8], "subspace_hidden": [4], "epochs": 10,
              "lr": 1e-2, "group_size": 2, "n_groups": 2},
    "ensemble": {"k": 2, "base_seed": 0, "dir": "ensemble"},
    "bench": {"reps": 1, "warmup": 1, "batch": 4, "frames": 6},
    "report": {"dir": "report"},
}


def write_config(directory, doc=SMALL_CONFIG):
    path = directory / "pipeline.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One trained pipeline shared by the read-only command tests."""
    ws = tmp_path_factory.mktemp("cli")
    config = write_config(ws)
    assert main(["extract", str(config)]) == 0
    assert main(["train", str(config)]) == 0
    return ws, config


# --- config loading --------------------------------------------------------


def test_config_defaults_and_overrides(tmp_path):
    path = write_config(tmp_path, {"model": {"epochs": 77}})
    cfg = load_config(path)
    assert cfg.section("model")["epochs"] == 77
    assert cfg.section("model")["lr"] == 1e-3
    assert cfg.section("dataset")["frames"] == 240
    assert cfg.resolve("x/y.bin") == (tmp_path / "x" / "y.bin").resolve()


def test_config_rejects_unknown_section(tmp_path):
    path = write_config(tmp_path, {"models": {}})
    with pytest.raises(ConfigError, match="unknown sections"):
        load_config(path)


def test_config_rejects_unknown_key(tmp_path):
    path = write_config(tmp_path, {"model": {"epoch": 5}})
    with pytest.raises(ConfigError, match="unknown keys in 'model'"):
        load_config(path)


def test_config_rejects_non_object_section(tmp_path):
    path = write_config(tmp_path, {"model": [1, 2]})
    with pytest.raises(ConfigError, match="must be an object"):
        load_config(path)


def test_config_rejects_bad_json(tmp_path):
    path = tmp_path / "pipeline.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


# --- exit codes ------------------------------------------------------------


def test_missing_config_exits_2(tmp_path):
    assert main(["extract", str(tmp_path / "nope.json")]) == 2


def test_train_without_dataset_exits_2(tmp_path):
    config = write_config(tmp_path)
    assert main(["train", str(config)]) == 2


def test_unknown_rig_kind_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["rig-gen", "tentacle", "--out", str(tmp_path / "rig.json")])
    assert exc.value.code == 2


def test_poisoned_model_exits_3(tmp_path, workspace):
    from deformapprox.deformer import load_bundle, save_bundle

    ws, _ = workspace
    bundle = load_bundle(ws / "model.daxb")
    bundle.group_means[0][:] = np.nan
    bad_dir = tmp_path
    config = write_config(bad_dir)
    (bad_dir / "frames.dataset").write_bytes((ws / "frames.dataset").read_bytes())
    (bad_dir / "rig.json").write_bytes((ws / "rig.json").read_bytes())
    (bad_dir / "rig.obj").write_bytes((ws / "rig.obj").read_bytes())
    save_bundle(bundle, bad_dir / "model.daxb")
    with np.errstate(invalid="ignore"):
        assert main(["eval", str(config)]) == 3


# --- rig-gen ---------------------------------------------------------------


def test_rig_gen_writes_json_and_obj(tmp_path):
    out = tmp_path / "rig.json"
    assert main(["rig-gen", "arm", "--out", str(out)]) == 0
    assert out.exists()
    obj = tmp_path / "rig.obj"
    vertex_lines = [l for l in obj.read_text().splitlines() if l.startswith("v ")]
    assert len(vertex_lines) == 240


def test_rig_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["rig-gen", "face", "--out", str(tmp_path / name / "rig.json"),
                     "--grid", "16", "--bumps", "4"]) == 0
    assert ((tmp_path / "a" / "rig.json").read_bytes()
            == (tmp_path / "b" / "rig.json").read_bytes())
    assert ((tmp_path / "a" / "rig.obj").read_bytes()
            == (tmp_path / "b" / "rig.obj").read_bytes())


# --- extract ---------------------------------------------------------------


def test_extract_row_count(workspace):
    ws, _ = workspace
    lines = (ws / "frames.dataset").read_text().splitlines()
    assert len(lines) == 3 + 12


def test_extract_append_doubles(tmp_path):
    config = write_config(tmp_path)
    assert main(["extract", str(config)]) == 0
    assert main(["extract", str(config), "--append"]) == 0
    lines = (tmp_path / "frames.dataset").read_text().splitlines()
    assert len(lines) == 3 + 24


def test_append_mismatched_rig_exits_2(tmp_path, workspace):
    ws, _ = workspace
    doc = json.loads(json.dumps(SMALL_CONFIG))
    doc["rig"] = {"kind": "face", "grid": 12, "bumps": 4, "path": "rig.json"}
    config = write_config(tmp_path, doc)
    (tmp_path / "frames.dataset").write_bytes((ws / "frames.dataset").read_bytes())
    assert main(["extract", str(config), "--append"]) == 2


# --- train / eval / bench --------------------------------------------------


def test_train_writes_bundle_and_checkpoints(workspace):
    ws, _ = workspace
    assert (ws / "model.daxb").exists()
    assert (ws / "checkpoints" / "diff.daxm").exists()
    assert (ws / "checkpoints" / "sub0.daxm").exists()


def test_train_ensemble_writes_members(tmp_path):
    config = write_config(tmp_path)
    assert main(["extract", str(config)]) == 0
    assert main(["train", str(config), "--ensemble"]) == 0
    ens = tmp_path / "ensemble"
    assert (ens / "ensemble.json").exists()
    assert (ens / "member0.daxb").exists()
    assert (ens / "member1.daxb").exists()
    assert main(["eval", str(config)]) == 2  # model.daxb was not written

    assert main(["train", str(config)]) == 0
    assert main(["eval", str(config), "--uncertainty"]) == 0
    assert (tmp_path / "report" / "uncertainty_heatmap.ply").exists()


def test_eval_writes_reports(workspace):
    ws, config = workspace
    assert main(["eval", str(config)]) == 0
    report = ws / "report"
    for name in ("metrics_train.csv", "metrics_val.csv", "error_heatmap.ply",
                 "error_curve.png", "error_histogram.png", "loss_curve.png"):
        assert (report / name).exists(), name
    header = (report / "metrics_val.csv").read_text().splitlines()[0]
    assert header == "frame,rmse,mean,max,p95"
    ply = (report / "error_heatmap.ply").read_text().splitlines()
    assert ply[0] == "ply" and "element vertex 64" in ply


def test_bench_writes_tables(workspace):
    ws, config = workspace
    assert main(["bench", str(config)]) == 0
    csv = (ws / "bench.csv").read_text().splitlines()
    assert csv[0] == "label,frames,inputs,vertices,mean_ms,median_ms,p95_ms,fps,note"
    labels = [line.split(",")[0] for line in csv[1:]]
    assert labels == ["deformer", "ground-truth rig", "linear + deformer",
                      "sequential x4", "batched C=4"]
    md = (ws / "bench.md").read_text()
    assert "not" in md and "reproducible" in md
    assert (ws / "report" / "timing_bars.png").exists()


def test_bench_batch_override(workspace):
    ws, config = workspace
    assert main(["bench", str(config), "--batch", "2"]) == 0
    labels = [line.split(",")[0]
              for line in (ws / "bench.csv").read_text().splitlines()[1:]]
    assert "batched C=2" in labels


# --- demo ------------------------------------------------------------------


def test_demo_end_to_end(tmp_path):
    out = tmp_path / "demo"
    assert main(["demo", "--out", str(out), "--epochs", "5"]) == 0
    for name in ("pipeline.json", "rig.json", "rig.obj", "frames.dataset",
                 "model.daxb", "summary.json", "bench.csv", "bench.md"):
        assert (out / name).exists(), name
    for name in ("metrics_train.csv", "metrics_val.csv", "error_heatmap.ply",
                 "error_curve.png", "error_histogram.png", "loss_curve.png",
                 "timing_bars.png"):
        assert (out / "report" / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["rig"] == "arm"
    assert summary["frames"] == 240 and summary["vertices"] == 240
    assert summary["train_rmse"] > 0 and summary["validation_rmse"] > 0


def test_demo_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["demo", "--out", str(tmp_path / name), "--epochs", "3"]) == 0
    for name in ("summary.json", "model.daxb", "frames.dataset"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes()), name

import json

import numpy as np
import pytest

from geoguide.cli import main
from geoguide.config import ConfigError, ExperimentConfig, RunDirectory, load_config
from geoguide.grid import LabelGrid, load_vgf, save_vgf

TINY_CONFIG = {
    "phantom": {"shape": [16, 16, 16]},
    "training": {"epochs": 1, "batch_size": 4, "arch": {"widths": [8, 16, 16], "emb_dim": 16, "groups": 4}},
    "schedule": {"steps": 3},
}


# -- configuration ------------------------------------------------------------------


def test_default_config_roundtrip():
    cfg = ExperimentConfig()
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_partial_phantom_keeps_default_components():
    cfg = ExperimentConfig.from_dict(TINY_CONFIG)
    assert cfg.phantom.shape == (16, 16, 16)
    assert cfg.phantom.labels == ExperimentConfig().phantom.labels
    assert cfg.training.arch.widths == (8, 16, 16)


@pytest.mark.parametrize("doc, where", [
    ({"trainig": {}}, "config.trainig"),
    ({"training": {"lr": "fast"}}, "config.training.lr"),
    ({"n_train": 2.5}, "config.n_train"),
    ({"lambdas": [1, 2]}, "config.lambdas"),
    ({"component": "Atrium"}, "Atrium"),
    ({"sampler": {"solver": "heun"}}, "config.sampler"),
    ({"schedule": {"steps": 1}}, "config.schedule"),
])
def test_config_errors_name_the_field(doc, where):
    with pytest.raises(ConfigError, match=where):
        ExperimentConfig.from_dict(doc)


def test_resolved_config_file_loads(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY_CONFIG)
    with RunDirectory(tmp_path / "run", cfg):
        pass
    assert load_config(tmp_path / "run" / "config.json") == cfg


def test_run_directory_lock(tmp_path):
    with RunDirectory(tmp_path / "run"):
        with pytest.raises(ConfigError, match="locked"):
            with RunDirectory(tmp_path / "run"):
                pass
    assert not (tmp_path / "run" / ".lock").exists()


def test_model_key_ignores_sampling_options():
    a = ExperimentConfig()
    b = ExperimentConfig.from_dict({"w": 2.0, "schedule": {"steps": 10}})
    c = ExperimentConfig.from_dict({"n_train": 64})
    assert a.model_key() == b.model_key() != c.model_key()


# -- command line -------------------------------------------------------------------


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    assert main(["gen-data", "--config", str(cfg), "--n", "8", "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "m.ggck")]) == 0
    cons = {
        "groups": [{"labels": ["RV"], "mass": {"on": True}, "centroid": {"on": True}, "shape": {"on": True}}],
        "reference": {"grid": "data/phantom_000000", "multipliers": {"mass": 2.0}},
        "w": 1.0,
    }
    (root / "cons.json").write_text(json.dumps(cons))
    return root


def run(workspace, *argv):
    return main([argv[0], "--config", str(workspace / "cfg.json"), *argv[1:]])


def test_gen_data_manifest(workspace):
    doc = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(doc["samples"]) == 8
    assert set(doc["samples"][0]["mass"]) == {"LV", "Myo", "RV", "Ao"}
    assert (workspace / "data" / "config.json").exists()


def test_sample_is_reproducible(workspace):
    ck = str(workspace / "m.ggck")
    assert run(workspace, "sample", "--ckpt", ck, "--n", "2", "--out", str(workspace / "s1")) == 0
    assert run(workspace, "sample", "--ckpt", ck, "--n", "2", "--out", str(workspace / "s2")) == 0
    h1 = json.loads((workspace / "s1" / "hashes.json").read_text())
    h2 = json.loads((workspace / "s2" / "hashes.json").read_text())
    assert h1 == h2 and len(h1) == 2


def test_guide_with_zero_weight_matches_sample(workspace):
    ck = str(workspace / "m.ggck")
    assert run(workspace, "sample", "--ckpt", ck, "--n", "2", "--out", str(workspace / "plain")) == 0
    assert run(workspace, "guide", "--ckpt", ck, "--n", "2", "--constraints", str(workspace / "cons.json"),
               "--w", "0", "--out", str(workspace / "g0")) == 0
    assert (json.loads((workspace / "plain" / "hashes.json").read_text())
            == json.loads((workspace / "g0" / "hashes.json").read_text()))
    history = json.loads((workspace / "g0" / "guidance_history.json").read_text())
    assert history == []


def test_guide_records_history(workspace):
    assert run(workspace, "guide", "--ckpt", str(workspace / "m.ggck"), "--constraints",
               str(workspace / "cons.json"), "--out", str(workspace / "g1")) == 0
    history = json.loads((workspace / "g1" / "guidance_history.json").read_text())
    assert len(history) == 3 and "size" in history[0]


def test_inpaint_preserves_known_region(workspace):
    known = load_vgf(workspace / "data" / "phantom_000000.json")
    editable = np.zeros(known.shape, dtype=np.uint8)
    editable[4:12, 4:12, 4:12] = 1
    save_vgf(LabelGrid(np.stack([1 - editable, editable]), ("fixed", "editable")), workspace / "mask")
    assert run(workspace, "inpaint", "--ckpt", str(workspace / "m.ggck"), "--known",
               str(workspace / "data" / "phantom_000000.json"), "--mask", str(workspace / "mask.json"),
               "--out", str(workspace / "ip")) == 0
    out = load_vgf(workspace / "ip" / "sample_0000.json")
    keep = editable == 0
    assert np.array_equal(out.data[:, keep], known.data[:, keep])


def test_moments_command(workspace, capsys):
    assert main(["moments", str(workspace / "data" / "phantom_000000.json"), "--select", "LV,RV+Ao"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [c["group"] for c in doc["components"]] == ["LV", "RV+Ao"]


def test_eval_identical_directories(workspace):
    assert main(["eval", "--real", str(workspace / "data"), "--synth", str(workspace / "data"),
                 "--out", str(workspace / "ev")]) == 0
    report = json.loads((workspace / "ev" / "report.json").read_text())
    assert report["fd"] == pytest.approx(0.0, abs=1e-6)
    assert report["precision"] == report["recall"] == 1.0
    assert (workspace / "ev" / "morph.csv").exists()


def test_mesh_command(workspace):
    assert main(["mesh", str(workspace / "data" / "phantom_000000.json"), "--out", str(workspace / "mesh"),
                 "--ellipsoids"]) == 0
    assert len(list((workspace / "mesh").glob("*.obj"))) == 8


def test_missing_checkpoint_exits_2(workspace, capsys):
    assert run(workspace, "sample", "--ckpt", str(workspace / "nope.ggck"), "--out", str(workspace / "x")) == 2


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"training": {"lr": "fast"}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "config.training.lr" in capsys.readouterr().err


def test_bad_constraints_exit_1(workspace, tmp_path):
    bad = tmp_path / "cons.json"
    bad.write_text(json.dumps({"groups": [{"labels": ["Atrium"]}]}))
    assert run(workspace, "guide", "--ckpt", str(workspace / "m.ggck"), "--constraints", str(bad),
               "--out", str(tmp_path / "g")) == 1

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from garmfit.cli import main
from garmfit.sceneio import load_json, load_scene, save_scene
from garmfit.synth import GarmentSpec, generate_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, mini_scene):
    d = tmp_path_factory.mktemp("cli") / "scene"
    save_scene(mini_scene, str(d))
    return str(d)


@pytest.fixture(scope="module")
def two_layer_dir(tmp_path_factory, mini_params):
    import copy
    p = copy.deepcopy(mini_params)
    inner = p.garments[0]
    outer = copy.copy(inner)
    outer.name = "outer"
    outer.clearance = inner.clearance + 0.022
    p.garments = [inner, outer]
    d = tmp_path_factory.mktemp("cli2") / "scene"
    save_scene(generate_scene(p), str(d))
    return str(d)


FAST = ["--mode", "single", "--iterations", "40", "--log-every", "20",
        "--pair-update-every", "20"]


class TestGenScene:
    def test_standard_preset(self, tmp_path):
        out = str(tmp_path / "scene")
        rc = main(["gen-scene", "--out", out, "--resolution", "24"])
        assert rc == 0
        m = load_json(os.path.join(out, "scene.json"))
        assert m["format"].startswith("garmfit-scene/")
        assert m["garments"] == ["garment_00.obj"]
        load_scene(out)    # parses and validates

    def test_sequence_preset(self, tmp_path):
        out = str(tmp_path / "frames")
        rc = main(["gen-scene", "--preset", "sequence", "--frames", "2",
                   "--resolution", "24", "--out", out])
        assert rc == 0
        seq = load_json(os.path.join(out, "sequence.json"))
        assert seq["frames"] == ["frame_00", "frame_01"]
        for fr in seq["frames"]:
            assert os.path.exists(os.path.join(out, fr, "scene.json"))


class TestRefit:
    def test_smoke(self, scene_dir, tmp_path):
        out = str(tmp_path / "out")
        rc = main(["refit", "--scene", scene_dir, "--out", out] + FAST)
        assert rc == 0
        for name in ("refit.obj", "refit.weights", "refit_trace.jsonl",
                     "refit_report.json"):
            assert os.path.exists(os.path.join(out, name))
        rep = load_json(os.path.join(out, "refit_report.json"))
        assert 0.0 <= rep["penetration"]["below_margin"] <= 1.0
        assert rep["fit_style"]["gap_initial"] > 0.0
        assert rep["final"]["iteration"] == 40

    def test_dump_stages(self, scene_dir, tmp_path):
        out = str(tmp_path / "out")
        rc = main(["refit", "--scene", scene_dir, "--out", out,
                   "--dump-stages"] + FAST)
        assert rc == 0
        assert os.path.exists(os.path.join(out, "stage_init.obj"))

    def test_config_file_with_flag_override(self, scene_dir, tmp_path):
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as f:
            json.dump({"mode": "single", "iterations": 33, "log_every": 11,
                       "pair_update_every": 11}, f)
        out = str(tmp_path / "out")
        rc = main(["refit", "--scene", scene_dir, "--out", out,
                   "--config", cfg_path, "--iterations", "44"])
        assert rc == 0
        rep = load_json(os.path.join(out, "refit_report.json"))
        assert rep["final"]["iteration"] == 44    # flag beats file

    def test_missing_scene_is_json_error(self, tmp_path, capsys):
        rc = main(["refit", "--scene", str(tmp_path / "absent"),
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        record = json.loads(capsys.readouterr().err.strip())
        assert record["error"] == "SceneIOError"
        assert "absent" in record["message"]

    def test_bad_garment_index(self, scene_dir, tmp_path, capsys):
        rc = main(["refit", "--scene", scene_dir, "--out",
                   str(tmp_path / "o"), "--garment", "5"] + FAST)
        assert rc == 1
        record = json.loads(capsys.readouterr().err.strip())
        assert "out of range" in record["message"]

    def test_unknown_flag_exits_2(self, scene_dir):
        with pytest.raises(SystemExit) as e:
            main(["refit", "--scene", scene_dir, "--out", "x", "--frobnicate"])
        assert e.value.code == 2


class TestMultilayer:
    def test_two_layers(self, two_layer_dir, tmp_path):
        out = str(tmp_path / "out")
        rc = main(["refit-multilayer", "--scene", two_layer_dir,
                   "--out", out] + FAST)
        assert rc == 0
        rep = load_json(os.path.join(out, "multilayer_report.json"))
        assert len(rep["layers"]) == 2
        assert "connections" in rep["layers"][1]
        assert rep["layers"][1]["connections"]["count"] > 0
        for i in range(2):
            assert os.path.exists(os.path.join(out, f"layer_{i:02d}.obj"))

    def test_single_layer_scene_rejected(self, scene_dir, tmp_path, capsys):
        rc = main(["refit-multilayer", "--scene", scene_dir,
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert ">= 2 garments" in json.loads(
            capsys.readouterr().err.strip())["message"]


class TestSequence:
    def test_frames_from_manifest(self, tmp_path):
        frames = str(tmp_path / "frames")
        assert main(["gen-scene", "--preset", "sequence", "--frames", "2",
                     "--resolution", "24", "--out", frames]) == 0
        out = str(tmp_path / "out")
        rc = main(["refit-sequence", "--scenes", frames, "--out", out] + FAST)
        assert rc == 0
        rep = load_json(os.path.join(out, "sequence_report.json"))
        assert [f["error"] for f in rep["frames"]] == [None, None]
        for i in range(2):
            assert os.path.exists(os.path.join(out, f"frame_{i:02d}.obj"))


class TestBenchConditioning:
    def test_outputs(self, scene_dir, tmp_path):
        out = str(tmp_path / "out")
        rc = main(["bench-conditioning", "--scene", scene_dir, "--out", out,
                   "--iterations", "60", "--log-every", "30",
                   "--pair-update-every", "30"])
        assert rc == 0
        stats = load_json(os.path.join(out, "conditioning.json"))
        for key in ("bone_local", "global_offsets", "iqr_ratio_smaller",
                    "bone_local_by_dominant_bone"):
            assert key in stats
        assert stats["iterations"] == 60
        assert os.path.exists(os.path.join(out, "trace_bone_local.jsonl"))
        assert os.path.exists(os.path.join(out, "trace_global.jsonl"))


class TestVerify:
    def test_passes_on_generated_scene(self, scene_dir, capsys):
        rc = main(["verify", "--scene", scene_dir])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert all(l.startswith("PASS") for l in lines[:-1])
        assert "invariant checks passed" in lines[-1]


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "garmfit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen-scene", "refit", "refit-multilayer", "refit-sequence",
                "bench-conditioning", "verify"):
        assert sub in proc.stdout

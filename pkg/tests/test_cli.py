"""CLI: subcommand flows, reproducibility, exit codes."""

import json

import numpy as np
import pytest

from voxcomplete import cli
from voxcomplete.fileio import load_cloud, save_cloud
from voxcomplete.grid import load_grid, voxelize


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def tiny_cfg_file(tmp_path):
    return write_json(
        tmp_path / "cfg.json",
        {
            "train": {"max_steps": 4, "batch_size": 2, "lambda_adv": 0.0, "seed": 3,
                      "val_every": 0, "ckpt_every": 0, "decay_every": 1000},
            "net": {"encoder_filters": [[3, 3]] * 7, "decoder_filters": [[3, 3]] * 6},
            "voxel_size": 0.2,
            "palette": "five_class",
            "val_count": 1,
        },
    )


@pytest.fixture
def scene_spec_file(tmp_path):
    return write_json(
        tmp_path / "spec.json",
        {"extent": 6.0, "vehicles": 1, "pedestrians": 1, "sidewalks": 0, "walls": 1, "density": 80.0},
    )


def run(args):
    return cli.main(args)


class TestSceneCommands:
    def test_gen_scenes_deterministic(self, tmp_path, scene_spec_file):
        for d in ("a", "b"):
            assert run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / d),
                        "--count", "2", "--seed", "5"]) == 0
        for i in range(2):
            fa = (tmp_path / "a" / f"scene_{i:04d}.pcxl").read_bytes()
            fb = (tmp_path / "b" / f"scene_{i:04d}.pcxl").read_bytes()
            assert fa == fb

    def test_gen_scenes_jobs_match_serial(self, tmp_path, scene_spec_file):
        assert run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / "s1"),
                    "--count", "3", "--seed", "2"]) == 0
        assert run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / "s2"),
                    "--count", "3", "--seed", "2", "--jobs", "3"]) == 0
        for i in range(3):
            assert (tmp_path / "s1" / f"scene_{i:04d}.pcxl").read_bytes() == (
                tmp_path / "s2" / f"scene_{i:04d}.pcxl"
            ).read_bytes()

    def test_seed_env_override(self, tmp_path, scene_spec_file, monkeypatch):
        run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / "x"), "--count", "1", "--seed", "1"])
        monkeypatch.setenv(cli.SEED_ENV, "1")
        run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / "y"), "--count", "1", "--seed", "999"])
        assert (tmp_path / "x" / "scene_0000.pcxl").read_bytes() == (
            tmp_path / "y" / "scene_0000.pcxl"
        ).read_bytes()


class TestSampling:
    def test_make_pattern_and_sample_self_pattern(self, tmp_path):
        patt = tmp_path / "p.patt"
        assert run(["make-pattern", "--rings", "8", "--phi-steps", "60",
                    "--theta-min", "60", "--theta-max", "120", "--out", str(patt)]) == 0
        rng = np.random.default_rng(0)
        pts = rng.uniform(1, 6, size=(400, 3))
        scene = tmp_path / "scene.pcxl"
        save_cloud(scene, pts)
        frame = tmp_path / "frame.pcxl"
        assert run(["sample", "--scene", str(scene), "--pattern", str(patt),
                    "--sensor", "0,0,0", "--out", str(frame)]) == 0
        fpts, _ = load_cloud(frame)
        assert 0 < len(fpts) <= 8 * 60
        # self-pattern: extract pattern from the frame, resample -> zero error
        patt2 = tmp_path / "self.patt"
        assert run(["make-pattern", "--from-frame", str(frame), "--sensor", "0,0,0",
                    "--out", str(patt2)]) == 0
        frame2 = tmp_path / "frame2.pcxl"
        assert run(["sample", "--scene", str(frame), "--pattern", str(patt2),
                    "--sensor", "0,0,0", "--out", str(frame2)]) == 0
        f2, _ = load_cloud(frame2)
        assert {tuple(p) for p in f2} == {tuple(p) for p in fpts}

    def test_sample_augment_seeded(self, tmp_path):
        patt = tmp_path / "p.patt"
        run(["make-pattern", "--rings", "16", "--phi-steps", "90", "--out", str(patt)])
        rng = np.random.default_rng(1)
        scene = tmp_path / "scene.pcxl"
        save_cloud(scene, rng.uniform(1, 8, size=(2000, 3)))
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.pcxl"
            assert run(["sample", "--scene", str(scene), "--pattern", str(patt),
                        "--sensor", "0,0,0", "--out", str(out), "--augment", "--seed", "9"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


@pytest.fixture
def pairs_dir(tmp_path, scene_spec_file):
    run(["gen-scenes", "--spec", scene_spec_file, "--out", str(tmp_path / "scenes"),
         "--count", "4", "--seed", "11"])
    patt = tmp_path / "p.patt"
    run(["make-pattern", "--rings", "12", "--phi-steps", "120", "--theta-min", "60",
         "--theta-max", "130", "--out", str(patt)])
    pairs = tmp_path / "pairs"
    assert run(["make-pairs", "--scenes", str(tmp_path / "scenes"), "--pattern", str(patt),
                "--out", str(pairs), "--seed", "4"]) == 0
    return pairs


class TestTrainingFlow:
    def test_full_tiny_pipeline(self, tmp_path, tiny_cfg_file, pairs_dir):
        ck = tmp_path / "ck"
        assert run(["train-gen", "--config", tiny_cfg_file, "--data", str(pairs_dir),
                    "--out", str(ck)]) == 0
        gen_ckpt = ck / "gen_final.ckpt"
        assert gen_ckpt.exists()
        assert run(["train-refine", "--config", tiny_cfg_file, "--data", str(pairs_dir),
                    "--gen", str(gen_ckpt), "--out", str(ck)]) == 0
        refine_ckpt = ck / "refine_final.ckpt"
        assert refine_ckpt.exists()

        with open(pairs_dir / "manifest.json") as f:
            manifest = json.load(f)
        frame = pairs_dir / manifest["pairs"][0]["frame"]
        net_cfg_file = tmp_path / "net.json"
        net_cfg_file.write_text(json.dumps({"encoder_filters": [[3, 3]] * 7,
                                            "decoder_filters": [[3, 3]] * 6}))
        grid_path = tmp_path / "out.svgr"
        assert run(["complete", "--in", str(frame), "--gen", str(gen_ckpt),
                    "--refine", str(refine_ckpt), "--net", str(net_cfg_file),
                    "--out", str(grid_path)]) == 0
        report = tmp_path / "rep.json"
        assert run(["eval-completion", "--pred", str(grid_path),
                    "--gt", str(pairs_dir / manifest["pairs"][0]["scene"]),
                    "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert 0.0 <= rep["iou"] <= 1.0

    def test_eval_completion_perfect(self, tmp_path):
        rng = np.random.default_rng(2)
        scene = tmp_path / "scene.pcxl"
        save_cloud(scene, rng.uniform(0, 3, size=(500, 3)))
        pts, _ = load_cloud(scene)  # f32-quantized, as eval will see them
        grid, _ = voxelize(pts, 0.2, pts.min(axis=0))
        from voxcomplete.grid import save_grid

        pred = tmp_path / "pred.svgr"
        save_grid(pred, grid)
        report = tmp_path / "rep.json"
        assert run(["eval-completion", "--pred", str(pred), "--gt", str(scene),
                    "--report", str(report)]) == 0
        rep = json.loads(report.read_text())
        assert rep["iou"] == 1.0 and rep["cd"] == 0.0


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["gen-scenes"])  # missing --out
        assert exc.value.code == 2

    def test_missing_file_is_3(self, tmp_path):
        assert cli.main(["eval-completion", "--pred", str(tmp_path / "nope.svgr"),
                         "--gt", str(tmp_path / "nope.pcxl"),
                         "--report", str(tmp_path / "r.json")]) == 3

    def test_bad_format_is_3(self, tmp_path):
        bad = tmp_path / "bad.svgr"
        bad.write_bytes(b"JUNKJUNKJUNK" * 10)
        assert cli.main(["eval-completion", "--pred", str(bad), "--gt", str(bad),
                         "--report", str(tmp_path / "r.json")]) == 3

    def test_nan_abort_is_4(self, tmp_path, tiny_cfg_file, pairs_dir, monkeypatch):
        from voxcomplete.errors import TrainingDiverged

        def explode(*a, **k):
            raise TrainingDiverged(0, ["s0"])

        monkeypatch.setattr(cli, "train_generation", explode)
        assert cli.main(["train-gen", "--config", tiny_cfg_file,
                         "--data", str(pairs_dir), "--out", str(tmp_path / "ck")]) == 4

    def test_config_error_is_2(self, tmp_path, pairs_dir):
        bad_cfg = tmp_path / "bad.json"
        bad_cfg.write_text(json.dumps({"train": {"balance": "bogus"}}))
        assert cli.main(["train-gen", "--config", str(bad_cfg),
                        "--data", str(pairs_dir), "--out", str(tmp_path / "ck")]) == 2

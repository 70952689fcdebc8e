from pathlib import Path

import numpy as np
import pytest

from eaformer.main import build_parser, main
from eaformer.utils.netpbm import read_netpbm


@pytest.fixture
def smoke_config(tmp_path, configs_dir) -> Path:
    text = (configs_dir / "smoke.env").read_text(encoding="utf-8")
    path = tmp_path / "smoke.env"
    path.write_text(text + f"output_dir={tmp_path / 'run'}\n", encoding="utf-8")
    return path


# === fields ===
def test_fields_writes_one_heatmap_per_camera(tmp_path):
    assert main(["fields", "--query", "12,8", "--scale", "1/4", "--out", str(tmp_path)]) == 0
    index = (tmp_path / "index.txt").read_text(encoding="utf-8").splitlines()
    assert index[0].startswith("# file")
    assert [line.split("\t")[0] for line in index[1:]] == ["field_back_q12_8.pgm", "field_front_q12_8.pgm"]
    img = read_netpbm(tmp_path / "field_front_q12_8.pgm")
    assert img.shape == (16, 32)
    assert img.max() > 0
    assert read_netpbm(tmp_path / "field_back_q12_8.pgm").max() == 0


def test_fields_output_is_reproducible(tmp_path):
    args = ["fields", "--query", "3,7", "--out"]
    main(args + [str(tmp_path / "a")])
    main(args + [str(tmp_path / "b")])
    for name in ("field_back_q3_7.pgm", "field_front_q3_7.pgm", "index.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_larger_lambda_gives_a_narrower_field(tmp_path):
    main(["fields", "--query", "12,8", "--lambda", "1", "--out", str(tmp_path / "l1")])
    main(["fields", "--query", "12,8", "--lambda", "4", "--out", str(tmp_path / "l4")])
    wide = read_netpbm(tmp_path / "l1" / "field_front_q12_8.pgm")
    narrow = read_netpbm(tmp_path / "l4" / "field_front_q12_8.pgm")
    assert np.count_nonzero(narrow > 127) <= np.count_nonzero(wide > 127)


def test_fields_with_a_rig_file(tmp_path, rigs_dir):
    assert main(["fields", "--rig", str(rigs_dir / "six_camera.json"), "--grid", "8x8@1",
                 "--scale", "1/8", "--query", "6,4", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.pgm"))) == 6


def test_invisible_query_warns(tmp_path, rigs_dir, capsys):
    assert main(["fields", "--rig", str(rigs_dir / "canonical.json"), "--scale", "1/4",
                 "--query", "0,8", "--out", str(tmp_path)]) == 0
    assert "not visible" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["fields", "--query", "16,0", "--out", "x"],
    ["fields", "--query", "1;2", "--out", "x"],
    ["fields", "--query", "1,2"],
    ["fields", "--query", "1,2", "--scale", "0", "--out", "x"],
    ["fields", "--query", "1,2", "--lambda", "-1", "--out", "x"],
    ["verify", "--grid", "16by16"],
    ["verify", "--samples", "-3"],
    ["frobnicate"],
])
def test_usage_errors_exit_with_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


# === verify ===
@pytest.mark.parametrize("rig", ["canonical.json", "two_camera.json", "six_camera.json"])
def test_verify_passes_on_fixture_rigs(rigs_dir, rig, capsys):
    assert main(["verify", "--rig", str(rigs_dir / rig), "--samples", "20"]) == 0
    assert "all checks within tolerance" in capsys.readouterr().out


def test_verify_report_is_byte_identical_across_runs(rigs_dir, capsys):
    argv = ["verify", "--rig", str(rigs_dir / "six_camera.json"), "--samples", "20", "--seed", "0"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out.encode("utf-8") == first.encode("utf-8")


def test_verify_fails_on_a_corrupt_rig(rigs_dir, capsys):
    assert main(["verify", "--rig", str(rigs_dir / "corrupt_rotation.json")]) == 1
    assert "RigValidationError" in capsys.readouterr().out


def test_verify_with_zero_samples():
    assert main(["verify", "--samples", "0"]) == 0


# === train / eval ===
def test_train_then_eval(tmp_path, smoke_config, capsys):
    assert main(["train", "--config", str(smoke_config), "--quiet"]) == 0
    run = tmp_path / "run"
    lines = (run / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,loss,iou_vehicle,iou_drivable"
    assert (run / "model.ckpt").is_file()
    capsys.readouterr()

    assert main(["eval", "--config", str(smoke_config), "--checkpoint", str(run / "model.ckpt")]) == 0
    out = capsys.readouterr().out
    reported = next(line.split()[-1] for line in out.splitlines() if "iou_vehicle" in line)
    assert reported == lines[-1].split(",")[2]

    assert main(["eval", "--config", str(smoke_config), "--checkpoint", str(run / "model.ckpt"),
                 "--perturb-rig", "yaw=5,tx=0.1"]) == 0
    assert "fields recomputed" in capsys.readouterr().out


def test_eval_reports_bad_checkpoint(tmp_path, smoke_config):
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["eval", "--config", str(smoke_config), "--checkpoint", str(tmp_path / "junk.ckpt")]) == 1


def test_train_reports_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.env"
    cfg.write_text("lamda=2\n", encoding="utf-8")
    assert main(["train", "--config", str(cfg)]) == 1


# === render ===
def test_render_exports_scene_images_and_masks(tmp_path, smoke_config):
    assert main(["render", "--config", str(smoke_config), "--out", str(tmp_path / "r")]) == 0
    names = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert names == ["scene_3.json", "scene_3_back.ppm", "scene_3_front.ppm",
                     "scene_3_gt_drivable.pgm", "scene_3_gt_vehicle.pgm"]
    assert read_netpbm(tmp_path / "r" / "scene_3_front.ppm").shape == (32, 64, 3)
    assert read_netpbm(tmp_path / "r" / "scene_3_gt_vehicle.pgm").shape == (4, 4)


def test_parser_defaults():
    args = build_parser().parse_args(["verify"])
    assert args.samples == 100 and args.seed == 0 and args.grid.spec == "16x16@0.5"

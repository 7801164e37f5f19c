import logging
import os

import pytest

from conftest import TINY_CONFIG
from splatsdf.evalkit import read_report
from splatsdf.scripts.splatsdf import COMMANDS, build_parser, main
from splatsdf.utils.other import setup_logging, to_command_name


def test_command_names():
    tests = [
        ("Gen", "gen"),
        ("TrainSdf", "train-sdf"),
        ("InitSplats", "init-splats"),
        ("Pipeline", "pipeline"),
    ]
    for class_name, expected in tests:
        assert to_command_name(class_name) == expected
    assert [c.get_name() for c in COMMANDS] == [
        "gen", "train-sdf", "init-splats", "train", "render", "mesh", "eval", "ablate", "pipeline",
    ]


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["mesh", "--checkpoint", "a.ckpt", "--out", "o", "--set", "sdf.mc_cell=0.1"])
    assert args.command == "mesh" and args.set == ["sdf.mc_cell=0.1"]


def test_setup_logging_replaces_its_handlers(tmp_path):
    root = logging.getLogger()

    def installed():
        return [h for h in root.handlers if getattr(h, "_splatsdf", False)]

    setup_logging(logfile=True, filedir=str(tmp_path / "logs"), filename="run.log")
    setup_logging(logfile=True, filedir=str(tmp_path / "logs"), filename="run.log")
    try:
        assert len(installed()) == 2
        assert logging.getLogger("PIL").level == logging.WARNING
        with open(tmp_path / "logs" / "run.log") as f:
            assert 20 * "#" in f.read()
        with pytest.raises(ValueError):
            setup_logging(console=False, logfile=True)
    finally:
        setup_logging(console=False)
    assert installed() == []


def test_gen_writes_dataset(tmp_path):
    out = str(tmp_path / "data")
    code = main([
        "gen", "--scene", "sphere", "--frames", "3", "--width", "16", "--height", "12",
        "--out", out, "--seed", "4", "--test-mode",
    ])
    assert code == 0
    for name in ("intrinsics.txt", "poses.txt", "images/000002.png", "lidar/origins.txt", "gt/gt_mesh.ply"):
        assert os.path.isfile(os.path.join(out, name)), name
    with open(os.path.join(out, "intrinsics.txt")) as f:
        assert f.read().split()[4:] == ["16", "12"]


def test_config_errors_exit_with_2(tiny_dataset_dir, tmp_path):
    out = str(tmp_path / "out")
    tests = [
        ["train-sdf", "--data", tiny_dataset_dir, "--out", out, "--set", "nokey=1"],
        ["train-sdf", "--data", tiny_dataset_dir, "--out", out, "--config", "no_such_preset"],
        ["train", "--data", tiny_dataset_dir, "--out", out, "--set", "loss.regularizer=shape"],
        ["eval", "--out", out],
        ["render", "--checkpoint", "x.ckpt", "--out", out],
    ]
    for argv in tests:
        assert main(argv) == 2, argv


def test_stage_failures_exit_with_1(tmp_path):
    out = str(tmp_path / "out")
    assert main(["train-sdf", "--data", str(tmp_path / "missing"), "--out", out]) == 1
    assert main(["mesh", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", out]) == 1


def test_eval_identical_meshes(tiny_dataset_dir, tmp_path):
    out = str(tmp_path / "eval")
    gt = os.path.join(tiny_dataset_dir, "gt", "gt_mesh.ply")
    assert main(["eval", "--mesh", gt, "--gt-mesh", gt, "--out", out, "--set", "eval_points=500"]) == 0
    report = read_report(out)
    assert report["chamfer_l1"] == 0.0
    assert report["f_score"] == 100.0


def test_train_sdf_then_mesh(tiny_dataset_dir, tmp_path):
    out = str(tmp_path / "sdf")
    assert main(["train-sdf", "--data", tiny_dataset_dir, "--config", TINY_CONFIG, "--out", out, "--test-mode"]) == 0
    assert os.path.isfile(os.path.join(out, "sdf.ckpt"))
    with open(os.path.join(out, "sdf_metrics.csv")) as f:
        assert f.readline().strip() == "iter,sdf,eikonal,total,lr"

    mesh_out = str(tmp_path / "mesh")
    argv = ["mesh", "--checkpoint", os.path.join(out, "sdf.ckpt"), "--config", TINY_CONFIG, "--out", mesh_out]
    assert main(argv) == 0


@pytest.mark.slow
def test_pipeline_command(tiny_dataset_dir, tmp_path):
    out = str(tmp_path / "run")
    code = main(["pipeline", "--data", tiny_dataset_dir, "--config", TINY_CONFIG, "--out", out, "--test-mode"])
    assert code == 0
    report = read_report(out)
    assert report["splats"] > 0
    assert "psnr" in report and "zero_set_residual" in report

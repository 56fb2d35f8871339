#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the pipeline steps and the command-line interface.

A short synth + train run on a small capsule is shared by the module.

Usage:
    Run directly: python -m splat_avatar.scripts.test_run_pipeline
"""

import math
import sys

import pandas as pd
import pytest

from splat_avatar.main import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from splat_avatar.scripts import run_pipeline
from splat_avatar.scripts.checkpoint import load_checkpoint
from splat_avatar.scripts.conftest import small_config
from splat_avatar.scripts.run_pipeline import (
    LOSS_COLUMNS,
    run_animate,
    run_eval,
    run_export,
    run_render,
    run_synth,
    run_train,
    smoothed_epoch_losses,
)
from splat_avatar.scripts.templates import load_template
from splat_avatar.scripts.utils import DivergenceError, read_json, write_json

QUICK = {"epochs": 2, "stage1_end": 1, "stage2_end": 2, "synth_resolution": 24}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = small_config(**QUICK)
    synth = run_synth(root / "data", config)
    trained = run_train(synth.manifest_path, root / "train", config)
    return root, config, synth, trained


def test_training_outputs(pipeline_run):
    root, config, synth, trained = pipeline_run
    train_frames = len(synth.manifest.split("train"))

    curve = pd.read_csv(trained.loss_csv)
    assert list(curve.columns) == LOSS_COLUMNS
    assert len(curve) == config["epochs"] * train_frames
    assert sorted(curve["epoch"].unique()) == [1, 2]
    assert curve["total"].map(math.isfinite).all()

    final = load_checkpoint(trained.final_checkpoint)
    assert final.epoch == 2
    assert (root / "train" / "latest.ckpt").read_bytes() == trained.final_checkpoint.read_bytes()
    assert not (root / "train" / "last_good.ckpt").exists()


def test_smoothed_epoch_losses():
    rows = [
        {"epoch": 1, "iter": 0, "l_rgb": 0, "l_normal": 0, "l_nc": 0, "total": 3.0},
        {"epoch": 1, "iter": 1, "l_rgb": 0, "l_normal": 0, "l_nc": 0, "total": 1.0},
        {"epoch": 2, "iter": 0, "l_rgb": 0, "l_normal": 0, "l_nc": 0, "total": 4.0},
        {"epoch": 3, "iter": 0, "l_rgb": 0, "l_normal": 0, "l_nc": 0, "total": 0.0},
    ]
    assert smoothed_epoch_losses(rows) == [2.0, 3.0, 2.0]


def test_render_is_bit_identical_and_matches_animate(pipeline_run, tmp_path):
    _, _, synth, trained = pipeline_run
    entry = synth.manifest.frames[0]

    first = run_render(trained.final_checkpoint, entry.camera, entry.pose, tmp_path / "a")
    second = run_render(trained.final_checkpoint, entry.camera, entry.pose, tmp_path / "b")
    for one, two in zip(first, second):
        assert one.read_bytes() == two.read_bytes()

    poses = write_json(tmp_path / "poses.json", [read_json(entry.pose)])
    animated = run_animate(trained.final_checkpoint, entry.camera, poses, tmp_path / "anim")
    assert len(animated) == 1
    assert animated[0][0].read_bytes() == first[0].read_bytes()
    assert animated[0][1].read_bytes() == first[1].read_bytes()


def test_export_and_eval(pipeline_run, tmp_path):
    _, config, synth, trained = pipeline_run
    exported = load_template(run_export(trained.final_checkpoint, tmp_path / "avatar.obj"))
    assert exported.mesh.face_count == synth.template.mesh.face_count

    report = run_eval(tmp_path / "metrics.json", trained.final_checkpoint, synth.manifest_path, config=config)
    assert math.isfinite(report.psnr) and 0.0 < report.ssim <= 1.0
    assert report.v2v_mm > 0.0 and 0.0 < report.nc <= 1.0
    document = read_json(tmp_path / "metrics.json")
    assert document["image_split"] == "test"
    assert document["baseline_v2v_mm"] == synth.baseline_v2v_mm
    assert document["lpips"] is None


def test_eval_of_a_mesh_pair_reproduces_the_baseline(pipeline_run, tmp_path):
    _, config, synth, _ = pipeline_run
    data = synth.manifest_path.parent
    report = run_eval(tmp_path / "pair.json", mesh_paths=[data / "template.json", data / "ground_truth.json"],
                      config=config)
    assert report.v2v_mm == synth.baseline_v2v_mm
    assert report.psnr is None


def test_repeated_quick_run_is_byte_identical(pipeline_run, tmp_path):
    _, config, synth, trained = pipeline_run
    resynth = run_synth(tmp_path / "data", config)
    for one, two in zip(synth.manifest.frames, resynth.manifest.frames):
        assert one.color.read_bytes() == two.color.read_bytes()
        assert one.normal.read_bytes() == two.normal.read_bytes()

    again = run_train(resynth.manifest_path, tmp_path / "train", config)
    assert again.final_checkpoint.read_bytes() == trained.final_checkpoint.read_bytes()
    assert again.loss_csv.read_bytes() == trained.loss_csv.read_bytes()


def test_divergence_saves_last_good_state(pipeline_run, tmp_path, monkeypatch):
    _, config, synth, _ = pipeline_run

    def diverge(*args, **kwargs):
        raise DivergenceError("loss diverged", group="color")

    monkeypatch.setattr(run_pipeline, "train_epoch", diverge)
    with pytest.raises(DivergenceError):
        run_train(synth.manifest_path, tmp_path / "train", config)
    assert load_checkpoint(tmp_path / "train" / "last_good.ckpt").epoch == 0

    config_file = write_config(tmp_path / "quick.cfg", config)
    code = main(["--config", str(config_file), "train", "--manifest", str(synth.manifest_path),
                 "--out", str(tmp_path / "cli")])
    assert code == EXIT_DIVERGED


def write_config(path, config):
    lines = [f"{key} = {config[key]}" for key in ("hash_levels", "hash_log2_table_size", "hash_features",
                                                  "head_hidden", "synth_segments", "synth_cap_rings",
                                                  "synth_body_rings", "synth_holdout_views", "v2v_samples")]
    path.write_text("[run]\n" + "\n".join(lines) + "\n")
    return path


def test_cli_exit_codes(pipeline_run, tmp_path):
    _, config, synth, _ = pipeline_run
    with pytest.raises(SystemExit) as info:
        main(["--no-such-flag"])
    assert info.value.code == EXIT_USAGE

    assert main(["eval", "--out", str(tmp_path / "m.json")]) == EXIT_USAGE
    assert main(["--config", str(tmp_path / "absent.cfg"), "synth", "--out", str(tmp_path / "s")]) == EXIT_USAGE
    assert main(["train", "--manifest", str(tmp_path / "absent.json"), "--out", str(tmp_path / "t")]) == EXIT_DATA
    occupied = tmp_path / "occupied"
    occupied.write_text("not a directory")
    assert main(["synth", "--out", str(occupied), "--views", "1", "--resolution", "8"]) == EXIT_USAGE

    config_file = write_config(tmp_path / "quick.cfg", config)
    code = main(["--config", str(config_file), "synth", "--out", str(tmp_path / "synth"), "--views", "2",
                 "--resolution", "16"])
    assert code == EXIT_OK
    manifest = read_json(tmp_path / "synth" / "manifest.json")
    assert len(manifest["frames"]) == 2 + config["synth_holdout_views"]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

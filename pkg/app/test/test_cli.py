"""
Tests for the command-line surface, from synthetic corpus to explanations.

The end-to-end accuracy runs on the full synthetic corpus are marked slow;
run them with `pytest -m slow`.
"""

import csv
import os

import numpy as np
import pytest

from app.cli.commands import (
    PreprocessLogRow,
    cmd_eval,
    cmd_explain,
    cmd_preprocess,
    cmd_synth,
    cmd_train,
    main,
    overlay,
    read_preprocess_log,
    stratified_split,
)
from app.config import RunConfig
from app.dataset.manifest import QualityLabel, read_manifest
from app.fov.detector import preprocess_detailed
from app.nn.checkpoint import load_checkpoint
from app.raster.image import decode_image

SMALL_CONFIG = "widths=4,8\nresolution=16\ndetect_resolution=64\nepochs=1\nseed=3\n"


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = f.read()
    return out


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Five images per grade at 96 px, preprocessed to 16 px stacks."""
    root = tmp_path_factory.mktemp("corpus")
    config_path = root / "small.cfg"
    config_path.write_text(SMALL_CONFIG)
    synth_dir, stacks_dir = root / "synth", root / "stacks"
    assert main(["synth", "--n", "5", "--size", "96", "--out", str(synth_dir), "--config", str(config_path)]) == 0
    assert main([
        "preprocess", "--in", str(synth_dir / "images"), "--out", str(stacks_dir), "--config", str(config_path),
    ]) == 0
    return {
        "root": root,
        "config": str(config_path),
        "manifest": str(synth_dir / "manifest.csv"),
        "images": synth_dir / "images",
        "stacks": stacks_dir,
    }


def test_stratified_split_proportions():
    labels = [0] * 100 + [1] * 100 + [2] * 100
    first, second = stratified_split(labels, 0.8, 7)
    assert len(first) == 240 and len(second) == 60
    assert sorted(first + second) == list(range(300))
    for label in range(3):
        assert sum(labels[i] == label for i in second) == 20
    assert stratified_split(labels, 0.8, 7) == (first, second)


def test_synth_writes_corpus(corpus):
    records = read_manifest(corpus["manifest"])
    assert len(records) == 15
    assert sum(r.split == "test" for r in records) == 3
    assert {r.label for r in records if r.split == "test"} == set(QualityLabel)
    assert len(os.listdir(corpus["images"])) == 15
    with open(os.path.join(os.path.dirname(corpus["manifest"]), "ground_truth.jsonl"), encoding="utf-8") as f:
        assert len(f.read().splitlines()) == 15


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    config = RunConfig(seed=5)
    cmd_synth(2, str(a), config, size=64)
    cmd_synth(2, str(b), config, size=64)
    assert _tree_bytes(a) == _tree_bytes(b)
    assert len(_tree_bytes(a)) == 6 + 6 + 2


def test_synth_needs_images():
    assert main(["synth", "--n", "0", "--out", "unused"]) == 1


def test_preprocess_writes_three_stacks_per_image(corpus):
    names = os.listdir(corpus["stacks"])
    assert sum(n.endswith(".rstk") for n in names) == 45
    for suffix in ("ls", "ts", "lsts"):
        assert f"good_0000.{suffix}.rstk" in names
    log = read_preprocess_log(str(corpus["stacks"] / "preprocess_log.csv"))
    assert len(log) == 15
    assert all(row.status == "ok" for row in log.values())
    assert all(row.m_ts > 0 and row.r > 0 for row in log.values())


def test_preprocess_reports_bad_images(tmp_path):
    in_dir, out_dir = tmp_path / "in", tmp_path / "out"
    in_dir.mkdir()
    (in_dir / "black.ppm").write_bytes(b"P6\n64 64\n255\n" + bytes(64 * 64 * 3))
    (in_dir / "odd.ppm").write_bytes(b"P9\n1 1\n255\n\x00")
    (in_dir / "notes.txt").write_text("ignored")
    config = RunConfig(resolution=16, detect_resolution=64)
    assert cmd_preprocess(str(in_dir), str(out_dir), config) == 1
    log = read_preprocess_log(str(out_dir / "preprocess_log.csv"))
    assert log["black.ppm"].status == "no_fov"
    assert log["odd.ppm"].status == "unsupported"
    assert "notes.txt" not in log
    assert not [n for n in os.listdir(out_dir) if n.endswith(".rstk")]


def test_full_frame_fallback_keeps_going(tmp_path):
    in_dir, out_dir = tmp_path / "in", tmp_path / "out"
    in_dir.mkdir()
    (in_dir / "black.ppm").write_bytes(b"P6\n64 64\n255\n" + bytes(64 * 64 * 3))
    config = RunConfig(resolution=16, detect_resolution=64, fov_fallback="full-frame")
    assert cmd_preprocess(str(in_dir), str(out_dir), config) == 0
    assert read_preprocess_log(str(out_dir / "preprocess_log.csv"))["black.ppm"].status == "full_frame"


def test_preprocess_rerun_is_byte_identical(corpus, tmp_path):
    config = RunConfig(resolution=16, detect_resolution=64)
    cmd_preprocess(str(corpus["images"]), str(tmp_path), config)
    assert _tree_bytes(tmp_path) == _tree_bytes(corpus["stacks"])


def test_log_row_survives_csv(tmp_path):
    row = PreprocessLogRow(image="a.ppm", status="ok", cx=10.25, cy=11.5, r=30.0, m_ls=4, m_ts=17)
    path = tmp_path / "log.csv"
    path.write_text("image,status,cx,cy,r,m_ls,m_ts,error\n" + ",".join(row.csv_row()) + "\n")
    assert read_preprocess_log(str(path))["a.ppm"] == row


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus["root"] / "model"
    assert main([
        "train", "--manifest", corpus["manifest"], "--stacks", str(corpus["stacks"]),
        "--out", str(out), "--config", corpus["config"],
    ]) == 0
    return out


def test_train_writes_checkpoint_and_curve(trained):
    with open(trained / "model.siqa", "rb") as f:
        assert f.read(4) == b"SIQA"
    rows = _rows(trained / "loss_curve.csv")
    assert rows[0] == ["epoch", "train_loss", "val_acc", "lr"]
    assert len(rows) == 2
    checkpoint = load_checkpoint(str(trained / "model.siqa"))
    assert checkpoint.architecture == "dual"
    assert checkpoint.params.widths == (4, 8)


def test_train_rerun_is_byte_identical(corpus, trained, tmp_path):
    assert main([
        "train", "--manifest", corpus["manifest"], "--stacks", str(corpus["stacks"]),
        "--out", str(tmp_path), "--config", corpus["config"],
    ]) == 0
    assert (tmp_path / "model.siqa").read_bytes() == (trained / "model.siqa").read_bytes()


def test_eval_reports_test_split(corpus, trained, tmp_path):
    assert main([
        "eval", "--checkpoint", str(trained / "model.siqa"), "--manifest", corpus["manifest"],
        "--stacks", str(corpus["stacks"]), "--out", str(tmp_path),
    ]) == 0
    rows = _rows(tmp_path / "confusion.csv")
    assert [sum(int(v) for v in row[1:]) for row in rows[1:]] == [1, 1, 1]
    assert len(_rows(tmp_path / "predictions.csv")) == 4
    assert (tmp_path / "metrics.csv").exists()
    assert (tmp_path / "mts_cdf.csv").exists()


def test_eval_of_training_split_matches_training_accuracy(corpus, trained, tmp_path):
    cmd_eval(str(trained / "model.siqa"), corpus["manifest"], str(corpus["stacks"]), str(tmp_path), split="train")
    rows = dict((r[0], r[1]) for r in _rows(tmp_path / "metrics.csv")[1:])
    curve = _rows(trained / "loss_curve.csv")
    # validation falls back to the training set when the val split is empty
    assert float(rows["acc"]) == pytest.approx(float(curve[1][2]))


def test_explain_dual_gives_two_maps(corpus, trained, tmp_path):
    stack = str(corpus["stacks"] / "good_0000.lsts.rstk")
    checkpoint = str(trained / "model.siqa")
    assert main(["explain", "--checkpoint", checkpoint, "--image", stack, "--out", str(tmp_path / "a")]) == 0
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == [
        "good_0000.cam_ls.overlay.ppm", "good_0000.cam_ls.pgm",
        "good_0000.cam_ts.overlay.ppm", "good_0000.cam_ts.pgm",
    ]
    for name in ("good_0000.cam_ls.pgm", "good_0000.cam_ts.pgm"):
        heatmap = decode_image((tmp_path / "a" / name).read_bytes())
        assert (heatmap.width, heatmap.height, heatmap.channels) == (16, 16, 1)

    main(["explain", "--checkpoint", checkpoint, "--image", stack, "--out", str(tmp_path / "b")])
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_explain_from_raw_image(corpus, trained, tmp_path):
    config = RunConfig(widths=(4, 8), resolution=16, detect_resolution=64)
    image = str(corpus["images"] / "reject_0001.ppm")
    assert cmd_explain(str(trained / "model.siqa"), image, str(tmp_path), config, target_class=2) == 0
    assert "reject_0001.cam_ts.pgm" in os.listdir(tmp_path)


def test_stats_prints_thresholds(corpus, tmp_path, capsys):
    assert main([
        "stats", "--manifest", corpus["manifest"], "--log", str(corpus["stacks"] / "preprocess_log.csv"),
        "--out", str(tmp_path),
    ]) == 0
    out = capsys.readouterr().out
    assert "good: n=5" in out and "CDF(1513)=" in out and "CDF(2160)=" in out
    assert _rows(tmp_path / "mts_cdf.csv")[0] == ["t", "class", "value"]


def test_missing_checkpoint_exits_with_one(corpus, tmp_path):
    assert main([
        "eval", "--checkpoint", str(tmp_path / "absent.siqa"), "--manifest", corpus["manifest"],
        "--stacks", str(corpus["stacks"]), "--out", str(tmp_path),
    ]) == 1


def test_bad_config_exits_with_one(tmp_path):
    assert main(["synth", "--n", "1", "--out", str(tmp_path), "--config", str(tmp_path / "absent.cfg")]) == 1


def test_preprocess_exports_detection_maps(corpus, tmp_path):
    config = RunConfig(resolution=16, detect_resolution=64, export_maps=True)
    assert cmd_preprocess(str(corpus["images"]), str(tmp_path), config) == 0
    names = os.listdir(tmp_path)
    assert sum(n.endswith(".pgm") for n in names) == 4 * 15
    log = read_preprocess_log(str(tmp_path / "preprocess_log.csv"))
    for suffix in ("p_ls", "m_ls", "r_line", "m_ts"):
        img = decode_image((tmp_path / f"usable_0002.{suffix}.pgm").read_bytes())
        assert (img.width, img.height, img.channels) == (64, 64, 1)
    for suffix, count in (("m_ls", log["usable_0002.ppm"].m_ls), ("m_ts", log["usable_0002.ppm"].m_ts)):
        mask = decode_image((tmp_path / f"usable_0002.{suffix}.pgm").read_bytes()).data
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert int(mask.sum()) == count
    stacks = {n: b for n, b in _tree_bytes(tmp_path).items() if n.endswith(".rstk")}
    assert stacks == {n: b for n, b in _tree_bytes(corpus["stacks"]).items() if n.endswith(".rstk")}


def test_trials_train_and_average(corpus, trained, tmp_path):
    model, report = tmp_path / "model", tmp_path / "report"
    assert main([
        "train", "--manifest", corpus["manifest"], "--stacks", str(corpus["stacks"]),
        "--out", str(model), "--config", corpus["config"], "--trials", "2",
    ]) == 0
    first = (model / "trial_0" / "model.siqa").read_bytes()
    assert first == (trained / "model.siqa").read_bytes()
    assert (model / "trial_1" / "model.siqa").read_bytes() != first
    assert (model / "trial_1" / "loss_curve.csv").exists()

    assert main([
        "eval", "--checkpoint", str(model), "--manifest", corpus["manifest"],
        "--stacks", str(corpus["stacks"]), "--out", str(report), "--trials", "2",
    ]) == 0
    rows = _rows(report / "trials.csv")
    assert rows[0] == ["metric", "trial_0", "trial_1", "mean", "std"]
    per_trial = [dict(_rows(report / f"trial_{k}" / "metrics.csv")[1:]) for k in range(2)]
    acc = next(row for row in rows if row[0] == "acc")
    assert float(acc[1]) == float(per_trial[0]["acc"])
    assert float(acc[3]) == pytest.approx((float(per_trial[0]["acc"]) + float(per_trial[1]["acc"])) / 2)


def test_overlay_blends_half_and_half():
    rgb = np.ones((2, 2, 3))
    out = overlay(rgb, np.zeros((2, 2)))
    # jet(0) is dark blue
    np.testing.assert_allclose(out.data[0, 0], [0.5, 0.5, 0.75], atol=1e-6)


def _acceptance_run(tmp_path, architecture):
    synth, stacks, model, report = (tmp_path / d for d in ("synth", "stacks", "model", "report"))
    assert main(["synth", "--n", "100", "--seed", "7", "--out", str(synth)]) == 0
    assert main(["preprocess", "--in", str(synth / "images"), "--out", str(stacks), "--workers", "4"]) == 0
    assert main([
        "train", "--manifest", str(synth / "manifest.csv"), "--stacks", str(stacks), "--out", str(model),
        "--architecture", architecture,
    ]) == 0
    losses = [float(r[1]) for r in _rows(model / "loss_curve.csv")[1:]]
    assert losses[0] > losses[1] > losses[2]
    assert main([
        "eval", "--checkpoint", str(model / "model.siqa"), "--manifest", str(synth / "manifest.csv"),
        "--stacks", str(stacks), "--out", str(report),
    ]) == 0
    rows = dict((r[0], r[1]) for r in _rows(report / "metrics.csv")[1:])
    return float(rows["acc"]), synth, stacks, model


@pytest.mark.slow
def test_dual_branch_reaches_ninety_percent(tmp_path):
    acc, synth, stacks, model = _acceptance_run(tmp_path, "dual")
    assert acc >= 0.90

    # Grad-CAM mass stays inside the field of view
    records = [r for r in read_manifest(str(synth / "manifest.csv")) if r.split == "test"][:10]
    inside = 0
    for record in records:
        name = os.path.splitext(os.path.basename(record.image_path))[0]
        out = tmp_path / "cam" / name
        assert main([
            "explain", "--checkpoint", str(model / "model.siqa"),
            "--image", str(stacks / f"{name}.lsts.rstk"), "--out", str(out),
        ]) == 0
        fov = preprocess_detailed(decode_image((synth / record.image_path).read_bytes()), 64).fov
        masses = []
        for branch in ("cam_ls", "cam_ts"):
            cam = decode_image((out / f"{name}.{branch}.pgm").read_bytes()).data[:, :, 0]
            masses.append(cam[fov].sum() / max(cam.sum(), 1e-12))
        inside += min(masses) >= 0.9
    assert inside >= 9


@pytest.mark.slow
def test_single_branch_reaches_eighty_five_percent(tmp_path):
    acc, *_ = _acceptance_run(tmp_path, "single")
    assert acc >= 0.85

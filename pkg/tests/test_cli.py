import json

import numpy as np
import pytest
from PIL import Image

from robocascade.cli import main
from robocascade.jointnet import load_jointnet, overlay, predict_joints
from robocascade.masknet import binarize_mask, load_masknet
from robocascade.neuralcore import save_checkpoint
from robocascade.pipeline import JOINT_PALETTE, NetSegmenter
from robocascade.schemas import validate_eval, validate_manifest
from robocascade.scene import load_split, read_manifest

TRAIN = ["--epochs", "2", "--limit", "8", "--batch-size", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """A tiny dataset and one pass of every training command."""
    base = tmp_path_factory.mktemp("cli")
    data, seg, joints = base / "data", base / "seg", base / "joints"
    assert main(["gen", "--robot", "ur5like", "--recordings", "2", "--samples", "20", "--seed", "5",
                 "--resolution", "64x53", "--out", str(data)]) == 0
    assert main(["train-seg", "--data", str(data), "--out", str(seg), "--seed", "1"] + TRAIN) == 0
    assert main(["train-joints", "--data", str(data), "--out", str(joints), "--seed", "1"] + TRAIN) == 0
    return base


def test_gen_summary_matches_disk(tmp_path, capsys):
    out = tmp_path / "d"
    code, stdout, err = run(capsys, "gen", "--robot", "ur5like", "--recordings", "3", "--seed", "7",
                            "--samples", "15", "--resolution", "64x53", "--out", out)
    assert code == 0
    lines = stdout.splitlines()
    assert [c.strip() for c in lines[0].split("|")] == ["Recording", "Robot Type", "Number of Samples"]
    rows = [[c.strip() for c in line.split("|")] for line in lines[1:-1]]
    assert len(rows) == 3 and all(r[1] == "ur5like" for r in rows)
    total = int(lines[-1].split("|")[-1])
    assert total == sum(int(r[2]) for r in rows) == 15
    assert len(list((out / "samples").glob("*_color.png"))) == total
    validate_manifest(read_manifest(out))
    assert "train 12 / test 3" in err
    assert json.loads((out / "config.json").read_text())["command"] == "gen"


@pytest.mark.parametrize("argv", [
    ["--recordings", "0"],
    ["--counts", "3,4"],
    ["--counts", "3,3,3", "--steps", "1,1,1"],
    ["--resolution", "big"],
    ["--robot", "ur7like"],
])
def test_gen_bad_flags_exit_nonzero(tmp_path, capsys, argv):
    code, _, err = run(capsys, "gen", "--out", tmp_path / "x", *argv)
    assert code != 0
    assert err.startswith("error:") and len(err.strip().splitlines()) == 1


def test_run_directories_need_force(tmp_path, capsys):
    out = tmp_path / "d"
    args = ["gen", "--samples", "3", "--recordings", "1", "--resolution", "32x27", "--out", out]
    assert run(capsys, *args)[0] == 0
    code, _, err = run(capsys, *args)
    assert code == 1 and "--force" in err
    (out / "stray.txt").write_text("x")
    assert run(capsys, *args, "--force")[0] == 0
    assert not (out / "stray.txt").exists()


def test_missing_dataset(tmp_path, capsys):
    code, _, err = run(capsys, "train-seg", "--data", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == 1 and "error" in err
    assert not (tmp_path / "o").exists()


def test_full_profile_resolves_long_schedule(runs, capsys):
    for cmd in ("train-seg", "train-joints"):
        code, out, _ = run(capsys, cmd, "--data", runs / "data", "--out", runs / "unused", "--profile", "full",
                           "--dry-run", "--limit", "1")
        assert code == 0
        model = json.loads(out)["model"]
        assert (model["batch_size"], model["epochs"], model["width"], model["height"]) == (128, 5000, 256, 212)
    assert not (runs / "unused").exists()


def test_training_run_directories(runs):
    for name, header in (("seg", "epoch,mean_loss,lr"), ("joints", "epoch,mean_loss_m,lr,momentum")):
        d = runs / name
        assert {"checkpoint.json", "checkpoint.bin", "loss.csv", "config.json"} <= {p.name for p in d.iterdir()}
        lines = (d / "loss.csv").read_text().splitlines()
        assert lines[0] == header and len(lines) == 3
        cfg = json.loads((d / "config.json").read_text())
        assert cfg["resolved"]["seed"] == 1 and "numpy" in cfg["versions"]


def test_training_is_deterministic(runs, tmp_path):
    for cmd, name in (("train-seg", "seg"), ("train-joints", "joints")):
        again = tmp_path / name
        assert main([cmd, "--data", str(runs / "data"), "--out", str(again), "--seed", "1"] + TRAIN) == 0
        assert (again / "loss.csv").read_bytes() == (runs / name / "loss.csv").read_bytes()
        assert (again / "checkpoint.bin").read_bytes() == (runs / name / "checkpoint.bin").read_bytes()


def test_eval_outputs_and_determinism(runs, tmp_path, capsys):
    base = ["eval", "--data", runs / "data", "--seg", runs / "seg", "--joints", runs / "joints"]
    code, out, _ = run(capsys, *base, "--out", tmp_path / "a")
    assert code == 0
    assert run(capsys, *base, "--out", tmp_path / "b")[0] == 0
    for f in ("report.json", "table.csv", "table.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    validate_eval(doc)
    rep = doc["reports"][0]
    assert rep["robot"] == "ur5like" and rep["joint_error_full_m"] >= 0
    train_ids = set(read_manifest(runs / "data")["splits"]["train"])
    assert not train_ids & set(rep["test_ids"])
    rows = (tmp_path / "a" / "table.csv").read_text().splitlines()
    assert [r.split(",")[0].strip('"') for r in rows[1:]] == [
        "Mask Accuracy", "Coordinates Error (separate)", "Coordinates Error (full system)"]
    assert "Mask Accuracy" in out


def test_eval_only_mask(runs, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--data", runs / "data", "--seg", runs / "seg", "--only", "mask",
                     "--out", tmp_path / "m")
    assert code == 0
    rep = json.loads((tmp_path / "m" / "report.json").read_text())["reports"][0]
    assert rep["mask_accuracy"] is not None
    assert rep["joint_error_separate_m"] is None and rep["joint_error_full_m"] is None
    code, _, err = run(capsys, "eval", "--data", runs / "data", "--only", "full", "--seg", runs / "seg",
                       "--out", tmp_path / "n")
    assert code == 1 and "--joints" in err


def test_eval_refuses_missing_test_split(runs, tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    manifest = read_manifest(runs / "data")
    manifest["splits"]["test"] = []
    (data / "manifest.json").write_text(json.dumps(manifest))
    code, _, err = run(capsys, "eval", "--data", data, "--seg", runs / "seg", "--only", "mask",
                       "--out", tmp_path / "e")
    assert code == 1 and "test split" in err


def test_infer_matches_eval_path(runs, tmp_path, capsys):
    manifest = read_manifest(runs / "data")
    seg, _ = load_masknet(runs / "seg")
    jnet, norm, _ = load_jointnet(runs / "joints")
    _, h, w = seg.input_shape
    test = load_split(runs / "data", manifest, "test", (w, h))
    masks = binarize_mask(NetSegmenter(seg).predict(test.colors))
    expected = predict_joints(jnet, norm, overlay(test.colors, masks))

    png = tmp_path / "out.png"
    label = str(test.color_paths[0]).replace("_color.png", "_label.json")
    code, out, _ = run(capsys, "infer", test.color_paths[0], "--seg", runs / "seg", "--joints", runs / "joints",
                       "--overlay", png, "--camera", label)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 7
    for i, line in enumerate(lines):
        name, *xyz = line.split()
        assert name == f"joint_{i}"
        assert np.array([float(v) for v in xyz]).tobytes() == expected[0, i].astype(np.float64).tobytes()
    native = np.asarray(Image.open(test.color_paths[0]))
    assert np.asarray(Image.open(png).convert("RGB")).shape == native.shape[:2] + (3,)


def test_infer_overlay_circles(runs, tmp_path, capsys):
    # a regressor with zero weights outputs its bias: a known fan of points in front of the camera
    _, norm, meta = load_jointnet(runs / "joints")
    net, _, _ = load_jointnet(runs / "joints")
    pts = np.array([[x, 0.1 * (x > 0), 3.0] for x in np.linspace(-0.45, 0.45, 7)])
    params = {k: np.zeros_like(v) for k, v in net.named_params().items()}
    last = sorted(params, key=lambda k: int(k.split(".")[0]))[-1]
    params[last] = norm.encode(pts).reshape(-1).astype(params[last].dtype)
    net.set_params(params)
    save_checkpoint(net, tmp_path / "fan", meta)

    black = tmp_path / "black.png"
    Image.fromarray(np.zeros((53, 64, 3), np.uint8)).save(black)
    png = tmp_path / "o.png"
    code, out, err = run(capsys, "infer", black, "--seg", runs / "seg", "--joints", tmp_path / "fan",
                         "--overlay", png)
    assert code == 0 and err == ""
    printed = np.array([[float(v) for v in line.split()[1:]] for line in out.splitlines()])
    np.testing.assert_allclose(printed, pts, atol=1e-5)
    img = np.asarray(Image.open(png).convert("RGB"))
    assert img.shape == (53, 64, 3)
    assert {c for c in JOINT_PALETTE if np.any(np.all(img == c, axis=-1))} == set(JOINT_PALETTE[:7])


def test_infer_unreadable_image(runs, tmp_path, capsys):
    bad = tmp_path / "bad.png"
    bad.write_text("not an image")
    code, _, err = run(capsys, "infer", bad, "--seg", runs / "seg", "--joints", runs / "joints")
    assert code == 1 and "cannot read image" in err
    code, _, _ = run(capsys, "infer", bad, "--seg", runs / "joints", "--joints", runs / "joints")
    assert code == 1

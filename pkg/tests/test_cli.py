import csv
import json
import os

import numpy as np
import pytest

from ditcod import pnm
from ditcod.ablation import CSV_HEADER, read_csv
from ditcod.canny import canny
from ditcod.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from ditcod.data import load_dataset
from ditcod.training import load_model, predict_maps


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One small dataset and a short training run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data, run = str(root / "data"), str(root / "run")
    assert main(["gen-data", "--out", data, "--n", "4", "--size", "64", "--seed", "2"]) == EXIT_OK
    assert main(["train", "--data", data, "--out", run, "--steps", "2", "--batch-size", "2"]) == EXIT_OK
    return root, data, run


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_required_option_is_usage_error():
    assert main(["predict", "--out", "x"]) == EXIT_USAGE


def test_bad_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["train", "--config", str(cfg), "--data", "x", "--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_check_is_usage_error():
    assert main(["gradcheck", "--checks", "no_such_op"]) == EXIT_USAGE


def test_missing_data_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_corrupt_image_is_data_error(tmp_path, workspace):
    _, _, run = workspace
    (tmp_path / "a.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(5))
    code = main(["predict", "--checkpoint", os.path.join(run, "checkpoint"), "--input", str(tmp_path / "a.ppm"),
                 "--out", str(tmp_path / "p")])
    assert code == EXIT_DATA


def test_wrong_image_size_is_data_error(tmp_path, workspace):
    _, _, run = workspace
    pnm.save_image(str(tmp_path / "small.ppm"), np.zeros((3, 32, 32)))
    code = main(["predict", "--checkpoint", os.path.join(run, "checkpoint"), "--input", str(tmp_path / "small.ppm"),
                 "--out", str(tmp_path / "p")])
    assert code == EXIT_DATA


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--checks", "matmul", "softmax_rows", "--seeds", "0", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "4/4 checks passed" in out


def test_gen_boundary(tmp_path, workspace):
    _, data, _ = workspace
    assert main(["gen-boundary", "--masks", os.path.join(data, "gt"), "--out", str(tmp_path)]) == EXIT_OK
    gt = pnm.load_image(os.path.join(data, "gt", "00003.pgm"))[0]
    np.testing.assert_array_equal(pnm.load_image(str(tmp_path / "00003.pgm"))[0], canny(gt))


def test_gen_boundary_without_masks(tmp_path):
    assert main(["gen-boundary", "--masks", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_train_writes_loss_curve(workspace):
    _, _, run = workspace
    with open(os.path.join(run, "loss.csv")) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3 and rows[0][-1] == "total"


def test_predict_and_eval(tmp_path, workspace):
    _, data, run = workspace
    pred = str(tmp_path / "pred")
    assert main(["predict", "--checkpoint", os.path.join(run, "checkpoint"), "--input", data, "--out", pred]) == EXIT_OK
    model = load_model(os.path.join(run, "checkpoint"))
    samples = load_dataset(data)
    obj, bnd = predict_maps(model, np.stack([s.image for s in samples]))
    for i, s in enumerate(samples):
        o = pnm.load_image(os.path.join(pred, f"{s.id}_obj.pgm"))
        b = pnm.load_image(os.path.join(pred, f"{s.id}_bnd.pgm"))
        assert o.shape == b.shape == (1, 64, 64)
        assert np.abs(o[0] - obj[i]).max() <= 0.5 / 255 + 1e-12
        assert np.abs(b[0] - bnd[i]).max() <= 0.5 / 255 + 1e-12

    out = str(tmp_path / "eval")
    assert main(["eval", "--pred", pred, "--gt", data, "--out", out]) == EXIT_OK
    assert sorted(os.listdir(out)) == ["metrics.csv", "pr.csv", "pr.svg"]
    with open(os.path.join(out, "metrics.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows][:4] == [s.id for s in samples]
    with open(os.path.join(out, "pr.svg")) as fh:
        assert fh.read().lstrip().startswith("<svg")


def test_predict_single_file(tmp_path, workspace):
    _, data, run = workspace
    src = os.path.join(data, "img", "00001.ppm")
    assert main(["predict", "--checkpoint", os.path.join(run, "checkpoint"), "--input", src,
                 "--out", str(tmp_path)]) == EXIT_OK
    assert sorted(os.listdir(tmp_path)) == ["00001_bnd.pgm", "00001_obj.pgm"]


def test_eval_missing_ground_truth(tmp_path):
    pnm.save_image(str(tmp_path / "zz_obj.pgm"), np.zeros((1, 8, 8)))
    assert main(["eval", "--pred", str(tmp_path), "--gt", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_ablate_tiny_budget(tmp_path, workspace, capsys):
    _, data, _ = workspace
    out = str(tmp_path / "abl")
    code = main(["ablate", "--data", data, "--out", out, "--seeds", "0", "--steps", "1",
                 "--n-train", "2", "--n-test", "2"])
    assert code == EXIT_OK
    with open(os.path.join(out, "ablation.csv")) as fh:
        assert fh.readline().strip() == CSV_HEADER
    rows = read_csv(os.path.join(out, "ablation.csv"))
    assert [r.variant for r in rows] == ["DTIT", "EarlyFuse", "LateFuse"]
    assert all(0.0 <= r.scores["MAE"] <= 1.0 for r in rows)
    assert "DTIT MAE <= LateFuse MAE per seed" in capsys.readouterr().out


def test_ablate_too_few_samples(tmp_path, workspace):
    _, data, _ = workspace
    assert main(["ablate", "--data", data, "--out", str(tmp_path), "--n-train", "4", "--n-test", "4",
                 "--steps", "1"]) == EXIT_DATA

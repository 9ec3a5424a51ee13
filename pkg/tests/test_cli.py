import csv
import json

import numpy as np
import pytest

from deprocams import io
from deprocams.cli import main
from deprocams.errors import ConfigError, MissingFileError, ShapeError


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "plane"
    assert main(["simulate", "--scene", "plane", "--out", str(data), "--n", "3", "--n-test", "2",
                 "--resolution", "24x32", "--seed", "1"]) == 0
    model = root / "model.ckpt"
    assert main(["train", "--data", str(data), "--out", str(model), "--iterations", "3"]) == 0
    return root, data, model


def test_simulate_train_evaluate(trained):
    root, data, model = trained
    assert (root / "model.loss.csv").read_text().startswith("iter,L_recon,L_mask,L_rough,L_smooth,total")
    out = root / "metrics.csv"
    assert main(["evaluate", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    rows = dict(csv.reader(out.open()))
    assert {"psnr", "rmse", "ssim", "d_err"} <= set(rows)
    assert np.isfinite(float(rows["psnr"]))


def test_relight_and_reconstruct(trained):
    root, data, model = trained
    pattern = data / "prj" / "test" / "0000.png"
    out = root / "relit.png"
    assert main(["relight", "--model", str(model), "--pattern", str(pattern), "--out", str(out)]) == 0
    assert io.read_png(out).shape == (24, 32, 3)
    assert main(["reconstruct", "--model", str(model), "--out", str(root / "rec"), "--dump-attributes"]) == 0
    assert (root / "rec_cloud.ply").exists() and (root / "rec_depth.pfm").exists()
    for name in ("normal", "mask", "omega", "dp"):
        assert io.read_pfm(root / f"rec_{name}.pfm").shape[:2] == (24, 32)
        assert (root / f"rec_{name}.png").exists()


def test_relight_wrong_size(trained, capsys):
    root, _, model = trained
    bad = root / "bad.png"
    io.write_png(bad, np.zeros((10, 10, 3)))
    out = root / "never.png"
    code = main(["relight", "--model", str(model), "--pattern", str(bad), "--out", str(out)])
    assert code == ShapeError.exit_code
    assert not out.exists()
    assert capsys.readouterr().err.startswith("error: shape:")


def test_compensate(trained):
    root, data, model = trained
    target = data / "prj" / "test" / "0001.png"
    out = root / "comp.png"
    assert main(["compensate", "--model", str(model), "--target", str(target), "--out", str(out),
                 "--iterations", "2"]) == 0
    assert out.exists() and (root / "comp.loss.csv").exists()


def test_missing_inputs_and_bad_config(tmp_path):
    assert main(["relight", "--model", str(tmp_path / "x"), "--pattern", "p", "--out", "o"]) == MissingFileError.exit_code
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"optimizer": {}}))
    assert main(["gradcheck", "--config", str(cfg)]) == ConfigError.exit_code
    cfg.write_text(json.dumps({"train": {"lr_depth": -1}}))
    code = main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "m")])
    assert code == ConfigError.exit_code
    assert main(["simulate", "--out", str(tmp_path / "d"), "--resolution", "30x30"]) == ConfigError.exit_code
    assert main(["simulate", "--out", str(tmp_path / "d"), "--n", "0"]) == ConfigError.exit_code


def test_gradcheck_exit_code(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)

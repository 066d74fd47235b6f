import json

import pytest

from pams.cli import main, parse_config
from pams.errors import ParameterError
from pams.export import file_kind, load_model
from pams.model import ModelConfig
from pams.training import TrainConfig

TINY = {"model": {"n_blocks": 1, "n_channels": 4},
        "train": {"epochs": 2, "steps_per_epoch": 2, "batch_size": 2, "patch_size": 8,
                  "lr": 1e-3, "lr_halving_period": 1, "calibration_batches": 1}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--out", str(root / "data"), "--images", "6", "--size", "32", "--val", "2"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data"),
                 "--out", str(root / "fp")]) == 0
    return root


def test_parse_config_flat_and_grouped():
    m, t = parse_config({"n_blocks": 2, "train": {"lr": 0.5, "epochs": 10}, "lambda_s": 0})
    assert m.n_blocks == 2 and t.lr == 0.5 and t.loss_weights.lambda_s == 0
    assert t.loss_weights.lambda_p == 1.0 and t.lr_halving_period == 10
    m, t = parse_config({})
    assert m == ModelConfig() and t == TrainConfig()


def test_parse_config_rejects_unknown():
    with pytest.raises(ParameterError):
        parse_config({"learning_rate": 1})


def test_train_outputs(workspace, capsys):
    out = workspace / "fp"
    assert file_kind(out / "model.ckpt") == "checkpoint"
    report = json.loads((out / "report.json").read_text())
    assert len(report["epochs"]) == 2
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["model"]["n_blocks"] == 1 and cfg["train"]["epochs"] == 2


def test_train_echoes_config(workspace, capsys):
    main(["train", "--config", str(workspace / "tiny.json"), "--data", str(workspace / "data"),
          "--teacher", str(workspace / "fp" / "model.ckpt"), "--bits", "4", "--out", str(workspace / "q4")])
    out = capsys.readouterr().out
    assert out.startswith("# resolved config")
    assert '"n_bits": 4' in out and '"calibration_batches": 1' in out
    assert "epoch\tlr\tl_pix\tl_skt\tpsnr\tssim" in out
    assert load_model(workspace / "q4" / "model.ckpt").config.n_bits == 4


def test_eval(workspace, capsys):
    assert main(["eval", "--model", str(workspace / "fp" / "model.ckpt"), "--data", str(workspace / "data"),
                 "--scale", "2", "--metrics", "psnr,ssim", "--bicubic"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "id\tpsnr\tssim\tbicubic_psnr\tbicubic_ssim"
    assert len(lines) == 1 + 2 + 1 and lines[-1].startswith("mean\t")


def test_eval_wrong_scale(workspace, capsys):
    assert main(["eval", "--model", str(workspace / "fp" / "model.ckpt"), "--data", str(workspace / "data"),
                 "--scale", "4"]) == 2
    assert "error" in capsys.readouterr().err


def test_export_and_eval_packed(workspace, capsys):
    packed = workspace / "fp4.pack"
    assert main(["export", "--model", str(workspace / "fp" / "model.ckpt"), "--bits", "4",
                 "--out", str(packed), "--data", str(workspace / "data")]) == 0
    assert file_kind(packed) == "packed"
    out = capsys.readouterr().out
    assert "compression_ratio" in out and "payload_bits" in out
    assert main(["eval", "--model", str(packed), "--data", str(workspace / "data"), "--scale", "2",
                 "--metrics", "psnr"]) == 0


def test_export_needs_calibration_data(workspace, capsys):
    assert main(["export", "--model", str(workspace / "fp" / "model.ckpt"), "--bits", "4",
                 "--out", str(workspace / "x.pack")]) == 2


def test_stats(workspace, capsys):
    table = workspace / "stats.tsv"
    assert main(["stats", "--model", str(workspace / "fp" / "model.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(table), "--bins", "5"]) == 0
    rows = table.read_text().splitlines()
    assert rows[0] == "site\tsample\tmax_abs" and len(rows) == 1 + 2 * 6
    assert (workspace / "stats.hist.tsv").exists()
    assert capsys.readouterr().out.startswith("site\tmean\tstd\tvar\tmin\tmax")


def test_size(capsys):
    assert main(["size", "--counts", "1176000,337000", "--bits", "8"]) == 0
    rows = dict(l.split("\t") for l in capsys.readouterr().out.strip().splitlines()[1:])
    assert float(rows["storage_quantized_units"]) == pytest.approx(631000, rel=0.01)
    assert main(["size", "--bits", "8"]) == 2


def test_compare(workspace, capsys):
    student = {"epochs": 1, "steps_per_epoch": 1, "batch_size": 2, "patch_size": 8,
               "lr_halving_period": 1, "calibration_batches": 1}
    (workspace / "student.json").write_text(json.dumps(student))
    table = workspace / "cmp.tsv"
    assert main(["compare", "--quantizers", "pams,fixed_max", "--bits", "4", "--seeds", "0,1",
                 "--data", str(workspace / "data"), "--teacher", str(workspace / "fp" / "model.ckpt"),
                 "--config", str(workspace / "student.json"), "--out", str(table)]) == 0
    out = capsys.readouterr().out
    assert "median_psnr" in out and "teacher" in out
    assert len(table.read_text().strip().splitlines()) == 1 + 4

import csv

import numpy as np
import pytest
from PIL import Image

from speednet import checkpoint as ckpt
from speednet.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from speednet.data import scan_dataset
from speednet.model import build, toy_config

TOY_CFG = """\
img_size = 32
epochs = 2
batch_size = 4
encoder_channels = 4,4,8,8
bottleneck_channels = 8
decoder_channels = 8,8,4,4,4
involution_k = 3
involution_r = 2
prefetch = 0
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Synthetic data written by ``synth`` and a two-epoch ``train`` run."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "data"), "--n", "10", "--size", "32", "--seed", "4"]) == 0
    cfg = d / "synth.cfg"
    cfg.write_text(TOY_CFG + f"data_root = {d / 'data'}\ncheckpoint_out = {d / 'run.ckpt'}\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_OK
    return d


def test_synth_layout(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "16", "--size", "64"]) == EXIT_OK
    index = scan_dataset(tmp_path)
    assert len(index) == 16 and not index.dropped and list(index.samples) == ["synthetic"]
    again = tmp_path / "again"
    main(["synth", "--out", str(again), "--n", "16", "--size", "64"])
    for name in ("image/00003.png", "label/00011.png"):
        assert (tmp_path / "synthetic" / name).read_bytes() == (again / "synthetic" / name).read_bytes()


def test_train_writes_checkpoint_and_log(trained):
    assert (trained / "run.ckpt").exists() and (trained / "run.ckpt.best").exists()
    log = (trained / "run.ckpt.log").read_text()
    assert "# epochs = 2" in log and "epoch,train_loss,lr" in log


def test_eval_matches_training_log(trained, capsys):
    rc = main(["eval", "--checkpoint", str(trained / "run.ckpt"), "--split", "train"])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(open(str(trained / "run.ckpt") + ".train.csv")))
    assert [r["class"] for r in rows] == ["synthetic", "overall"]
    last = (trained / "run.ckpt.log").read_text().strip().splitlines()[-1].split(",")
    assert float(rows[-1]["dice"]) == pytest.approx(float(last[3]), abs=1e-6)
    assert "overall" in capsys.readouterr().out


def test_eval_explicit_data_and_class(trained, tmp_path):
    out = tmp_path / "r.csv"
    rc = main(["eval", "--checkpoint", str(trained / "run.ckpt"), "--data", str(trained / "data"),
               "--class", "synthetic", "--split", "all", "--csv", str(out)])
    assert rc == EXIT_OK
    assert len(out.read_text().strip().splitlines()) == 1 + 2


def test_eval_errors(trained, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_IO
    bad = tmp_path / "bad.ckpt"
    blob = bytearray((trained / "run.ckpt").read_bytes())
    blob[100] ^= 1
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--checkpoint", str(bad)]) == EXIT_IO
    assert "CRC" in capsys.readouterr().err
    rc = main(["eval", "--checkpoint", str(trained / "run.ckpt"), "--class", "polyp"])
    assert rc == EXIT_IO


def test_predict_binary_and_deterministic(trained, tmp_path):
    img = trained / "data" / "synthetic" / "image" / "00000.png"
    outs = []
    for name in ("a.png", "b.png"):
        rc = main(["predict", "--checkpoint", str(trained / "run.ckpt"), "--input", str(img),
                   "--output", str(tmp_path / name)])
        assert rc == EXIT_OK
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    mask = np.asarray(Image.open(tmp_path / "a.png"))
    assert mask.shape == (32, 32) and set(np.unique(mask)) <= {0, 255}


def test_predict_size_mismatch_hint(trained, tmp_path, capsys):
    big = tmp_path / "big.png"
    Image.fromarray(np.zeros((48, 48, 3), np.uint8)).save(big)
    args = ["predict", "--checkpoint", str(trained / "run.ckpt"), "--input", str(big),
            "--output", str(tmp_path / "m.png")]
    assert main(args) == EXIT_IO
    assert "--resize" in capsys.readouterr().err
    assert not (tmp_path / "m.png").exists()
    assert main(args + ["--resize"]) == EXIT_OK
    assert np.asarray(Image.open(tmp_path / "m.png")).shape == (32, 32)


@pytest.mark.parametrize("bias,value", [(0.3, 255), (-0.3, 0)])
def test_predict_constant_network(tmp_path, bias, value):
    model = build(toy_config(32))
    for _, p in model.named_parameters():
        p.value[:] = 0
    model.head.bias.value[:] = bias
    ckpt.save_checkpoint(tmp_path / "c.ckpt", model)
    img = tmp_path / "in.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(img)
    assert main(["predict", "--checkpoint", str(tmp_path / "c.ckpt"), "--input", str(img),
                 "--output", str(tmp_path / "m.png")]) == EXIT_OK
    assert np.all(np.asarray(Image.open(tmp_path / "m.png")) == value)


def test_train_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TOY_CFG)
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG
    assert "data_root" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg), "--data-root", "x", "--epohcs", "1"]) == EXIT_CONFIG
    assert "epohcs" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO


def test_train_zero_epochs_override(trained, tmp_path):
    out = tmp_path / "init.ckpt"
    rc = main(["train", "--config", str(trained / "synth.cfg"), "--epochs", "0",
               f"--checkpoint_out={out}"])
    assert rc == EXIT_OK
    model, data = ckpt.load_checkpoint(out)
    assert data.meta["epoch"] == 0
    init = build(model.config)
    assert all(a.value.tobytes() == b.value.tobytes()
               for (_, a), (_, b) in zip(init.named_parameters(), model.named_parameters()))


def test_train_numerical_failure(trained, tmp_path, capsys):
    rc = main(["train", "--config", str(trained / "synth.cfg"), "--lr", "nan", "--epochs", "1",
               "--checkpoint_out", str(tmp_path / "x.ckpt")])
    assert rc == EXIT_NUMERIC
    assert "numerical" in capsys.readouterr().err


def test_params_table(capsys):
    assert main(["params"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[full]" in out and "[no-involution]" in out and "[dilated-bottleneck]" in out
    assert "no-involution / full" in out


def test_gradcheck_ops_only(capsys):
    assert main(["gradcheck", "--seeds", "1", "--no-model"]) == EXIT_OK
    assert "all 16 checks passed" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "1", "--no-model", "--mutate", "upsample2x"]) == EXIT_NUMERIC
    assert "FAILED: upsample2x" in capsys.readouterr().out


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["eval"])
    assert exc.value.code == 2

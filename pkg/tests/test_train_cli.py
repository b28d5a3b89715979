from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import tiny_train_config
from d2aunet.checkpoint import Checkpoint
from d2aunet.cli import main
from d2aunet.config import format_config
from d2aunet.data import DataError, synthetic_samples, write_dataset
from d2aunet.optim import NumericError
from d2aunet.train import CSV_HEADER, Trainer, evaluate_checkpoint, predict, train


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(synthetic_samples(12, 20, seed=4, subjects=6), root)
    return root


def cfg_for(dataset, out, **kw):
    return tiny_train_config(data_dir=str(dataset), out_dir=str(out), split_fractions=(0.5, 0.25, 0.25), **kw)


def write_cfg(tmp_path, cfg, name="run.cfg"):
    path = tmp_path / name
    path.write_text(format_config(cfg))
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train(cfg_for(dataset, out, epochs=2))
    return out


# -- training -------------------------------------------------------------------


def test_training_outputs(trained):
    rows = (trained / "metrics.csv").read_text().splitlines()
    assert rows[0] == CSV_HEADER
    assert [r.split(",")[:2] for r in rows[1:]] == [["1", "train"], ["1", "val"], ["2", "train"], ["2", "val"]]
    for r in rows[1:]:
        assert all(np.isfinite(float(x)) for x in r.split(",")[2:])
    for name in ("last.ckpt", "best.ckpt", "splits.tsv", "config.cfg"):
        assert (trained / name).exists()


def test_resume_equivalence(dataset, tmp_path):
    full = tmp_path / "full"
    train(cfg_for(dataset, full, epochs=5))
    part = tmp_path / "part"
    train(cfg_for(dataset, part, epochs=3))
    resumed = tmp_path / "resumed"
    train(cfg_for(dataset, resumed, epochs=5), resume=part / "last.ckpt")
    assert (full / "metrics.csv").read_bytes() == (resumed / "metrics.csv").read_bytes()
    assert len((full / "metrics.csv").read_text().splitlines()) == 11


def test_resume_at_every_boundary_matches(dataset, tmp_path):
    cfg = cfg_for(dataset, tmp_path / "x", epochs=3)
    from d2aunet.train import prepare_splits

    splits = prepare_splits(cfg)
    ref = Trainer(cfg)
    ref.fit(splits["train"], splits["val"])
    for cut in (1, 2):
        t = Trainer(cfg)
        t.fit(splits["train"], splits["val"], stop_epoch=cut)
        t = Trainer.from_checkpoint(Checkpoint.from_bytes(t.to_checkpoint().to_bytes()), cfg)
        t.fit(splits["train"], splits["val"])
        assert t.history == ref.history
        assert t.to_checkpoint().to_bytes() == ref.to_checkpoint().to_bytes()


def test_empty_dataset_is_a_data_error(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(DataError):
        train(cfg_for(tmp_path, tmp_path / "out"))


def test_non_finite_input_aborts(rng):
    t = Trainer(tiny_train_config())
    images = np.full((2, 1, 16, 16), np.nan, np.float32)
    from d2aunet.tensor import Tensor

    with pytest.raises(NumericError):
        t.train_step(Tensor(images), np.zeros((2, 1, 16, 16), np.uint8))


def test_untrained_model_metrics_are_finite():
    t = Trainer(tiny_train_config())
    samples = synthetic_samples(4, 16)
    samples.append(replace(samples[0], mask=np.zeros((16, 16), np.uint8)))
    loss, summary, acc = t.evaluate(samples)
    assert np.isfinite(loss) and all(np.isfinite(v) for v in summary.values())
    assert acc.counts.total == 5 * 16 * 16


# -- evaluate / predict ---------------------------------------------------------


def test_evaluate_checkpoint_writes_csv(trained, dataset, tmp_path):
    loss, summary, counts, row = evaluate_checkpoint(trained / "last.ckpt", dataset, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == CSV_HEADER + "\n" + row + "\n"
    assert row.startswith("2,eval,")
    assert counts.total == 12 * 16 * 16


def _gray(tmp_path, size, name="img.png", seed=0):
    arr = np.random.default_rng(seed).integers(0, 256, size).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / name)
    return tmp_path / name, arr


def test_predict_outputs_and_determinism(trained, tmp_path):
    img, arr = _gray(tmp_path, (16, 16))
    m1, o1, notes = predict(trained / "last.ckpt", img, tmp_path / "a")
    m2, o2, _ = predict(trained / "last.ckpt", img, tmp_path / "b")
    assert notes == []
    assert m1.read_bytes() == m2.read_bytes() and o1.read_bytes() == o2.read_bytes()
    mask = np.array(Image.open(m1))
    overlay = np.array(Image.open(o1))
    assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 255}
    assert overlay.shape == (16, 16, 3)
    off = mask == 0
    for c in range(3):
        np.testing.assert_array_equal(overlay[..., c][off], arr[off])
    on = ~off
    if on.any():
        assert (overlay[..., 0][on] >= arr[on]).all()


def test_predict_pads_indivisible_extent(trained, tmp_path):
    img, _ = _gray(tmp_path, (18, 13))
    mask_path, _, notes = predict(trained / "last.ckpt", img, tmp_path / "p")
    assert notes and "padded 18x13 to 20x16" in notes[0]
    assert np.array(Image.open(mask_path)).shape == (18, 13)


# -- cli ------------------------------------------------------------------------


def test_cli_train_eval_predict_info(dataset, tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, cfg_for(dataset, tmp_path / "out", epochs=1))
    assert main(["train", "--config", str(cfg_path)]) == 0
    ckpt = tmp_path / "out" / "last.ckpt"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(dataset)]) == 0
    assert "1,eval," in capsys.readouterr().out
    img, _ = _gray(tmp_path, (16, 16))
    assert main(["predict", "--ckpt", str(ckpt), "--image", str(img), "--out", str(tmp_path / "pred")]) == 0
    assert (tmp_path / "pred" / "img_mask.png").exists()
    assert main(["info", "--ckpt", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "checkpoint epoch: 1" in out and "params" in out.lower()
    assert main(["info", "--config", str(cfg_path), "--size", "32"]) == 0


def test_cli_resume(dataset, tmp_path):
    cfg_path = write_cfg(tmp_path, cfg_for(dataset, tmp_path / "out", epochs=2))
    one = write_cfg(tmp_path, cfg_for(dataset, tmp_path / "first", epochs=1), "one.cfg")
    assert main(["train", "--config", str(one)]) == 0
    assert main(["train", "--config", str(cfg_path), "--resume", str(tmp_path / "first" / "last.ckpt")]) == 0
    assert len((tmp_path / "out" / "metrics.csv").read_text().splitlines()) == 5


@pytest.mark.parametrize("argv", [[], ["train"], ["frobnicate"], ["info"], ["eval", "--ckpt", "x"]])
def test_cli_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_cli_error_exit_codes(dataset, tmp_path, trained, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("lr = banana\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(dataset)]) == 2
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert main(["info", "--ckpt", str(junk)]) == 2
    assert main(["predict", "--ckpt", str(trained / "last.ckpt"), "--image", str(tmp_path / "no.png"),
                 "--out", str(tmp_path)]) == 2
    rgb = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(rgb)
    assert main(["predict", "--ckpt", str(trained / "last.ckpt"), "--image", str(rgb), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "data error" in err


def test_cli_selftest_passes_and_detects_fault(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 11 and "FAIL" not in out
    assert main(["selftest", "--inject-fault", "conv-grad"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "d2aunet", "info", "--config",
                           str(Path(__file__).parent.parent / "configs" / "full_vgg.cfg")],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and "params" in proc.stdout.lower()

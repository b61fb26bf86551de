import csv

import pytest

from ctrlf.cli import EXIT_CONFIG, EXIT_NONFINITE, EXIT_OK, main
from ctrlf.data import write_synthetic_folder


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_ctrlf_s(capsys):
    code, out, _ = run(capsys, "analyze", "--variant", "ctrlf-s")
    assert code == EXIT_OK
    assert "ctrlf-s + AKF at 224x224" in out and "total" in out


def test_analyze_writes_sweep(tmp_path, capsys):
    dest = tmp_path / "sweep.csv"
    code, out, _ = run(capsys, "analyze", "--variant", "tiny", "--sweep", str(dest))
    assert code == EXIT_OK
    rows = list(csv.reader(dest.open()))
    assert rows[0] == ["patch_large", "patch_small", "params", "flops"] and len(rows) > 1


def test_invalid_patch_exit_code(capsys):
    code, _, err = run(capsys, "analyze", "--patch-large", "5")
    assert code == EXIT_CONFIG
    assert "[1, 2, 4, 7, 8, 14, 28, 56]" in err


def test_missing_dataset_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == EXIT_CONFIG and "nope" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "analyze", "--config", str(tmp_path / "none.txt"))
    assert code == EXIT_CONFIG and "none.txt" in err


def test_config_file_then_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.txt"
    cfg.write_text("variant=ctrlf-b\nfusion=ckf\nresolution=384\n")
    _, out, _ = run(capsys, "analyze", "--config", str(cfg))
    assert "ctrlf-b + CKF at 384x384" in out
    _, out, _ = run(capsys, "analyze", "--config", str(cfg), "--fusion", "akf")
    assert "ctrlf-b + AKF at 384x384" in out


def test_gradcheck_command(capsys):
    code, out, _ = run(capsys, "gradcheck", "--fragments", "akf", "ckf", "--samples", "10")
    assert code == EXIT_OK and out.count("ok") == 2


def test_gradcheck_unknown_fragment(capsys):
    assert run(capsys, "gradcheck", "--fragments", "nope")[0] == EXIT_CONFIG


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_synthetic_folder(root / "data", num_classes=4, per_class=10, size=32)
    out = root / "run"
    code = main(["train", "--variant", "tiny", "--resolution", "32", "--data", str(data), "--out", str(out),
                 "--epochs", "2", "--warmup-epochs", "0", "--batch-size", "8", "--no-augment"])
    return code, data, out


def test_train_writes_run_directory(trained):
    code, _, out = trained
    assert code == EXIT_OK
    for rel in ("config.txt", "metrics.csv", "manifest/classes.txt", "checkpoints/best/tensors.bin",
                "checkpoints/last/state.txt"):
        assert (out / rel).exists(), rel
    assert "num_classes=4" in (out / "config.txt").read_text()
    assert len((out / "metrics.csv").read_text().splitlines()) == 3


def test_eval_from_checkpoint(trained, capsys):
    _, data, out = trained
    code, text, _ = run(capsys, "eval", "--checkpoint", str(out / "checkpoints" / "last"))
    assert code == EXIT_OK
    scores = dict(kv.split("=") for kv in text.split())
    assert set(scores) == {"fused", "cnn", "mfca"}
    assert all(0.0 <= float(v) <= 1.0 for v in scores.values())


def test_eval_of_untrained_model_near_chance(tmp_path, capsys):
    data = write_synthetic_folder(tmp_path / "d", num_classes=4, per_class=10, size=32, seed=3)
    out = tmp_path / "run"
    main(["train", "--variant", "tiny", "--resolution", "32", "--data", str(data), "--out", str(out),
          "--epochs", "1", "--warmup-epochs", "0", "--lr", "1e-9", "--min-lr", "1e-10", "--no-augment"])
    capsys.readouterr()
    _, text, _ = run(capsys, "eval", "--checkpoint", str(out / "checkpoints" / "last"), "--split", "train")
    fused = float(text.split()[0].split("=")[1])
    assert abs(fused - 0.25) <= 0.1


def test_eval_mismatched_variant(trained, capsys):
    _, _, out = trained
    code, _, err = run(capsys, "eval", "--checkpoint", str(out / "checkpoints" / "last"), "--variant", "ctrlf-s")
    assert code == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_exit_code(trained, tmp_path, capsys):
    _, data, _ = trained
    code, _, err = run(capsys, "train", "--variant", "tiny", "--resolution", "32", "--data", str(data),
                       "--out", str(tmp_path / "nan"), "--epochs", "2", "--warmup-epochs", "0", "--lr", "1e30",
                       "--min-lr", "1e29", "--no-augment")
    assert code == EXIT_NONFINITE and "non-finite" in err

import pandas as pd
import pytest

import cli
from utils.csv_io import read_csv


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_gradcheck_writes_a_stamped_csv(tmp_path):
    out = tmp_path / "grad.csv"
    assert _run("gradcheck", "--loss", "ce", "--trials", 3, "--out", out) == 0
    df, meta = read_csv(str(out))
    assert len(df) == 3 and df["passed"].all()
    assert meta["command"] == "gradcheck"
    assert meta["loss"] == "ce"
    assert "topk_version" in meta and "numpy_version" in meta


def test_failed_check_exits_2(tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        return pd.DataFrame(
            {"trial": [0], "y": [0], "max_abs_err": [1.0], "tolerance": [1e-4], "passed": [False], "resamples": [0]}
        )

    monkeypatch.setattr(cli, "gradcheck_trials", failing)
    out = tmp_path / "grad.csv"
    assert _run("gradcheck", "--out", out) == 2
    # the CSV is still written for inspection
    assert out.exists()


def test_bad_values_exit_1(tmp_path):
    assert _run("simplex", "--L", 4, "--out", tmp_path / "s.csv") == 1
    assert _run("gradcheck", "--trials", "many", "--out", tmp_path / "g.csv") == 1
    assert _run("gradcheck", "--set", "nonsense=1", "--out", tmp_path / "g.csv") == 1
    assert _run("gradcheck", "--set", "trials", "--out", tmp_path / "g.csv") == 1
    assert _run("gradcheck", "--config", tmp_path / "missing.env", "--out", tmp_path / "g.csv") == 1


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as info:
        _run("gradcheck", "--no-such-flag", "1")
    assert info.value.code == 1


def test_config_file_then_flags(tmp_path, monkeypatch):
    monkeypatch.setenv("TOPK_SEED", "5")
    out = tmp_path / "sp.csv"
    assert _run("sparsity", "--L", 10, "--samples", 20, "--epsilon-grid", "0,1", "--out", out) == 0
    assert read_csv(str(out))[1]["seed"] == "5"

    config = tmp_path / "run.env"
    config.write_text("L=10\nsamples=20\nseed=7\nepsilon_grid=0,0.5,1\n")
    assert _run("sparsity", "--config", config, "--out", out) == 0
    df, meta = read_csv(str(out))
    assert meta["seed"] == "7"
    assert df["epsilon"].tolist() == [0.0, 0.5, 1.0]

    assert _run("sparsity", "--config", config, "--seed", 9, "--set", "epsilon_grid=2", "--out", out) == 0
    df, meta = read_csv(str(out))
    assert meta["seed"] == "9"
    assert df["epsilon"].tolist() == [2.0]


def test_default_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv("TOPK_OUTPUT_DIR", str(tmp_path / "results"))
    assert _run("sparsity", "--L", 10, "--samples", 20, "--epsilon-grid", "0") == 0
    assert (tmp_path / "results" / "sparsity.csv").exists()


def test_simplex_and_timing(tmp_path):
    out = tmp_path / "mesh.csv"
    assert _run("simplex", "--loss", "cal_hinge", "--mesh-steps", 4, "--out", out) == 0
    df, _ = read_csv(str(out))
    assert list(df.columns) == ["s1", "s2", "s3", "loss_value", "raw_value"]
    assert len(df) == 15
    out = tmp_path / "timing.csv"
    assert _run("timing", "--K-grid", "1,2,3", "--L", 10, "--batch", 16, "--repeats", 2, "--out", out) == 0
    df, meta = read_csv(str(out))
    assert len(df) == 9 and meta["blas_threads"] == "1"
    argv = ["timing", "--K-grid", "1,2", "--L", 10, "--batch", 8, "--repeats", 1, "--blas-threads", "none"]
    assert _run(*argv, "--out", out) == 0
    assert read_csv(str(out))[1]["blas_threads"] == "None"


def test_probe_with_a_fixed_distribution(tmp_path):
    out = tmp_path / "probe.csv"
    assert _run("probe", "--pi", "0.5,0.3,0.2", "--radius", 2, "--steps", 9, "--out", out) == 0
    df, meta = read_csv(str(out))
    assert len(df) == 1
    assert df.loc[0, "loss"] == "ce"
    assert meta["pi"] == "0.5,0.3,0.2"
    assert _run("probe", "--pi", "0.5,0.5", "--out", out) == 1


def test_probe_accepts_noised_losses(tmp_path):
    out = tmp_path / "probe.csv"
    argv = ["probe", "--loss", "noised_balanced", "--epsilon", 0.2, "--B", 2, "--pi", "0.6,0.3,0.1"]
    assert _run(*argv, "--steps", 7, "--out", out) == 0


def test_train_then_eval(tmp_path):
    hist = tmp_path / "train.csv"
    assert _run("train", "--loss", "ce", "--epochs", 2, "--lr-drop-epochs", "", "--out", hist) == 0
    df, meta = read_csv(str(hist))
    assert df["epoch"].tolist() == [0, 1]
    assert meta["task"] == "longtail20"
    checkpoint = tmp_path / "train.npz"
    assert checkpoint.exists()

    out = tmp_path / "eval.csv"
    assert _run("eval", "--checkpoint", checkpoint, "--split", "val", "--out", out) == 0
    per_class, summary = read_csv(str(out))
    assert len(per_class) == 20
    assert set(per_class["shot_group"]) <= {"few", "medium", "many"}
    assert 0.0 <= float(summary["macro_top_k_accuracy"]) <= 1.0


def test_eval_missing_checkpoint(tmp_path):
    assert _run("eval", "--checkpoint", tmp_path / "none.npz", "--out", tmp_path / "e.csv") == 1


def test_sweep_recipe_with_overrides(tmp_path):
    out = tmp_path / "sweep.csv"
    argv = ["sweep", "--recipe", "epsilon", "--values", "0,0.1", "--seeds", "0", "--epochs", 1]
    assert _run(*argv, "--out", out) == 0
    df, meta = read_csv(str(out))
    assert df["value"].tolist() == [0.0, 0.1]
    assert set(df["loss"]) == {"noised_balanced"}
    assert meta["param"] == "epsilon"
    assert meta["task"] == "orthogonal100"
    assert meta["epochs"] == "1" and meta["bias"] == "False" and meta["lr"] == "0.003"
    assert _run("sweep", "--recipe", "nope", "--out", out) == 1


def test_training_failure_exits_2(tmp_path, monkeypatch):
    from services.errors import TrainingError

    def diverge(ds, cfg):
        raise TrainingError("non-finite loss", epoch=0, batch=0)

    monkeypatch.setattr(cli, "train", diverge)
    assert _run("train", "--epochs", 1, "--out", tmp_path / "t.csv") == 2

import csv
import json

import pytest

from convae.cli import main


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert _run("synth", "--healthy", 6, "--faulted", 2, "--len", 300, "--seed", 5, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    code = _run("train", "--data", data_dir, "--stages", "1:2:0", "--windows-per-cycle", 2, "--seed", 1,
                "--out", d / "ck.bin", "--log", d / "log.csv")
    assert code == 0
    return d


def _log_epochs(path):
    with open(path, newline="") as fh:
        return sorted({int(r["epoch"]) for r in csv.DictReader(fh)})


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_writes_cycles_and_is_reproducible(tmp_path):
    args = ("synth", "--healthy", 20, "--faulted", 10, "--len", 200, "--seed", 3)
    assert _run(*args, "--out", tmp_path / "a") == 0
    assert _run(*args, "--out", tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert len(files) == 30
    assert (tmp_path / "a" / "manifest.json").exists()
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_zero_cycles_warns(tmp_path, capsys):
    assert _run("synth", "--healthy", 0, "--faulted", 0, "--out", tmp_path / "e") == 0
    assert "warning" in capsys.readouterr().err
    assert not list((tmp_path / "e").glob("*.csv"))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_checkpoint_and_log(trained, capsys):
    assert (trained / "ck.bin").stat().st_size > 0
    assert _log_epochs(trained / "log.csv") == [0, 1]


def test_train_summary_line(data_dir, tmp_path, capsys):
    assert _run("train", "--data", data_dir, "--stages", "1:1:0", "--windows-per-cycle", 2,
                "--out", tmp_path / "c.bin", "--log", tmp_path / "l.csv") == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("final J=") and "epochs=1" in line and "checkpoint=" in line


def test_train_resume_continues_epoch_counter(data_dir, trained, tmp_path):
    assert _run("train", "--data", data_dir, "--stages", "1:3:0", "--windows-per-cycle", 2, "--seed", 1,
                "--resume", trained / "ck.bin", "--out", tmp_path / "r.bin", "--log", tmp_path / "r.csv") == 0
    assert _log_epochs(tmp_path / "r.csv") == [2]


def test_train_invalid_stage_is_config_error(data_dir, tmp_path, capsys):
    assert _run("train", "--data", data_dir, "--stages", "5:1:0", "--out", tmp_path / "x.bin") == 3
    assert "stages" in capsys.readouterr().err


def test_train_missing_data_exits_2(tmp_path):
    assert _run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "x.bin") == 2


def test_unknown_flag_exits_3():
    assert _run("train", "--bogus", 1) == 3


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def test_eval_auto_threshold_report(data_dir, trained, tmp_path):
    args = ("eval", "--data", data_dir, "--checkpoint", trained / "ck.bin", "--report", tmp_path / "r.json",
            "--plot", tmp_path / "p.svg")
    assert _run(*args, "--scores", tmp_path / "s.csv") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert 0.0 <= rep["metrics"]["accuracy"] <= 1.0
    assert rep["granularity"] == "cycle"
    assert (tmp_path / "p.svg").read_text().startswith("<svg")
    assert _run(*args, "--scores", tmp_path / "s2.csv") == 0
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


def test_eval_zero_threshold_flags_everything(data_dir, trained, tmp_path):
    assert _run("eval", "--data", data_dir, "--checkpoint", trained / "ck.bin", "--threshold", 0,
                "--granularity", "sample", "--scores", tmp_path / "s.csv", "--report", tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["metrics"]["recall"] == 1.0
    with open(tmp_path / "s.csv", newline="") as fh:
        assert {r["granularity"] for r in csv.DictReader(fh)} == {"sample"}


def test_eval_bad_granularity_exits_3(data_dir, trained, tmp_path):
    assert _run("eval", "--data", data_dir, "--checkpoint", trained / "ck.bin", "--granularity", "hourly") == 3


def test_eval_missing_checkpoint_exits_2(data_dir, tmp_path):
    assert _run("eval", "--data", data_dir, "--checkpoint", tmp_path / "none.bin") == 2


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def test_compare_knn_writes_method_column(data_dir, tmp_path):
    assert _run("compare", "--data", data_dir, "--method", "knn", "--windows-per-cycle", 8,
                "--scores", tmp_path / "c.csv", "--report", tmp_path / "c.json") == 0
    with open(tmp_path / "c.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["method"] for r in rows} == {"knn"}


def test_compare_all_methods(data_dir, tmp_path):
    assert _run("compare", "--data", data_dir, "--method", "all", "--windows-per-cycle", 8, "--epochs", 2,
                "--scores", tmp_path / "c.csv", "--report", tmp_path / "c.json") == 0
    blocks = json.loads((tmp_path / "c.json").read_text())["methods"]
    assert set(blocks) == {"abod", "knn", "dense-ae"}
    assert blocks["abod"]["orientation"] == "lower"
    assert blocks["knn"]["orientation"] == "higher"


def test_compare_unknown_method_lists_valid_ones(data_dir, capsys):
    assert _run("compare", "--data", data_dir, "--method", "foo") == 3
    err = capsys.readouterr().err
    assert "foo" in err and "knn" in err and "all" in err


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_flag_beats_config_beats_default(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"stages": "1:2:0", "windows_per_cycle": 2, "seed": 4}}))
    assert _run("train", "--config", cfg, "--data", data_dir, "--out", tmp_path / "a.bin",
                "--log", tmp_path / "a.csv") == 0
    assert _log_epochs(tmp_path / "a.csv") == [0, 1]
    assert _run("train", "--config", cfg, "--stages", "1:1:0", "--data", data_dir, "--out", tmp_path / "b.bin",
                "--log", tmp_path / "b.csv") == 0
    assert _log_epochs(tmp_path / "b.csv") == [0]


def test_unknown_config_key_exits_3(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"learning_rat": 0.1}}))
    assert _run("train", "--config", cfg) == 3
    err = capsys.readouterr().err
    assert "learning_rat" in err and "train" in err


def test_data_dir_environment_variable(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CONVAE_DATA_DIR", str(data_dir))
    assert _run("train", "--stages", "1:1:0", "--windows-per-cycle", 2, "--out", tmp_path / "e.bin",
                "--log", tmp_path / "e.csv") == 0
    monkeypatch.setenv("CONVAE_DATA_DIR", str(tmp_path / "missing"))
    assert _run("train", "--data", data_dir, "--stages", "1:1:0", "--windows-per-cycle", 2,
                "--out", tmp_path / "f.bin", "--log", tmp_path / "f.csv") == 0

import os
import shutil
import subprocess

import pytest

from sparsefeed import cli, diagnostics
from sparsefeed.diagnostics import CheckReport


@pytest.fixture
def cfg_file(tmp_path, quad_cfg_text):
    path = tmp_path / "q.cfg"
    path.write_text(quad_cfg_text)
    return str(path)


def test_run_prints_fingerprint_and_writes_metrics(tmp_path, cfg_file, capsys, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    out = tmp_path / "m.csv"
    assert cli.main(["run", cfg_file, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "config fingerprint" in text and "seed 5" in text
    assert out.read_text().startswith("iter,loss")


def test_seed_env_overrides(tmp_path, cfg_file, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "99")
    a = tmp_path / "a.csv"
    assert cli.main(["run", cfg_file, "--out", str(a)]) == 0
    assert "seed 99" in capsys.readouterr().out
    monkeypatch.delenv(cli.SEED_ENV)
    b = tmp_path / "b.csv"
    cli.main(["run", cfg_file, "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()
    monkeypatch.setenv(cli.SEED_ENV, "many")
    assert cli.main(["run", cfg_file, "--out", str(b)]) == cli.EXIT_CONFIG


def test_repeats_write_one_file_each(tmp_path, quad_cfg_text, monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    path = tmp_path / "r.cfg"
    path.write_text(quad_cfg_text.replace("seed = 5", "seed = 5\nrepeats = 2"))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.rep0.csv").exists() and (tmp_path / "m.rep1.csv").exists()


def test_config_error_exit_code(tmp_path, quad_cfg_text, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(quad_cfg_text.replace("eta = 0.05", "eta = -1"))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "m.csv")]) == cli.EXIT_CONFIG
    assert "eta" in capsys.readouterr().err


def test_io_error_exit_codes(tmp_path, quad_cfg_text):
    assert cli.main(["run", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
    data = tmp_path / "bad.svm"
    data.write_text("1 1:x\n")
    cfg = tmp_path / "lr.cfg"
    cfg.write_text(f"method = s_sgd_ef\nP = 2\neta = 0.1\nT = 3\nk_ratio = 0.5\n"
                   f"[problem]\nkind = logreg\npath = {data}\n")
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "m.csv")]) == cli.EXIT_IO
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "no" / "dir" / "m.csv")]) == cli.EXIT_IO


def test_logreg_csv_run(tmp_path, capsys):
    from sparsefeed.datasets import make_blobs, write_csv

    X, y = make_blobs(100, 4, 3, seed=2)
    data = tmp_path / "blobs.csv"
    write_csv(str(data), X, y)
    cfg = tmp_path / "lr.cfg"
    cfg.write_text(f"method = s_snag_ef\nP = 4\neta = 0.1\nT = 10\nk_ratio = 0.25\nmu_hint = 0.01\n"
                   f"[problem]\nkind = logreg\npath = {data}\nl2 = 0.01\n")
    out = tmp_path / "m.csv"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
    assert "test_acc" in out.read_text().splitlines()[0]


def test_sweep_command(tmp_path, cfg_file, capsys):
    grid = tmp_path / "g.grid"
    grid.write_text("eta = 0.05, 0.01\n")
    out_dir = tmp_path / "sw"
    assert cli.main(["sweep", cfg_file, "--grid", str(grid), "--out-dir", str(out_dir)]) == 0
    assert len((out_dir / "summary.csv").read_text().splitlines()) == 3
    grid.write_text("eta 0.05\n")
    assert cli.main(["sweep", cfg_file, "--grid", str(grid), "--out-dir", str(out_dir)]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", cfg_file, "--grid", str(tmp_path / "none"), "--out-dir", str(out_dir)]) == cli.EXIT_IO


def test_sweep_jobs_do_not_change_outputs(tmp_path, cfg_file):
    grid = tmp_path / "g.grid"
    grid.write_text("eta = 0.05, 0.01\n")
    cli.main(["sweep", cfg_file, "--grid", str(grid), "--out-dir", str(tmp_path / "a")])
    cli.main(["sweep", cfg_file, "--grid", str(grid), "--out-dir", str(tmp_path / "b"), "--jobs", "2"])
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_writes_data_and_figures(tmp_path, quad_cfg_text, capsys):
    a = tmp_path / "a.cfg"
    b = tmp_path / "b.cfg"
    a.write_text(quad_cfg_text)
    b.write_text(quad_cfg_text.replace("s_sgd_ef", "naive_sparse"))
    out = tmp_path / "plots"
    assert cli.main(["compare", str(a), str(b), "--emit-plots", str(out)]) == 0
    names = set(os.listdir(out))
    for metric in ("loss", "grad_norm_sq"):
        assert f"{metric}.png" in names
        assert f"s_sgd_ef.{metric}.dat" in names and f"naive_sparse.{metric}.dat" in names
    assert (out / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_validate_exit_codes(monkeypatch, capsys):
    good = CheckReport("good", True, 0.0, 1.0, 1)
    bad = CheckReport("control", True, 0.0, 1.0, 1, "should have failed")
    monkeypatch.setattr(diagnostics, "run_suite", lambda suite, seed: [(good, True)])
    assert cli.main(["validate"]) == cli.EXIT_OK
    monkeypatch.setattr(diagnostics, "run_suite", lambda suite, seed: [(good, True), (bad, False)])
    assert cli.main(["validate", "--seed", "3"]) == cli.EXIT_CHECK
    text = capsys.readouterr().out
    assert "unexpected" in text and "validation FAILED" in text


@pytest.mark.skipif(shutil.which("sparsefeed") is None, reason="console script not installed")
def test_console_script(tmp_path, cfg_file):
    res = subprocess.run(["sparsefeed", "run", cfg_file, "--out", str(tmp_path / "m.csv")],
                         capture_output=True, text=True, env={**os.environ, "SPARSEFEED_SEED": "1"})
    assert res.returncode == 0, res.stderr
    assert "seed 1" in res.stdout

from __future__ import annotations

import csv

import pytest

from shiftlab import lab
from shiftlab.cli import main


@pytest.fixture()
def config_file(tmp_path):
    out = tmp_path / "artifacts"
    path = tmp_path / "run.toml"
    path.write_text(
        f'[run]\nout_dir = "{out}"\nworkers = 1\ndtype = "float32"\n'
        "\n[csv]\nsteps = 5\n")
    return path, out


def write_sample_csv(path, n, seed, mu=0.0):
    cfg = lab.ShiftConfig(mu=mu, n_q=n, n_p=n, seed=seed)
    law = "target" if mu != 0.0 else "source"
    values = lab.sample(cfg, law).values
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x"])
        for v in values:
            writer.writerow([repr(float(v))])
    return path


def test_run_single_stage_exit_zero(config_file, capsys):
    config, out = config_file
    assert main(["run", "--stage", "S0", "--config", str(config)]) == 0
    stdout = capsys.readouterr().out
    assert "[S0] stage verdict: PASS" in stdout
    assert (out / "S0.json").exists()


def test_run_out_flag_overrides_config(config_file, tmp_path, capsys):
    config, out = config_file
    elsewhere = tmp_path / "elsewhere"
    assert main(["run", "--stage", "S0", "--config", str(config),
                 "--out", str(elsewhere)]) == 0
    assert (elsewhere / "S0.json").exists()
    assert not (out / "S0.json").exists()


def test_report_after_run(config_file, capsys):
    config, out = config_file
    main(["run", "--stage", "S0", "--config", str(config)])
    assert main(["report", "--dir", str(out)]) == 0
    assert "overall: PASS" in capsys.readouterr().out


def test_report_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        main(["report", "--dir", str(tmp_path / "nothing")])


def test_run_invalid_stage_raises(config_file):
    config, _ = config_file
    with pytest.raises(ValueError, match="unknown stage"):
        main(["run", "--stage", "S8", "--config", str(config)])


def test_run_dependent_stage_without_prerequisite(config_file):
    config, _ = config_file
    with pytest.raises(FileNotFoundError):
        main(["run", "--stage", "S3", "--config", str(config)])


def test_sweep_single_stage_list(config_file, capsys):
    config, out = config_file
    assert main(["sweep", "--stages", "S0", "--config", str(config)]) == 0
    stdout = capsys.readouterr().out
    assert "[S0] stage verdict: PASS" in stdout
    assert f"artifacts in {out}" in stdout


def test_csv_subcommand(config_file, tmp_path, capsys):
    config, out = config_file
    src = write_sample_csv(tmp_path / "s.csv", 120, seed=30)
    tgt = write_sample_csv(tmp_path / "t.csv", 120, seed=31, mu=0.3)
    code = main(["csv", "--source", str(src), "--target", str(tgt),
                 "--config", str(config)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert "no registered criteria" in stdout
    assert "mean weight" in stdout
    assert (out / "CSV.json").exists()


def test_missing_subcommand_exits_with_usage():
    with pytest.raises(SystemExit) as err:
        main([])
    assert err.value.code == 2

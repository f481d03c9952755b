"""
Command-line entry point and its exit codes.
"""
import csv

from app.cli import main


def _rows(path):
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def test_beamform_writes_csv(tmp_path):
    out = tmp_path / "beamform.csv"
    assert main(["beamform", "--seed", "3", "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["scheme", "device", "power", "eta", "alpha", "mse", "seed", "config_hash"]
    assert {row["seed"] for row in rows} == {"3"}


def test_config_file(tmp_path):
    config = tmp_path / "small.conf"
    config.write_text(
        "K = 3\n"
        "system.Nt = 2\n"
        "system.D = 4\n"
        "experiment.schemes = ZF\n",
        encoding="utf-8",
    )
    out = tmp_path / "rows.csv"
    assert main(["beamform", "--config", str(config), "--out", str(out)]) == 0
    assert len(_rows(out)) == 3


def test_same_seed_same_bytes(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (first, second):
        assert main(["mse-sweep", "--seed", "9", "--trials", "3", "--out", str(out)]) == 0
    assert first.read_bytes() == second.read_bytes()


def test_bad_config_exits_with_two(tmp_path):
    config = tmp_path / "bad.conf"
    config.write_text("K = 5\nsystem.Nt = 2\n", encoding="utf-8")
    assert main(["beamform", "--config", str(config), "--out", str(tmp_path / "x.csv")]) == 2


def test_missing_config_exits_with_two(tmp_path):
    assert main(["beamform", "--config", str(tmp_path / "absent.conf"), "--out", str(tmp_path / "x.csv")]) == 2


def test_validate_is_byte_identical(tmp_path, capsys):
    config = tmp_path / "quick.conf"
    config.write_text("experiment.validation_scale = quick\n", encoding="utf-8")
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    reports = []
    for out in (first, second):
        assert main(["validate", "--config", str(config), "--seed", "4", "--out", str(out)]) == 0
        reports.append(capsys.readouterr().out)
    assert first.read_bytes() == second.read_bytes()
    assert reports[0] == reports[1]
    assert reports[0].rstrip().endswith("checks passed")

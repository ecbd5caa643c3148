import json
import xml.etree.ElementTree as ET

import pytest

from safe_lyapunov.cli import main
from safe_lyapunov.plotting import SchemaError, plot_run, read_table


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "toy.toml"
    cfg.write_text('[run]\nenvironment = "toy_1d"\niterations = 4\n')
    out = base / "run"
    assert main(["run", "--config", str(cfg), "--output-dir", str(out), "--plot"]) == 0
    return cfg, out


def test_run_writes_summary_and_plots(toy_dir, capsys):
    _, out = toy_dir
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 4 and summary["violations"] == 0
    svgs = sorted(p.name for p in (out / "plots").glob("*.svg"))
    assert "growth.svg" in svgs and len(svgs) >= 3


def test_plot_subcommand_writes_valid_svg(toy_dir, tmp_path, capsys):
    _, out = toy_dir
    assert main(["plot", str(out), "--output-dir", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.split()
    assert printed and all(p.endswith(".svg") for p in printed)
    for p in printed:
        root = ET.parse(p).getroot()
        assert root.tag.endswith("svg")


def test_plots_are_deterministic(toy_dir, tmp_path):
    _, out = toy_dir
    a = plot_run(out, tmp_path / "a")
    b = plot_run(out, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_plot_schema_errors(tmp_path):
    (tmp_path / "certificates").mkdir()
    with pytest.raises(SchemaError):
        plot_run(tmp_path)
    bad = tmp_path / "t.csv"
    bad.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError, match="missing"):
        read_table(bad, ["a", "c"])
    np_cols = read_table(bad, ["a"])
    assert np_cols["b"][0] == 2.0


def test_verify_subcommand(toy_dir, capsys):
    cfg, out = toy_dir
    code = main(["verify", "--config", str(cfg), "--checkpoint", str(out / "policy_final.txt"),
                 "--observations", str(out / "observations.csv")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["certified_cells"] > 0


def test_schema_subcommand(capsys):
    assert main(["schema"]) == 0
    assert "[run]" in capsys.readouterr().out


def test_baseline_subcommand(capsys):
    assert main(["baseline", "--instances", "3", "--seed", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]


def test_errors_exit_with_status_two(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nbogus = 1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["verify", "--checkpoint", str(tmp_path / "nope.txt")]) == 2
    assert "error:" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2

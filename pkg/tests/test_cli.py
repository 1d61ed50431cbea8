import csv
import json
import subprocess
import sys

import pytest

from conftest import all_sequences
from interpequiv import cli
from interpequiv.errors import AssumptionViolated
from interpequiv.experiment import CSV_HEADER
from interpequiv.rasp import builtin_source, compile_program, parse_program, CompileConfig


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Two compiled detectors at n=3, a task over all inputs, and two variant sets."""
    root = tmp_path_factory.mktemp("cli")
    for index in (0, 4):
        (root / f"p{index}.rasp").write_text(builtin_source(index, 3))
        assert cli.main(["rasp", "compile", str(root / f"p{index}.rasp"), "--max-len", "3",
                         "--out", str(root / f"m{index}.json"), "--json", str(root / f"c{index}.json")]) == 0
    c = compile_program(parse_program(builtin_source(0, 3)), CompileConfig(max_len=3))
    (root / "task.json").write_text(json.dumps(c.make_task(all_sequences(3)).to_json()))
    for index in (0, 4):
        assert cli.main(["gen-impls", "--model", str(root / f"m{index}.json"), "--task", str(root / "task.json"),
                         "--count", "4", "--seed", "1", "--out", str(root / "groups" / f"g{index}"),
                         "--json", str(root / f"gen{index}.json")]) == 0
    return root


def test_rasp_parse_and_run(tmp_path, capsys):
    prog = tmp_path / "p.rasp"
    prog.write_text(builtin_source(0, 3))
    code, out, _ = run(["rasp", "parse", prog], capsys)
    assert code == 0 and json.loads(out)["alphabet"] == ["1", "2", "3"]
    code, out, _ = run(["rasp", "run", prog, "--input", "3 1 2"], capsys)
    assert code == 0 and json.loads(out)["input"] == ["3", "1", "2"]


def test_rasp_syntax_error_exit(tmp_path, capsys):
    prog = tmp_path / "bad.rasp"
    prog.write_text("alphabet 1,2\nout = tokens +\n")
    code, _, err = run(["rasp", "parse", prog], capsys)
    assert code == 2 and "error" in err


def test_compile_and_generate(workspace):
    info = json.loads((workspace / "c0.json").read_text())
    assert info["layers"] >= 1
    assert json.loads((workspace / "gen4.json").read_text())["variants"] == 4


def test_reprs_and_reprdist(workspace, capsys):
    for index in (0, 4):
        code, _, _ = run(["reprs", "--model", workspace / f"m{index}.json", "--task", workspace / "task.json",
                          "--out", workspace / f"R{index}.bin"], capsys)
        assert code == 0
    code, out, _ = run(["reprdist", "--a", workspace / "R0.bin", "--b", workspace / "R0.bin"], capsys)
    assert code == 0 and json.loads(out)["d_repr"] <= 1e-9
    code, out, _ = run(["reprdist", "--a", workspace / "R0.bin", "--b", workspace / "R4.bin"], capsys)
    assert code == 0 and json.loads(out)["d_repr"] > 0


def test_congruity_command(workspace, capsys):
    code, out, _ = run(["congruity", "--a", workspace / "m0.json", "--b", workspace / "m4.json",
                        "--task", workspace / "task.json", "--rounds", "4", "--seed", "7"], capsys)
    doc = json.loads(out)
    assert code == 0 and doc["n_rounds"] + len(doc["failed_rounds"]) == 4
    assert 0.0 <= doc["score"] <= 1.0


def test_congruity_matrix_csv(workspace, capsys):
    out_csv = workspace / "matrix.csv"
    code, _, _ = run(["congruity-matrix", "--groups", workspace / "groups", "--rounds", "6", "--out", out_csv],
                     capsys)
    rows = list(csv.reader(out_csv.open()))
    assert code == 0 and tuple(rows[0]) == CSV_HEADER and len(rows) == 5


def test_equiv_command(workspace, capsys):
    code, out, _ = run(["equiv", "--set-a", workspace / "groups" / "g0", "--set-b", workspace / "groups" / "g4",
                        "--task", workspace / "task.json"], capsys)
    doc = json.loads(out)
    # both detectors decide correctly, so their outputs agree everywhere
    assert code == 0 and doc["d_interp"] == 0.0 and doc["slack"] == 0.0


def test_bounds_bundle_exit_codes(tmp_path, capsys):
    bundle = dict(d_interp=3.0, kappa_1=1.0, kappa_2=0.5, omega=0.1, d_repr=0.2,
                  delta_1=0.05, delta_2=0.05, Delta=0.3)
    path = tmp_path / "b.json"
    path.write_text(json.dumps(bundle))
    code, out, _ = run(["bounds", "--thm", "1", "--bundle", path], capsys)
    assert code == 4 and json.loads(out)["holds"] is False
    path.write_text(json.dumps({**bundle, "d_interp": 1.0}))
    assert run(["bounds", "--thm", "1", "--bundle", path], capsys)[0] == 0
    path.write_text(json.dumps({"d_interp": 1.0}))
    code, _, err = run(["bounds", "--thm", "1", "--bundle", path], capsys)
    assert code == 2 and "lacks" in err
    path.write_text(json.dumps({"within": [[0, 1], [1, 0]], "cross": [[5, 6], [5, 6]], "kappa": 1, "d_interp": 6}))
    assert run(["bounds", "--thm", "3", "--bundle", path], capsys)[0] == 0


def test_missing_files(tmp_path, capsys):
    assert run(["bounds", "--thm", "1", "--bundle", tmp_path / "none.json"], capsys)[0] == 2
    assert run(["report", tmp_path / "nowhere"], capsys)[0] == 2


def test_assumption_exit_code(monkeypatch, capsys):
    def fail(args):
        raise AssumptionViolated("readout error too large")

    monkeypatch.setattr(cli, "cmd_report", fail)
    assert run(["report", "anything"], capsys)[0] == 3


def test_calibrate_and_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 3, "interpretations": [1, 5], "variants": 3, "rounds": 5, "task_samples": 20}))
    code, out, _ = run(["calibrate", "--config", cfg, "--out", tmp_path / "cal"], capsys)
    assert code == 0 and json.loads(out)["names"]
    first = {p.name: p.read_bytes() for p in (tmp_path / "cal").iterdir()}
    assert set(first) == {"matrix.csv", "reports.json", "manifest.json"}
    assert run(["calibrate", "--config", cfg, "--out", tmp_path / "cal2"], capsys)[0] == 0
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "cal2").iterdir()}
    code, out, _ = run(["report", tmp_path / "cal"], capsys)
    assert code == 0 and "diagonal mean" in out
    assert (tmp_path / "cal" / "matrix.svg").read_text().startswith("<svg")


def test_invalid_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 2}))
    assert run(["calibrate", "--config", cfg, "--out", tmp_path / "x"], capsys)[0] == 2
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run(["calibrate", "--config", cfg, "--out", tmp_path / "x"], capsys)[0] == 2


def test_module_entry_point():
    result = subprocess.run([sys.executable, "-m", "interpequiv", "--help"], capture_output=True, text=True)
    assert result.returncode == 0 and "calibrate" in result.stdout

import json
from pathlib import Path

import numpy as np
import pytest

from perilayer import cli
from perilayer.cli import ConfigError, dispatch, parse_config_text, read_constants

ROOT = Path(__file__).resolve().parents[1]
BENCH = ROOT / "configs" / "benchmark.cfg"
EMPTY = ROOT / "configs" / "empty.cfg"

MINIMAL = """[perilayer]
schema = 1

[cell]
hole = disk
radius = 0.2
h = 1/32
"""


def test_parse_minimal():
    rc = parse_config_text(MINIMAL)
    assert rc.study.cell.hole.radius == 0.2
    assert rc.study.h_cell == pytest.approx(1 / 32)
    assert rc.study.deltas == (0.25, 0.125, 0.0625)
    assert rc.field_format == "vtk"


def test_parse_fractions_and_lists():
    rc = cli.load_config(BENCH)
    assert rc.study.deltas == (0.25, 0.125, 0.0625)
    assert rc.study.levels == ("2/3", "1", "4/3")
    assert rc.study.cell.hole.center == (0.5, 0.0)


def test_unknown_key_reports_line():
    text = MINIMAL + "radus = 0.3\n"
    with pytest.raises(ConfigError, match=r"cfg:8: unknown key 'radus' in \[cell\]"):
        parse_config_text(text, "x.cfg")


def test_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r"x.cfg:9: unknown section \[extra\]"):
        parse_config_text(MINIMAL + "\n[extra]\na = 1\n", "x.cfg")


@pytest.mark.parametrize("text", [
    "[cell]\nhole = disk\n",
    "[perilayer]\nschema = 2\n",
    "[perilayer]\nschema = 1\n[cell]\nhole = square\n",
    "[perilayer]\nschema = 1\n[cell]\nhole = polygon\n",
    "[perilayer]\nschema = 1\n[cell]\nradius = abc\n",
    "[perilayer]\nschema = 1\n[study]\ndeltas = 1/8, 1/4\n",
    "[perilayer]\nschema = 1\n[nearfield]\nR_max = 4\n",
    "[perilayer]\nschema = 1\n[output]\nformat = csv\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_polygon_hole():
    rc = parse_config_text("[perilayer]\nschema = 1\n[cell]\nhole = polygon\n"
                           "vertices = 0.3 -0.2; 0.7 -0.1; 0.4 0.3\n")
    assert len(rc.study.cell.hole.vertices) == 3


def test_hashes_track_sections():
    a = parse_config_text(MINIMAL)
    b = parse_config_text(MINIMAL + "\n[study]\nalpha = 0.1\n")
    assert a.config_hash != b.config_hash
    assert a.section_hash("cell") == b.section_hash("cell")


def test_usage_exit_codes(tmp_path, capsys):
    assert dispatch([]) == 2
    assert dispatch(["bogus", "--config", str(BENCH)]) == 2
    assert dispatch(["cell"]) == 2
    assert dispatch(["cell", "--config", str(BENCH), "--threads", "0"]) == 2


def test_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(MINIMAL + "radus = 0.3\n")
    assert dispatch(["cell", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert "bad.cfg:8: unknown key 'radus'" in capsys.readouterr().err
    assert dispatch(["cell", "--config", str(tmp_path / "missing.cfg")]) == 3


@pytest.fixture(scope="module")
def cell_run(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "small.cfg"
    cfg.write_text(MINIMAL + "\n[output]\nformat = xyz\nexport_fields = yes\n")
    out = tmp_path_factory.mktemp("cell")
    code = dispatch(["cell", "--config", str(cfg), "--out", str(out)])
    return cfg, out, code


def test_cell_command_outputs(cell_run):
    cfg, out, code = cell_run
    assert code == 0
    consts = read_constants(out / "constants.txt")
    assert float(consts["d_infinity"]) > 0
    assert "seconds" not in consts and "cell_config_hash" in consts
    man = json.loads((out / "manifest_cell.json").read_text())
    assert man["status"] == "ok" and man["command"] == "cell"
    assert "constants.txt" in man["outputs"]
    assert set(man["versions"]) >= {"numpy", "scipy", "perilayer"}
    xyz = sorted(out.glob("profile_*.xyz"))
    assert xyz
    data = np.loadtxt(xyz[0])
    assert data.shape[1] == 3 and np.all(np.isfinite(data))


def test_cell_rerun_identical_bytes(cell_run):
    cfg, out, _ = cell_run
    first = (out / "constants.txt").read_bytes()
    assert dispatch(["cell", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "constants.txt").read_bytes() == first


def test_constants_mismatch_is_numeric_error(cell_run, capsys):
    cfg, out, _ = cell_run
    path = out / "constants.txt"
    good = path.read_text()
    path.write_text(good.replace("d_infinity=", "d_infinity=9"))
    try:
        assert dispatch(["cell", "--config", str(cfg), "--out", str(out)]) == 4
    finally:
        path.write_text(good)


@pytest.mark.slow
def test_empty_study_exit_zero(tmp_path, capsys):
    assert dispatch(["study", "--config", str(EMPTY), "--out", str(tmp_path)]) == 0
    summary = (tmp_path / "summary.txt").read_text()
    assert "PASS empty hole" in summary
    assert "degenerate" in summary
    lines = (tmp_path / "convergence.csv").read_text().splitlines()
    assert lines[0] == "delta,level,l2,h1" and len(lines) == 10
    man = json.loads((tmp_path / "manifest_study.json").read_text())
    assert man["status"] == "ok" and man["checks"][0]["passed"]

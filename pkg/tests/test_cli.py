import asyncio
import json

import pytest

from main import build_parser, main
from services.conic_solver import INFEASIBLE, NUMERIC_FAILURE
from services.file_manager import ReportWriter, read_polygon_csv
from services.lv_flexibility import FlexibilityArea
from services.mv_robust_opf import MvOpfSolution
from tests.conftest import FIXTURES

TODAY = str(FIXTURES / "today.toml")


def cli(*argv):
    return asyncio.run(main(list(argv)))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli("run", "--config", TODAY, "--out", str(out), "--dump-program") == 0
    return out


def test_run_writes_outputs(run_dir, capsys):
    assert (run_dir / "report.json").exists()
    assert (run_dir / "report.meta.json").exists()
    assert (run_dir / "areas.json").exists()
    assert sorted(p.name for p in (run_dir / "areas").glob("M3_*.csv")) == [
        "M3_expected.csv", "M3_lower.csv", "M3_upper.csv",
    ]
    program = (run_dir / "program.txt").read_text(encoding="utf-8")
    assert program.startswith("# robust MV OPF, scenario today")
    assert program.rstrip().endswith("end")


def test_reports_are_byte_identical(run_dir, tmp_path):
    assert cli("run", "--config", TODAY, "--out", str(tmp_path)) == 0
    assert (tmp_path / "report.json").read_bytes() == (run_dir / "report.json").read_bytes()


def test_polygon_csv_round_trips(run_dir):
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    grid = next(g for g in report["areas"] if g["bus_id"] == "M3")
    frame = read_polygon_csv(run_dir / "areas" / "M3_expected.csv")
    assert list(frame.columns) == ["direction_deg", "p_pu", "q_pu"]
    vertices = [[p, q] for p, q in zip(frame["p_pu"], frame["q_pu"])]
    assert vertices == grid["realizations"]["expected"]["vertices"]


def test_sweep_then_opf_matches_run(run_dir, tmp_path):
    assert cli("sweep", "--config", TODAY, "--out", str(tmp_path)) == 0
    areas = tmp_path / "areas.json"
    assert areas.exists()
    opf_out = tmp_path / "opf"
    assert cli("opf", "--config", TODAY, "--areas", str(areas), "--out", str(opf_out)) == 0
    split = json.loads((opf_out / "report.json").read_text(encoding="utf-8"))
    whole = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert split["robust"]["objective"] == pytest.approx(whole["robust"]["objective"], abs=1e-9)
    assert split["summary"] == whole["summary"]


def test_opf_rejects_areas_on_another_base(tmp_path):
    areas = tmp_path / "areas.json"
    areas.write_text(json.dumps({"schema_version": 1, "s_base_mva": 10.0, "grids": []}), encoding="utf-8")
    assert cli("opf", "--config", TODAY, "--areas", str(areas), "--out", str(tmp_path / "o")) == 3


def test_missing_config_is_input_error(tmp_path, capsys):
    assert cli("run", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)) == 3
    assert "InputError" in capsys.readouterr().out


def test_out_of_range_override(tmp_path):
    assert cli("sweep", "--config", TODAY, "--alpha", "2", "--out", str(tmp_path)) == 3


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
    args = build_parser().parse_args(["run", "--config", "x.toml", "--gamma", "0.5"])
    assert args.gamma == 0.5 and args.alpha is None


def test_degenerate_area_writes_single_row(tmp_path):
    point = FlexibilityArea.from_points([(0.1, -0.02)], (0.1, -0.02), diagnostic="no flexible resources")
    written = asyncio.run(ReportWriter(tmp_path).emit_polygon_csv({"M3": {"expected": point}}))
    assert written == [tmp_path / "areas" / "M3_expected.csv"]
    frame = read_polygon_csv(written[0])
    assert len(frame) == 1
    assert frame["p_pu"].iloc[0] == 0.1
    assert frame["q_pu"].iloc[0] == -0.02
    assert frame["direction_deg"].isna().all()


@pytest.mark.parametrize("status,code,error", [
    (INFEASIBLE, 2, "InfeasibleError"),
    (NUMERIC_FAILURE, 4, "SolverError"),
])
def test_opf_failure_exit_codes(monkeypatch, tmp_path, capsys, status, code, error):
    monkeypatch.setattr("services.scenario.solve_mv_opf", lambda *args, **kwargs: MvOpfSolution(status=status))
    assert cli("run", "--config", TODAY, "--out", str(tmp_path)) == code
    assert error in capsys.readouterr().out
    assert not (tmp_path / "report.json").exists()

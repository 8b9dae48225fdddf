from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from riskplan.cli import EXIT_ARTIFACTS, EXIT_INVALID, EXIT_NO_PLAN, EXIT_OK, main
from riskplan.scenario import bundled_path

SHORT_GOAL = "bounds_m: [2.0, 2.4, 0.93, 1.07]"


@pytest.fixture(scope="module")
def short_scenario(tmp_path_factory) -> Path:
    """The bundled unicycle map with the goal 1.4 m down the bay."""
    text = bundled_path("unicycle-10x10").read_text()
    text = text.replace("bounds_m: [8.25, 9.75, 8.0, 9.5]", SHORT_GOAL)
    assert SHORT_GOAL in text
    path = tmp_path_factory.mktemp("scenario") / "short.yaml"
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def planned(short_scenario, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("plan")
    assert main(["plan", "--scenario", str(short_scenario), "--seed", "0", "--out", str(out)]) == EXIT_OK
    return out


def _bytes(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_plan_writes_artifacts(planned):
    names = {p.name for p in planned.iterdir()}
    assert {"manifest.json", "reference.csv", "tree.json", "scenario.yaml", "plan.svg"} <= names
    manifest = json.loads((planned / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["command"] == "plan"
    with open(planned / "reference.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["x_m"] == repr(0.6)


def test_plan_and_mc_are_byte_identical(short_scenario, tmp_path):
    args = ["--scenario", str(short_scenario), "--seed", "3", "--out", str(tmp_path)]
    assert main(["plan", *args]) == EXIT_OK
    first = _bytes(tmp_path)
    assert main(["plan", *args]) == EXIT_OK
    assert _bytes(tmp_path) == first
    assert main(["mc", *args, "--trials", "3"]) == EXIT_OK
    first = _bytes(tmp_path)
    assert main(["mc", *args, "--trials", "3"]) == EXIT_OK
    assert _bytes(tmp_path) == first


def test_mc_summary_matches_rows(short_scenario, planned, tmp_path):
    ref = str(planned / "reference.csv")
    out = tmp_path / "mc"
    code = main(["mc", "--scenario", str(short_scenario), "--reference", ref, "--trials", "4", "--seed", "10", "--out", str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    with open(out / "trials.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == summary["trials"] == 4
    assert [int(r["seed"]) for r in rows] == [10, 11, 12, 13]
    assert summary["collisions"] == sum(int(r["collided"]) for r in rows)
    assert summary["reached_goal"] == sum(int(r["reached_goal"]) for r in rows)


def test_track_writes_path(short_scenario, planned, tmp_path):
    ref = str(planned / "reference.csv")
    code = main(["track", "--scenario", str(short_scenario), "--reference", ref, "--out", str(tmp_path)])
    assert code == EXIT_OK
    header = (tmp_path / "track.csv").read_text().splitlines()[0]
    assert header.startswith("step,true_x_m,true_y_m,true_heading_rad,est_x_m")


def test_invalid_scenario_exit_code(tmp_path, capsys):
    text = bundled_path("unicycle-10x10").read_text()
    bad = tmp_path / "bad.yaml"
    bad.write_text(text.replace("  state_penalty: {diag: [100.0, 100.0, 0.0]}\n", "", 1))
    assert main(["plan", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INVALID
    assert "planning_controller.state_penalty" in capsys.readouterr().err


def test_no_plan_exit_code(tmp_path):
    assert main(["plan", "--scenario", "unicycle-10x10", "--iters", "1", "--out", str(tmp_path)]) == EXIT_NO_PLAN
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["goal_node"] is None


def test_missing_or_corrupt_reference(short_scenario, tmp_path):
    args = ["mc", "--scenario", str(short_scenario), "--trials", "1", "--out", str(tmp_path)]
    assert main(args) == EXIT_ARTIFACTS
    (tmp_path / "reference.csv").write_text("a,b\n1,2\n")
    assert main(args) == EXIT_ARTIFACTS


def test_zero_trials_rejected(short_scenario, planned, tmp_path):
    ref = str(planned / "reference.csv")
    code = main(["mc", "--scenario", str(short_scenario), "--reference", ref, "--trials", "0", "--out", str(tmp_path)])
    assert code == EXIT_INVALID


def test_report(short_scenario, planned, tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_ARTIFACTS
    assert main(["report", "--out", str(tmp_path / "missing")]) == EXIT_ARTIFACTS
    ref = str(planned / "reference.csv")
    for family in ("laplacian", "gaussian"):
        sub = tmp_path / f"{family}-1e-3"
        args = ["mc", "--scenario", str(short_scenario), "--reference", ref, "--trials", "2", "--out", str(sub)]
        assert main([*args, "--noise-scale", "1e-3", "--noise-family", family]) == EXIT_OK
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK
    first = (tmp_path / "report.md").read_bytes()
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "report.md").read_bytes() == first
    lines = first.decode().splitlines()
    assert len(lines) == 3 and lines[2].startswith("| 0.001 | 2 |")

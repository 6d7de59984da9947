import json
import os

import numpy as np
import pytest

from app.config import RunConfig
from app.processors.energy import Nonlinearity, Potential, Problem, SignClass
from app.processors.fields import RadialGrid, RadialProfile, ScalarField, gaussian, read_field
from app.processors.optimizer import SolutionRecord, failed_record
from app.processors.records import (
    RecordWriter,
    echo_config,
    load_config_echo,
    read_records,
    write_csv,
    write_profile_csv,
)


def _record(u: ScalarField, **overrides) -> SolutionRecord:
    values = dict(
        u=u,
        lam=-2.5,
        energy=1.25,
        constraint=1.0,
        residual=1e-10,
        gradient_norm=3.0,
        barycenter=(0.0, 0.5, -0.25),
        sign_class=SignClass.NEGATIVE,
        iterations=12,
        converged=True,
        c=1.0,
        tol=1e-8,
        start_index=0,
    )
    values.update(overrides)
    return SolutionRecord(**values)


def test_solution_line_references_field(tmp_path, small_grid):
    writer = RecordWriter(str(tmp_path))
    u = gaussian(small_grid)
    line = writer.write_solution(_record(u), cell={"eps": 0.5, "start": 2})
    assert line.field_path == os.path.join("fields", "u_eps0.5_start2.bpf")
    assert line.certified
    assert line.extra["violations"] == []
    back = read_field(os.path.join(tmp_path, line.field_path))
    assert np.array_equal(back.values, u.values)
    assert writer.count == 1


def test_records_round_trip(tmp_path, small_grid):
    writer = RecordWriter(str(tmp_path))
    writer.write_solution(_record(gaussian(small_grid)))
    writer.write_entry("gap", cell={"eps": 1.0}, h=0.125, barycenter_error=float("nan"))
    lines = read_records(writer.path)
    assert [line.kind for line in lines] == ["solution", "gap"]
    assert lines[0].lam == -2.5
    assert lines[0].barycenter == [0.0, 0.5, -0.25]
    assert lines[1].extra == {"h": 0.125, "barycenter_error": None}


def test_failed_record_is_written_without_field(tmp_path, small_grid, small_plan):
    P = Problem(small_grid, Potential.constant(1.0), eps=1.0, f=Nonlinearity(), c=1.0, plan=small_plan)
    rec = failed_record(P, gaussian(small_grid), 3, RuntimeError("boom"))
    writer = RecordWriter(str(tmp_path))
    line = writer.write_solution(rec)
    assert line.field_path is None
    assert line.energy is None and line.lam is None
    assert line.barycenter == [None, None, None]
    assert line.error == "RuntimeError: boom"
    assert not line.certified
    raw = json.loads(open(writer.path, encoding="utf-8").readline())
    assert raw["energy"] is None
    assert os.listdir(writer.fields_dir) == []


def test_flagged_record_lists_violations(tmp_path, small_grid):
    writer = RecordWriter(str(tmp_path))
    line = writer.write_solution(_record(gaussian(small_grid), lam=0.5, converged=False, status="max_iter"))
    assert not line.certified
    assert len(line.extra["violations"]) == 2


def test_writer_truncates_previous_run(tmp_path, small_grid):
    RecordWriter(str(tmp_path)).write_solution(_record(gaussian(small_grid)))
    writer = RecordWriter(str(tmp_path))
    assert read_records(writer.path) == []


def test_csv_tables(tmp_path):
    path = tmp_path / "tables" / "gap.csv"
    write_csv(str(path), ["eps", "h"], [[1.0, 0.5], [0.5, 0.25]])
    lines = path.read_text().splitlines()
    assert lines[0] == "eps,h"
    assert [float(x) for x in lines[2].split(",")] == [0.5, 0.25]

    grid = RadialGrid(16, 2.0)
    profile_path = tmp_path / "profile.csv"
    write_profile_csv(str(profile_path), RadialProfile(grid, -np.exp(-grid.r)))
    data = np.loadtxt(profile_path, delimiter=",", skiprows=1)
    assert data.shape == (grid.m + 1, 2)
    assert np.array_equal(data[:, 0], grid.r)


def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ValueError):
        write_csv(str(tmp_path / "bad.csv"), ["a", "b"], [[1.0, 2.0, 3.0]])


def test_config_echo(tmp_path):
    cfg = RunConfig.model_validate({"problem": {"eps": 0.5}, "seed": 7})
    path = echo_config(str(tmp_path / "run"), cfg)
    echoed = load_config_echo(path)
    assert echoed["problem"]["eps"] == 0.5
    assert echoed["seed"] == 7
    assert RunConfig.model_validate(echoed) == cfg

import os

import pytest

from app.config import load_run_config
from app.core import BPSolveApp, ExitCode, classify_trend, nearest_well
from app.main import main
from app.processors.energy import SignClass
from app.processors.records import load_config_echo, read_records

SMALL_SOLVE = """
[problem]
start_width = 1.0

[problem.grid]
n = 32
L = 10.0

[problem.potential]
kind = "constant"
V0 = 4.0

[solver]
sign_tol = 1e-3
"""

SMALL_RADIAL = """
[problem.potential]
V0 = 4.0

[radial]
m = 200
r_max = 12.0

[experiment]
c_list = [0.5, 1.0, 2.0]
"""


def _config(tmp_path, text: str, name: str = "run.toml") -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_bad_config_exits_with_config_code(tmp_path, capsys):
    path = _config(tmp_path, "[problem.nonlinearity]\np = 7.0\n")
    code = main(["solve", "--config", path, "--out", str(tmp_path / "out")])
    assert code == ExitCode.CONFIG
    assert "Invalid run configuration" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["solve", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == ExitCode.CONFIG


def test_solve_writes_record_and_field(tmp_path, capsys):
    out = tmp_path / "solve"
    code = main(["solve", "--config", _config(tmp_path, SMALL_SOLVE), "--out", str(out), "--seed", "5"])
    assert code == ExitCode.OK
    assert "solve: completed" in capsys.readouterr().out

    lines = read_records(str(out / "records.jsonl"))
    solution = lines[0]
    assert solution.certified
    assert solution.lam < 0 < solution.energy
    assert os.path.exists(out / solution.field_path)
    assert lines[1].kind == "energy_identity"
    assert load_config_echo(str(out / "config.json"))["seed"] == 5


def test_solve_is_deterministic(tmp_path):
    path = _config(tmp_path, SMALL_SOLVE)
    energies = []
    for name in ("a", "b"):
        assert main(["solve", "--config", path, "--out", str(tmp_path / name)]) == ExitCode.OK
        energies.append(read_records(str(tmp_path / name / "records.jsonl"))[0].energy)
    assert energies[0] == energies[1]


def test_autonomous_writes_profile(tmp_path):
    out = tmp_path / "auto"
    assert main(["autonomous", "--config", _config(tmp_path, SMALL_RADIAL), "--out", str(out)]) == ExitCode.OK
    header = (out / "autonomous_profile.csv").read_text().splitlines()[0]
    assert header == "r,u"
    [entry] = read_records(str(out / "records.jsonl"))
    assert entry.kind == "autonomous"
    assert entry.extra["nonpositive"] is True


def test_bifurcation_without_nonlinearity_is_flat(tmp_path):
    out = tmp_path / "bif"
    code = main(["bifurcation", "--config", _config(tmp_path, SMALL_RADIAL), "--out", str(out), "--threads", "2"])
    assert code == ExitCode.OK
    summary = read_records(str(out / "records.jsonl"))[-1]
    assert summary.kind == "bifurcation_summary"
    assert summary.extra["constant"] is True
    assert summary.extra["identity_ok"] is True
    # lambda_c = lambda_1 / sqrt(c) without a nonlinearity
    assert summary.extra["trend"] == "divergent"
    assert (out / "bifurcation.csv").exists()


def test_multiplicity_needs_wells(tmp_path, capsys):
    code = main(["multiplicity", "--config", _config(tmp_path, SMALL_SOLVE), "--out", str(tmp_path / "m")])
    assert code == ExitCode.CONFIG
    assert "multi_well" in capsys.readouterr().err


def test_nearest_well():
    assert nearest_well((0.9, 0.1, 0.0), [(-1.0, 0.0, 0.0), (1.0, 0.0, 0.0)]) == pytest.approx((1, 0.1414213562373095))


def test_trend_classification():
    assert classify_trend([0.25, 0.5], [-8.0, -4.0])["trend"] == "divergent"
    bounded = classify_trend([0.25, 0.5], [-2.0, -2.0])
    assert bounded["trend"] == "bounded"
    assert bounded["log_slope"] == 0.0


@pytest.mark.slow
def test_verify_quick(tmp_path):
    out = tmp_path / "verify"
    assert main(["verify", "--quick", "--out", str(out)]) == ExitCode.OK
    checks = read_records(str(out / "records.jsonl"))
    assert all(line.extra["passed"] for line in checks)


@pytest.mark.slow
def test_verify_flags_corrupted_kernel(tmp_path):
    path = _config(tmp_path, "[verify]\ncorrupt_kernel = true\nsymmetrization_profiles = 1\n")
    assert main(["verify", "--quick", "--config", path, "--out", str(tmp_path / "v")]) == ExitCode.VERIFY


DOUBLE_WELL = """
[problem.grid]
n = 40
L = 10.0

[problem.potential]
kind = "multi_well"
V0 = 4.0
kappa = 1.0
centers = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]

[solver]
sign_tol = 1e-3
max_iter = 1500

[radial]
m = 800
r_max = 16.0

[experiment]
eps_list = [1.0, 0.5]
cutoff_T = 0.8
high_energy_starts = 0

[morse]
k = 2
max_iter = 200
"""


def _radial_sweep(nonlinearity: str) -> str:
    return SMALL_RADIAL + f"\n[problem.nonlinearity]\n{nonlinearity}\n"


@pytest.mark.slow
def test_default_solve_certifies(tmp_path):
    out = tmp_path / "default"
    assert main(["solve", "--out", str(out)]) == ExitCode.OK
    [solution] = [line for line in read_records(str(out / "records.jsonl")) if line.kind == "solution"]
    assert solution.certified
    assert solution.extra["violations"] == []


@pytest.mark.slow
def test_one_sign_bifurcation_is_constant(tmp_path):
    out = tmp_path / "bif"
    path = _config(tmp_path, _radial_sweep('family = "one_sign_power"\np = 3.0'))
    assert main(["bifurcation", "--config", path, "--out", str(out)]) == ExitCode.OK
    summary = read_records(str(out / "records.jsonl"))[-1]
    # negative ground states never feel f
    assert summary.extra["constant"] is True
    assert summary.extra["identity_ok"] is True
    assert summary.extra["all_lambda_negative"] is True


@pytest.mark.slow
def test_odd_bifurcation_grows_strictly(tmp_path):
    out = tmp_path / "bif"
    path = _config(tmp_path, _radial_sweep('family = "odd_power"\np = 4.0'))
    assert main(["bifurcation", "--config", path, "--out", str(out)]) == ExitCode.OK
    lines = read_records(str(out / "records.jsonl"))
    summary = lines[-1]
    assert summary.extra["strictly_increasing"] is True
    assert summary.extra["identity_ok"] is True
    qs = [line.extra["q"] for line in lines if line.kind == "bifurcation_level"]
    assert all(b > a for a, b in zip(qs, qs[1:]))


@pytest.mark.slow
def test_multiplicity_on_double_well(tmp_path):
    cfg = load_run_config(_config(tmp_path, DOUBLE_WELL))
    out = str(tmp_path / "multi")
    result = BPSolveApp(seed=0, threads=2).multiplicity(cfg, out_dir=out)
    assert result["failures"] == []
    assert result["exit_code"] == ExitCode.OK

    hs = [entry["gap"].h for entry in result["per_eps"]]
    assert hs[1] < hs[0]

    gs = result["ground_state"]
    last = [(rec, info) for rec, info in result["per_eps"][-1]["solutions"] if rec.certified]
    assert len(last) >= 2
    for rec, info in last:
        assert rec.lam < 0
        assert rec.sign_class == SignClass.NEGATIVE
        assert rec.energy <= gs.energy + hs[1]
        assert info["barycenter_error"] < 0.2
        assert rec.morse_index == 0
        assert rec.spectrum is not None
    assert {info["well"] for _, info in last} == {0, 1}

    lines = read_records(os.path.join(out, "records.jsonl"))
    assert any(line.kind == "multiplicity_summary" for line in lines)
    assert all(line.morse_index is not None for line in lines if line.kind == "solution" and line.certified)

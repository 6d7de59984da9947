import numpy as np
import pytest

from app.processors.fields import RadialGrid
from app.processors.potential import bopp_podolsky_kernel
from app.processors.verification import VerificationSuite, corrupted_kernel, random_shell_profile

CHECKS = [
    "potential_oracle",
    "kernel_samples",
    "constraint_homogeneity",
    "potential_properties",
    "constraint_continuity",
    "radial_potential",
    "energy_gradient",
    "constraint_gradient",
    "hessian",
    "projection",
    "sign_laws",
    "odd_symmetry",
    "symmetrization",
]


@pytest.fixture(scope="module")
def quick_suite():
    return VerificationSuite(seed=0, quick=True, symmetrization_profiles=10)


def test_check_names(quick_suite):
    assert [name for name, _ in quick_suite.checks()] == CHECKS


@pytest.mark.parametrize("name", CHECKS)
def test_check_passes(quick_suite, name):
    check = dict(quick_suite.checks())[name]
    passed, detail = check()
    assert passed, detail


def test_corrupted_kernel_is_caught():
    suite = VerificationSuite(seed=0, quick=True, corrupt_kernel=True, symmetrization_profiles=1)
    results = {r.name: r for r in suite.run(progress=False)}
    assert not results["potential_oracle"].passed
    assert not results["kernel_samples"].passed
    assert results["symmetrization"].passed


def test_corrupted_kernel_scale():
    r = np.linspace(0.0, 5.0, 11)
    assert np.allclose(corrupted_kernel(r), 1.001 * bopp_podolsky_kernel(r), rtol=1e-15)


def test_run_reports_exceptions(quick_suite, monkeypatch):
    def broken():
        raise RuntimeError("no grid")

    monkeypatch.setattr(quick_suite, "checks", lambda: [("broken", broken)])
    [result] = quick_suite.run(progress=False)
    assert not result.passed
    assert result.detail == "RuntimeError: no grid"


def test_random_shell_profiles(rng):
    grid = RadialGrid(100, 10.0)
    values = random_shell_profile(grid, rng, shells=2)
    assert values.shape == (grid.m + 1,)
    assert values[-1] == 0.0
    assert np.all(values >= 0.0)

"""
Self-check suite behind the `verify` command: oracle equivalence, derivative
certification, potential properties, projection laws and the symmetrization inequality.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple
import logging
import time

import numpy as np
from tqdm import tqdm

from app.processors.concentration import symmetrization_test
from app.processors.energy import (
    Nonlinearity,
    Potential,
    PotentialKind,
    Problem,
    constraint_parts,
    energy,
    euclidean_gradient,
    constraint_gradient,
    functional_gradient,
    hessian_apply,
    lagrange_multiplier,
    norm_sq,
    project_to_manifold,
)
from app.processors.fields import (
    GridSpec,
    RadialGrid,
    RadialProfile,
    ScalarField,
    gaussian,
    gaussian_mixture,
    inner,
    l2_norm,
    lp_norm,
    roll_field,
)
from app.processors.potential import (
    KernelFunction,
    KernelPlan,
    bopp_podolsky_kernel,
    constraint_value,
    solve_potential,
    solve_potential_direct,
    solve_potential_radial,
)

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def corrupted_kernel(r: np.ndarray) -> np.ndarray:
    """Fault-injection kernel: the Bopp-Podolsky kernel off by one part in a thousand."""
    return 1.001 * bopp_podolsky_kernel(r)


class VerificationSuite:
    def __init__(
        self,
        seed: int = 0,
        quick: bool = False,
        corrupt_kernel: bool = False,
        symmetrization_profiles: int = 50,
    ):
        self.seed = seed
        self.quick = quick
        self.kernel: KernelFunction = corrupted_kernel if corrupt_kernel else bopp_podolsky_kernel
        self.symmetrization_profiles = symmetrization_profiles
        self.n = 12 if quick else 16
        self.grid = GridSpec(self.n, 6.0)
        self.plan = KernelPlan.build(self.grid, kernel=self.kernel)

    def _rng(self, offset: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, offset])

    def _problem(self, family: str = "odd_power", kind: str = "multi_well") -> Problem:
        if kind == "multi_well":
            V = Potential(kind=PotentialKind.MULTI_WELL, V0=1.0, centers=((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0)), kappa=0.5)
        else:
            V = Potential.constant(1.0)
        return Problem(self.grid, V, eps=1.0, f=Nonlinearity(family, p=4.0, a=1.0), c=1.0, plan=self.plan)

    # --- bp_potential ---

    def check_potential_oracle(self) -> Tuple[bool, str]:
        sizes = [12] if self.quick else [12, 16]
        worst = 0.0
        for i, n in enumerate(sizes):
            grid = GridSpec(n, 6.0)
            plan = self.plan if n == self.n else KernelPlan.build(grid, kernel=self.kernel)
            u = ScalarField(grid, self._rng(10 + i).standard_normal(grid.shape))
            fast = solve_potential(plan, u).values
            direct = solve_potential_direct(u).values
            worst = max(worst, float(np.max(np.abs(fast - direct)) / np.max(np.abs(direct))))
        return worst <= 1e-10, f"max relative error {worst:.2e} on n={sizes}"

    def check_kernel_samples(self) -> Tuple[bool, str]:
        r = np.linspace(0.0, 50.0, 2001)
        k = self.kernel(r)
        ok = k[0] == 1.0 and np.all(k > 0) and np.all(k <= 1.0) and np.all(np.diff(k) < 0)
        return bool(ok), f"K(0)={k[0]!r}, min={k.min():.3e}"

    def check_homogeneity(self) -> Tuple[bool, str]:
        u = gaussian_mixture(self.grid, self._rng(20))
        G = constraint_value(self.plan, u)
        worst = max(abs(constraint_value(self.plan, u.scaled(t)) - t ** 4 * G) / (t ** 4 * G) for t in (0.5, 2.0, 3.0))
        return worst <= 1e-12, f"max relative error {worst:.2e}"

    def check_potential_properties(self) -> Tuple[bool, str]:
        u = gaussian_mixture(self.grid, self._rng(30), spread=0.15)
        inner_box = np.zeros(self.grid.shape)
        inner_box[3:-3, 3:-3, 3:-3] = 1.0
        u = u.with_values(u.values * inner_box)
        phi = solve_potential(self.plan, u).values
        shift = (2, 1, 0)
        moved = solve_potential(self.plan, roll_field(u, shift)).values
        expected = np.roll(phi, shift, axis=(0, 1, 2))
        core = moved[2:, 1:, :] - expected[2:, 1:, :]
        covariance = float(np.max(np.abs(core)) / np.max(phi))
        ok = float(phi.min()) >= 0.0 and covariance <= 1e-12
        return ok, f"min phi {phi.min():.2e}, shift error {covariance:.2e}"

    def check_continuity(self) -> Tuple[bool, str]:
        rng = self._rng(40)
        u = gaussian_mixture(self.grid, rng)
        w = u.with_values(0.3 * u.values + 0.05 * gaussian_mixture(self.grid, rng).values)
        G = constraint_value(self.plan, u)
        diffs, ratios = [], []
        for j in range(10):
            uk = u.with_values(u.values + w.values / 10.0 ** j)
            d = abs(constraint_value(self.plan, uk) - G)
            dens = uk.with_values(uk.values ** 2 - u.values ** 2)
            diffs.append(d)
            ratios.append(d / lp_norm(dens, 6.0 / 5.0))
        bounded = all(r <= 4.0 * ratios[0] for r in ratios)
        monotone = all(b <= a for a, b in zip(diffs, diffs[1:]))
        converged = diffs[-1] <= 1e-8 * G
        return bounded and monotone and converged, f"last |dG|/G {diffs[-1] / G:.2e}, max ratio/first {max(ratios) / ratios[0]:.2f}"

    def check_radial_potential(self) -> Tuple[bool, str]:
        radial = RadialGrid(2400, 12.0)
        profile = RadialProfile(radial, np.exp(-radial.r ** 2))
        phi_r = solve_potential_radial(profile).values
        errors = []
        for n in (16, 32):
            grid = GridSpec(n, 4.0)
            u = gaussian(grid, width=np.sqrt(0.5), amplitude=1.0)
            phi = solve_potential(KernelPlan.build(grid, kernel=self.kernel), u).values
            c = grid.n // 2
            ref = np.interp(grid.axis[c:], radial.r, phi_r)
            errors.append(float(np.max(np.abs(phi[c:, c, c] - ref)) / np.max(np.abs(ref))))
        coarse, fine = errors
        # O(h^4) from the kernel kink: halving h divides the mismatch by about 16
        ok = coarse <= 3e-2 and fine <= 4e-3 and coarse >= 8.0 * fine
        return ok, f"max relative mismatch {coarse:.2e} (h=0.5), {fine:.2e} (h=0.25)"

    # --- energy ---

    def check_energy_gradient(self) -> Tuple[bool, str]:
        P = self._problem()
        rng = self._rng(50)
        u, v = gaussian_mixture(self.grid, rng), gaussian_mixture(self.grid, rng)
        d = 1e-5
        fd = (energy(P, u.with_values(u.values + d * v.values)) - energy(P, u.with_values(u.values - d * v.values))) / (2 * d)
        exact = inner(euclidean_gradient(P, u), v)
        err = abs(fd - exact) / abs(exact)
        return err <= 1e-6, f"relative error {err:.2e}"

    def check_constraint_gradient(self) -> Tuple[bool, str]:
        P = self._problem()
        rng = self._rng(60)
        u, v = gaussian_mixture(self.grid, rng), gaussian_mixture(self.grid, rng)
        d = 1e-5
        fd = (
            constraint_value(P.plan, u.with_values(u.values + d * v.values))
            - constraint_value(P.plan, u.with_values(u.values - d * v.values))
        ) / (2 * d)
        exact = 4.0 * inner(constraint_gradient(P, u), v)
        err = abs(fd - exact) / abs(exact)
        return err <= 1e-6, f"relative error {err:.2e}"

    def check_hessian(self) -> Tuple[bool, str]:
        P = self._problem()
        rng = self._rng(70)
        u, v, w = (gaussian_mixture(self.grid, rng) for _ in range(3))
        lam = lagrange_multiplier(P, u)

        def lagrangian_gradient(x: np.ndarray) -> np.ndarray:
            _, b, _ = constraint_parts(P, x)
            return functional_gradient(P, x) + lam * b

        d = 1e-5
        fd = (lagrangian_gradient(u.values + d * v.values) - lagrangian_gradient(u.values - d * v.values)) / (2 * d)
        Hv = hessian_apply(P, u, lam, v)
        err = l2_norm(Hv.with_values(Hv.values - fd)) / l2_norm(Hv)
        Hw = hessian_apply(P, u, lam, w)
        a, b = inner(Hv, w), inner(v, Hw)
        sym = abs(a - b) / max(abs(a), abs(b))
        return err <= 1e-5 and sym <= 1e-11, f"fd error {err:.2e}, symmetry {sym:.2e}"

    def check_projection(self) -> Tuple[bool, str]:
        P = self._problem()
        u = gaussian_mixture(self.grid, self._rng(80))
        t, tu = project_to_manifold(P, u)
        t_neg, _ = project_to_manifold(P, -u)
        G = constraint_value(P.plan, tu)
        quad = project_to_manifold(P.with_level(constraint_value(P.plan, u) / 16.0), u)[0]
        err = abs(G - P.c) / P.c
        ok = err <= 1e-10 and t == t_neg and abs(quad - 0.5) <= 1e-12
        return ok, f"|G-c|/c {err:.2e}, t(16c) {quad:.15f}"

    def check_sign_laws(self) -> Tuple[bool, str]:
        P = self._problem("one_sign_power")
        rng = self._rng(90)
        worst_lam = -np.inf
        bound_ok = True
        for _ in range(20):
            u = gaussian_mixture(self.grid, rng)
            worst_lam = max(worst_lam, lagrange_multiplier(P, u))
            I = energy(P, u)
            half = 0.5 * norm_sq(P, u)
            bound_ok &= I >= half >= 0.5 * P.V0 * l2_norm(u) ** 2 * (1 - 1e-12)
            neg = u.with_values(-np.abs(u.values))
            bound_ok &= energy(P, neg) == 0.5 * norm_sq(P, neg)
        return bool(worst_lam < 0 and bound_ok), f"max lambda {worst_lam:.3e}"

    def check_odd_symmetry(self) -> Tuple[bool, str]:
        P = self._problem("odd_power")
        u = gaussian_mixture(self.grid, self._rng(100))
        a = abs(u.values)
        diff = abs(energy(P, u) - energy(P, -u))
        diff_abs = abs(energy(P, u.with_values(a)) - energy(P, u.with_values(-a)))
        scale = abs(energy(P, u))
        ok = diff <= 1e-14 * scale and diff_abs <= 1e-14 * scale
        return ok, f"|I(u)-I(-u)| {diff:.1e}, |I(|u|)-I(-|u|)| {diff_abs:.1e}"

    # --- concentration ---

    def check_symmetrization(self) -> Tuple[bool, str]:
        grid = RadialGrid(400 if self.quick else 800, 12.0)
        rng = self._rng(110)
        failures = 0
        for _ in range(self.symmetrization_profiles):
            values = random_shell_profile(grid, rng)
            if not symmetrization_test(values, grid):
                failures += 1
        return failures == 0, f"{failures} of {self.symmetrization_profiles} profiles violate E(t* u*) <= E(u)"

    def checks(self) -> List[Tuple[str, Callable[[], Tuple[bool, str]]]]:
        return [
            ("potential_oracle", self.check_potential_oracle),
            ("kernel_samples", self.check_kernel_samples),
            ("constraint_homogeneity", self.check_homogeneity),
            ("potential_properties", self.check_potential_properties),
            ("constraint_continuity", self.check_continuity),
            ("radial_potential", self.check_radial_potential),
            ("energy_gradient", self.check_energy_gradient),
            ("constraint_gradient", self.check_constraint_gradient),
            ("hessian", self.check_hessian),
            ("projection", self.check_projection),
            ("sign_laws", self.check_sign_laws),
            ("odd_symmetry", self.check_odd_symmetry),
            ("symmetrization", self.check_symmetrization),
        ]

    def run(self, progress: bool = True) -> List[CheckResult]:
        results = []
        checks = self.checks()
        for name, check in tqdm(checks, desc="Verify", unit="check", colour="cyan", disable=not progress):
            start = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as e:
                passed, detail = False, f"{type(e).__name__}: {e}"
            elapsed = time.perf_counter() - start
            if not passed:
                logger.error(f"[Verify] {name} failed: {detail}")
            results.append(CheckResult(name, bool(passed), detail, elapsed))
        return results


def random_shell_profile(grid: RadialGrid, rng: np.random.Generator, shells: Optional[int] = None) -> np.ndarray:
    """Nonnegative radial data made of off-centre Gaussian shells, zero at r_max."""
    count = shells or int(rng.integers(1, 4))
    values = np.zeros(grid.m + 1)
    for _ in range(count):
        center = rng.uniform(1.0, 0.4 * grid.r_max)
        width = rng.uniform(0.4, 1.2)
        values += rng.uniform(0.5, 1.5) * np.exp(-((grid.r - center) ** 2) / (2.0 * width ** 2))
    values[-1] = 0.0
    return values

"""
Concentration machinery: the autonomous radial ground state, the cutoff bridge,
localized bumps projected onto the constraint, the truncated barycenter and the
diagnostics comparing 3D solutions with the radial profile.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solveh_banded

from app.config import SolveConfig
from app.errors import DegenerateInputError, GeometryError
from app.processors.energy import (
    Nonlinearity,
    Problem,
    constraint_parts,
    energy,
    functional_energy,
    project_to_manifold,
)
from app.processors.fields import (
    GridSpec,
    RadialGrid,
    RadialProfile,
    ScalarField,
    half_mass_radius,
)
from app.processors.optimizer import descend, stationarity
from app.processors.potential import radial_kernel

logger = logging.getLogger(__name__)

Vector3 = Tuple[float, float, float]
SUPPORT_LEVEL = 1e-8


@dataclass(frozen=True)
class CutoffSpec:
    """eta(s) = 1 on [0, T/2], 0 on [T, inf), quintic smootherstep in between."""

    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"Cutoff radius must be positive, got T={self.T}")

    def eta(self, s: np.ndarray) -> np.ndarray:
        half = 0.5 * self.T
        x = np.clip((np.asarray(s, dtype=np.float64) - half) / half, 0.0, 1.0)
        return 1.0 - x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


# --- radial model ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RadialModel:
    """Radial discretization of the autonomous problem with V = mu; Dirichlet at r_max."""

    grid: RadialGrid
    mu: float
    f: Nonlinearity
    c: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.c > 0:
            raise ValueError(f"Constraint level c must be positive, got {self.c}")

    @cached_property
    def stiffness(self) -> np.ndarray:
        # 4 pi r_{j+1/2}^2 / dr on each of the m intervals
        mid = self.grid.r[:-1] + 0.5 * self.grid.dr
        return 4.0 * np.pi * mid ** 2 / self.grid.dr

    @cached_property
    def _banded(self) -> np.ndarray:
        a = self.stiffness
        m = self.grid.m
        diag = np.zeros(m)
        diag += a
        diag[1:] += a[:-1]
        diag += self.mu * self.grid.weights[:m]
        ab = np.zeros((2, m))
        ab[0, 1:] = -a[: m - 1]
        ab[1] = diag
        return ab

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.dot(self.grid.weights, a * b))

    def integrate(self, a: np.ndarray) -> float:
        return float(np.dot(self.grid.weights, a))

    def apply_linear(self, u: np.ndarray) -> np.ndarray:
        flux = self.stiffness * np.diff(u)
        Su = np.zeros_like(u)
        Su[:-1] -= flux
        Su[1:] += flux
        out = Su / self.grid.weights + self.mu * u
        out[-1] = 0.0
        return out

    def precondition(self, v: np.ndarray) -> np.ndarray:
        m = self.grid.m
        out = np.zeros_like(v)
        out[:m] = solveh_banded(self._banded, self.grid.weights[:m] * v[:m])
        return out

    def convolve(self, density: np.ndarray) -> np.ndarray:
        return radial_kernel(self.grid).convolve(density)


@dataclass(frozen=True, eq=False)
class AutonomousGroundState:
    mu: float
    c: float
    f: Nonlinearity
    profile: RadialProfile
    energy: float
    lam: float
    residual: float
    gradient_norm: float
    norm_sq: float
    iterations: int
    converged: bool
    tol: float
    status: str = "converged"

    @property
    def certified(self) -> bool:
        return self.converged and self.residual <= self.tol * max(1.0, self.gradient_norm)

    @property
    def positive_part(self) -> float:
        """max(u) / max|u|; rounding dust above zero stays below the sign tolerance."""
        values = self.profile.values
        top = float(np.max(np.abs(values)))
        return max(float(np.max(values)), 0.0) / top if top > 0 else 0.0

    @property
    def half_mass_radius(self) -> float:
        return half_mass_radius(self.profile)

    @property
    def energy_identity_gap(self) -> Optional[float]:
        """|E - norm^2 / 2|, defined when F vanishes on the (nonpositive) profile."""
        if not self.f.vanishes_on_nonpositive:
            return None
        return abs(self.energy - 0.5 * self.norm_sq)

    @cached_property
    def _spline(self) -> CubicSpline:
        return CubicSpline(self.profile.grid.r, self.profile.values, bc_type=((1, 0.0), "natural"))

    def value_at(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        out = np.zeros_like(r)
        inside = r <= self.profile.grid.r_max
        out[inside] = self._spline(r[inside])
        return out

    @cached_property
    def support_radius(self) -> float:
        values = np.abs(self.profile.values)
        above = np.nonzero(values > SUPPORT_LEVEL * values.max())[0]
        if above.size == 0:
            return 0.0
        last = min(above[-1] + 1, self.profile.grid.m)
        return float(self.profile.grid.r[last])


def autonomous_ground_state(
    mu: float,
    f: Nonlinearity,
    c: float,
    grid: RadialGrid,
    cfg: SolveConfig,
    start_width: float = 1.5,
) -> AutonomousGroundState:
    model = RadialModel(grid, mu, f, c)
    u0 = -np.exp(-grid.r ** 2 / (2.0 * start_width ** 2))
    u0[-1] = 0.0

    result = descend(model, u0, cfg)
    u = result.u
    if np.sum(grid.weights * u) > 0 and f.is_odd:
        # g and b are odd in u, so lambda and the residual carry over
        u = -u
    lam, res, gnorm = stationarity(model, u)

    norm_sq = model.inner(model.apply_linear(u), u)
    E = functional_energy(model, u)
    gs = AutonomousGroundState(
        mu=mu,
        c=c,
        f=f,
        profile=RadialProfile(grid, u),
        energy=E,
        lam=lam,
        residual=res,
        gradient_norm=gnorm,
        norm_sq=norm_sq,
        iterations=result.iterations,
        converged=result.converged,
        tol=cfg.tol_residual,
        status=result.status,
    )
    logger.info(
        f"[Autonomous] mu={mu} c={c}: E={E:.10g}, lambda={lam:.10g}, "
        f"residual={res:.2e} after {result.iterations} iterations"
    )
    return gs


# --- symmetrization ---------------------------------------------------------------------


def rearrange_decreasing(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Decreasing rearrangement of nonnegative radial data with respect to volume weights:
    the value at a node is the level whose superlevel set fills the same volume.
    """
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    sorted_values = values[order]
    sorted_mid = np.cumsum(weights[order]) - 0.5 * weights[order]
    node_mid = np.cumsum(weights) - 0.5 * weights
    return np.interp(node_mid, sorted_mid, sorted_values)


@dataclass(frozen=True)
class SymmetrizationOutcome:
    passed: bool
    energy_before: float
    energy_after: float
    t_star: float

    def __bool__(self) -> bool:
        return self.passed


def symmetrization_test(
    values: np.ndarray,
    grid: RadialGrid,
    mu: float = 1.0,
    f: Optional[Nonlinearity] = None,
    c: float = 1.0,
    slack: float = 1e-10,
) -> SymmetrizationOutcome:
    """Checks E(t_* u*) <= E(u) for |u| placed on the constraint; Dirichlet node forced to 0."""
    model = RadialModel(grid, mu, f or Nonlinearity(), c)
    u = np.abs(np.asarray(values, dtype=np.float64)).copy()
    u[-1] = 0.0

    _, _, G = constraint_parts(model, u)
    if not G > 0:
        raise DegenerateInputError("Symmetrization needs a nonzero profile")
    u *= (c / G) ** 0.25

    star = rearrange_decreasing(u, grid.weights)
    star[-1] = 0.0
    _, _, G_star = constraint_parts(model, star)
    t_star = (c / G_star) ** 0.25

    before = functional_energy(model, u)
    after = functional_energy(model, t_star * star)
    return SymmetrizationOutcome(after <= before + slack, before, after, t_star)


# --- bumps and barycenters ----------------------------------------------------------------


def _support_fits(grid: GridSpec, center: np.ndarray, R: float) -> bool:
    return bool(np.all(center - R >= -grid.L) and np.all(center + R <= grid.L - grid.h))


def make_bump(
    gs: AutonomousGroundState, eps: float, y: Sequence[float], cut: CutoffSpec, grid: GridSpec
) -> ScalarField:
    """Psi(x) = eta(|eps x - y|) u(|x - y / eps|), clipped to be nonpositive."""
    center = np.asarray(y, dtype=np.float64) / eps
    R = min(cut.T / eps, gs.support_radius)
    if not _support_fits(grid, center, R):
        raise GeometryError(
            f"Bump at y={tuple(y)} with eps={eps} needs radius {R:.3f} around {center.tolist()}, "
            f"box is [{-grid.L}, {grid.L - grid.h}]"
        )
    X, Y, Z = grid.mesh()
    r = np.sqrt((X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2)
    values = np.where(r <= R, gs.value_at(r) * cut.eta(eps * r), 0.0)
    return ScalarField(grid, np.minimum(values, 0.0))


def make_phi(P: Problem, gs: AutonomousGroundState, y: Sequence[float], cut: CutoffSpec) -> ScalarField:
    bump = make_bump(gs, P.eps, y, cut, P.grid)
    _, phi = project_to_manifold(P, bump)
    return phi


def barycenter(u: ScalarField, eps: float, rho: float) -> Vector3:
    """u^2-weighted mean of chi(eps x); chi is the identity on |x| <= rho, radially clipped beyond."""
    weight = u.values ** 2
    total = float(np.sum(weight))
    if total == 0:
        raise DegenerateInputError("Barycenter of the zero field is undefined")
    X, Y, Z = u.grid.mesh()
    X, Y, Z = eps * X, eps * Y, eps * Z
    norm = np.sqrt(X ** 2 + Y ** 2 + Z ** 2)
    scale = np.where(norm > rho, rho / np.where(norm > 0, norm, 1.0), 1.0)
    return tuple(float(np.sum(weight * scale * A) / total) for A in (X, Y, Z))


def barycenter_radius(centers: Sequence[Vector3], T: float) -> float:
    """rho such that the 2T-neighbourhood of the well set lies inside B_rho."""
    reach = max((float(np.linalg.norm(c)) for c in centers), default=0.0)
    return reach + 2.0 * T


def default_cutoff(
    gs: AutonomousGroundState,
    centers: Sequence[Vector3],
    eps_list: Sequence[float],
    grid: GridSpec,
) -> float:
    """min(4 R_half, quarter of the closest well separation, largest T whose bumps fit the box)."""
    candidates = [4.0 * gs.half_mass_radius]
    pts = [np.asarray(c, dtype=np.float64) for c in centers]
    separations = [
        float(np.linalg.norm(a - b)) for i, a in enumerate(pts) for b in pts[i + 1:]
    ]
    if separations:
        candidates.append(0.25 * min(separations))
    reach = max((float(np.max(np.abs(p))) for p in pts), default=0.0)
    candidates.append(min(eps * (grid.L - grid.h) - reach for eps in eps_list))
    T = min(candidates)
    if not T > 0:
        raise GeometryError(f"No cutoff radius fits: candidates {candidates}")
    return T


@dataclass
class WellSample:
    y: Vector3
    energy: float
    barycenter: Vector3
    barycenter_error: float


@dataclass
class ConcentrationGap:
    eps: float
    h: float
    samples: List[WellSample] = field(default_factory=list)

    @property
    def max_barycenter_error(self) -> float:
        return max(s.barycenter_error for s in self.samples)


def concentration_gap(
    P: Problem, gs: AutonomousGroundState, wells: Sequence[Vector3], cut: CutoffSpec
) -> ConcentrationGap:
    """h(eps) = max over the wells of |I(Phi(y)) - E(ground state)|, with the bump barycenters."""
    samples = []
    for y in wells:
        phi = make_phi(P, gs, y, cut)
        beta = barycenter(phi, P.eps, P.barycenter_radius)
        samples.append(
            WellSample(
                y=tuple(y),
                energy=energy(P, phi),
                barycenter=beta,
                barycenter_error=float(np.linalg.norm(np.subtract(beta, y))),
            )
        )
    h = max(abs(s.energy - gs.energy) for s in samples)
    return ConcentrationGap(eps=P.eps, h=h, samples=samples)


# --- comparison with the radial profile -----------------------------------------------------


def _oriented(u: ScalarField, f: Nonlinearity) -> np.ndarray:
    if f.is_odd and np.sum(u.values) > 0:
        return -u.values
    return u.values


def _reference(gs: AutonomousGroundState, grid: GridSpec, center: Sequence[float]) -> np.ndarray:
    X, Y, Z = grid.mesh()
    r = np.sqrt((X - center[0]) ** 2 + (Y - center[1]) ** 2 + (Z - center[2]) ** 2)
    return gs.value_at(r)


def recentred_distance(u: ScalarField, gs: AutonomousGroundState, center: Sequence[float]) -> float:
    """Relative L2 distance between u and the radial profile centred at a grid point."""
    ref = _reference(gs, u.grid, center)
    scale = math.sqrt(float(np.sum(ref ** 2)))
    if scale == 0:
        raise DegenerateInputError("Ground-state profile vanishes on this grid")
    return math.sqrt(float(np.sum((_oriented(u, gs.f) - ref) ** 2))) / scale


def radial_deviation(u: ScalarField, gs: AutonomousGroundState, center: Sequence[float]) -> float:
    """max |u(x) - u_radial(|x - center|)| / max |u_radial|."""
    ref = _reference(gs, u.grid, center)
    top = float(np.max(np.abs(gs.profile.values)))
    if top == 0:
        raise DegenerateInputError("Ground-state profile vanishes")
    return float(np.max(np.abs(_oriented(u, gs.f) - ref))) / top

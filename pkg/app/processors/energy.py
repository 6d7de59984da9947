"""
Energy functional, its variations, the constraint projection and the Lagrange multiplier.

The array-level helpers work on any discretization exposing the VariationalModel
protocol (the 3D Problem here, the radial model of the autonomous problem elsewhere).
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Tuple

import numpy as np

from app.errors import DegenerateInputError, DimensionError, PreconditionError
from app.processors.fields import (
    GridSpec,
    ScalarField,
    neg_laplacian,
    solve_shifted_laplacian,
)
from app.processors.potential import KernelPlan


Vector3 = Tuple[float, float, float]


class Family(str, Enum):
    ZERO = "zero"
    ONE_SIGN_POWER = "one_sign_power"
    ODD_POWER = "odd_power"


@dataclass(frozen=True)
class Nonlinearity:
    family: Family = Family.ZERO
    p: float = 4.0
    a: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if not 2.0 < self.p < 6.0:
            raise ValueError(f"Exponent p must lie in (2, 6), got {self.p}")
        if self.a < 0:
            raise ValueError(f"Amplitude a must be nonnegative, got {self.a}")

    @property
    def active(self) -> bool:
        return self.family != Family.ZERO and self.a > 0

    @property
    def vanishes_on_nonpositive(self) -> bool:
        return self.family != Family.ODD_POWER or not self.active

    @property
    def is_odd(self) -> bool:
        return self.family != Family.ONE_SIGN_POWER or not self.active

    def _base(self, u: np.ndarray) -> np.ndarray:
        if self.family == Family.ONE_SIGN_POWER:
            return np.maximum(u, 0.0)
        return np.abs(u)

    def f(self, u: np.ndarray) -> np.ndarray:
        if not self.active:
            return np.zeros_like(u)
        base = self._base(u)
        if self.family == Family.ONE_SIGN_POWER:
            return self.a * base ** (self.p - 1.0)
        return self.a * base ** (self.p - 2.0) * u

    def F(self, u: np.ndarray) -> np.ndarray:
        if not self.active:
            return np.zeros_like(u)
        return (self.a / self.p) * self._base(u) ** self.p

    def f_prime(self, u: np.ndarray) -> np.ndarray:
        if not self.active:
            return np.zeros_like(u)
        return self.a * (self.p - 1.0) * self._base(u) ** (self.p - 2.0)

    def F_increment(self, u: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """F(u + delta) - F(u) without cancellation where u and u + delta share a sign."""
        if not self.active:
            return np.zeros_like(u)
        new = u + delta
        out = self.F(new) - self.F(u)
        same = (u * new > 0) & (np.abs(delta) < np.abs(u))
        if self.family == Family.ONE_SIGN_POWER:
            same &= u > 0
        if np.any(same):
            old = np.abs(u[same])
            ratio = np.sign(u[same]) * delta[same] / old
            out[same] = (self.a / self.p) * old ** self.p * np.expm1(self.p * np.log1p(ratio))
        return out


class PotentialKind(str, Enum):
    CONSTANT = "constant"
    MULTI_WELL = "multi_well"
    RADIAL_COERCIVE = "radial_coercive"
    USER_FIELD = "user_field"


@dataclass(frozen=True, eq=False)
class Potential:
    kind: PotentialKind = PotentialKind.CONSTANT
    V0: float = 1.0
    centers: Tuple[Vector3, ...] = ()
    kappa: float = 1.0
    well_radius: Optional[float] = None
    values: Optional[ScalarField] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PotentialKind(self.kind))
        object.__setattr__(self, "centers", tuple(tuple(float(x) for x in c) for c in self.centers))
        if self.kind == PotentialKind.USER_FIELD:
            if self.values is None:
                raise ValueError("user_field potential needs sampled values")
            object.__setattr__(self, "V0", float(np.min(self.values.values)))
        if not self.V0 > 0:
            raise ValueError(f"inf V must be positive, got V0={self.V0}")
        if self.kind == PotentialKind.MULTI_WELL and not self.centers:
            raise ValueError("multi_well potential needs at least one center")

    @classmethod
    def constant(cls, mu: float) -> "Potential":
        return cls(kind=PotentialKind.CONSTANT, V0=mu)

    def squared_distance(self, X: np.ndarray, Y: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """Smoothed squared distance to the well set: 1 / sum_i |x - y_i|^{-2}, zero at the wells."""
        inv = np.zeros_like(X)
        hit = np.zeros(X.shape, dtype=bool)
        for cx, cy, cz in self.centers:
            sq = (X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2
            hit |= sq == 0
            with np.errstate(divide="ignore"):
                inv += np.where(sq > 0, 1.0 / np.where(sq > 0, sq, 1.0), 0.0)
        out = np.where(hit, 0.0, 1.0 / np.where(inv > 0, inv, 1.0))
        return out

    def evaluate(self, X: np.ndarray, Y: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """V at physical points (already scaled by eps)."""
        if self.kind == PotentialKind.CONSTANT:
            return np.full(np.shape(X), self.V0)
        if self.kind == PotentialKind.RADIAL_COERCIVE:
            return self.V0 + self.kappa * (X ** 2 + Y ** 2 + Z ** 2)
        if self.kind == PotentialKind.MULTI_WELL:
            d2 = self.squared_distance(X, Y, Z)
            if self.well_radius:
                R2 = self.well_radius ** 2
                return self.V0 + self.kappa * R2 * np.tanh(d2 / R2)
            return self.V0 + self.kappa * d2
        raise ValueError("user_field potentials are sampled, not evaluated")

    def sample(self, grid: GridSpec, eps: float) -> np.ndarray:
        if self.kind == PotentialKind.USER_FIELD:
            if self.values.grid != grid:
                raise DimensionError(f"User potential grid {self.values.grid} does not match {grid}")
            return np.array(self.values.values)
        X, Y, Z = grid.mesh()
        return np.broadcast_to(self.evaluate(eps * X, eps * Y, eps * Z), grid.shape).copy()


class VariationalModel(Protocol):
    """Discretization primitives shared by the 3D and radial solvers."""

    c: float
    f: Nonlinearity

    def inner(self, a: np.ndarray, b: np.ndarray) -> float: ...

    def integrate(self, a: np.ndarray) -> float: ...

    def apply_linear(self, u: np.ndarray) -> np.ndarray: ...

    def precondition(self, v: np.ndarray) -> np.ndarray: ...

    def convolve(self, density: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class Problem:
    """
    One problem instance: grid, potential V(eps x), nonlinearity f and constraint level c.
    V(eps x) and the kernel plan are built once at construction.
    """

    grid: GridSpec
    potential: Potential
    eps: float
    f: Nonlinearity
    c: float
    rho: Optional[float] = None
    plan: Optional[KernelPlan] = None
    V: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"Constraint level c must be positive, got {self.c}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        V = self.potential.sample(self.grid, self.eps)
        V.flags.writeable = False
        object.__setattr__(self, "V", V)
        if self.plan is None:
            object.__setattr__(self, "plan", KernelPlan.build(self.grid))
        elif self.plan.grid != self.grid:
            raise DimensionError(f"Kernel plan grid {self.plan.grid} does not match {self.grid}")

    @property
    def V0(self) -> float:
        return self.potential.V0

    @property
    def barycenter_radius(self) -> float:
        if self.rho is not None:
            return self.rho
        return self.eps * self.grid.L * np.sqrt(3.0)

    def with_eps(self, eps: float, rho: Optional[float] = None) -> "Problem":
        return Problem(self.grid, self.potential, eps, self.f, self.c, rho=rho, plan=self.plan)

    def with_level(self, c: float) -> "Problem":
        return Problem(self.grid, self.potential, self.eps, self.f, c, rho=self.rho, plan=self.plan)

    # VariationalModel
    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(self.grid.cell_volume * np.vdot(a, b))

    def integrate(self, a: np.ndarray) -> float:
        return float(self.grid.cell_volume * np.sum(a))

    def apply_linear(self, u: np.ndarray) -> np.ndarray:
        return neg_laplacian(self.grid, u) + self.V * u

    def precondition(self, v: np.ndarray) -> np.ndarray:
        return solve_shifted_laplacian(self.grid, v, self.V0)

    def convolve(self, density: np.ndarray) -> np.ndarray:
        return self.plan.convolve(density)

    def check(self, u: ScalarField) -> np.ndarray:
        if u.grid != self.grid:
            raise DimensionError(f"Field grid {u.grid} does not match problem grid {self.grid}")
        return u.values


# --- array level ---------------------------------------------------------------------


def functional_energy(model: VariationalModel, u: np.ndarray) -> float:
    return 0.5 * model.inner(model.apply_linear(u), u) + model.integrate(model.f.F(u))


def functional_gradient(model: VariationalModel, u: np.ndarray) -> np.ndarray:
    return model.apply_linear(u) + model.f.f(u)


def constraint_parts(model: VariationalModel, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Returns (phi_u, b = phi_u u, G(u))."""
    phi = model.convolve(u * u)
    b = phi * u
    return phi, b, model.inner(b, u)


def multiplier(model: VariationalModel, u: np.ndarray, g: np.ndarray, G: float) -> float:
    if not G > 0:
        raise DegenerateInputError("Lagrange multiplier needs G(u) > 0")
    return -model.inner(g, u) / G


def hessian_action(
    model: VariationalModel, u: np.ndarray, phi: np.ndarray, lam: float, v: np.ndarray
) -> np.ndarray:
    cross = model.convolve(u * v)
    return model.apply_linear(v) + model.f.f_prime(u) * v + lam * (phi * v + 2.0 * cross * u)


# --- field level ---------------------------------------------------------------------


def energy(P: Problem, u: ScalarField) -> float:
    value = functional_energy(P, P.check(u))
    return value


def norm_sq(P: Problem, u: ScalarField) -> float:
    """||u||^2_{W_eps} = integral of |grad u|^2 + V(eps x) u^2."""
    arr = P.check(u)
    return P.inner(P.apply_linear(arr), arr)


def nonlinear_work(P: Problem, u: ScalarField) -> float:
    arr = P.check(u)
    return P.integrate(P.f.f(arr) * arr)


def euclidean_gradient(P: Problem, u: ScalarField) -> ScalarField:
    return u.with_values(functional_gradient(P, P.check(u)))


def constraint_gradient(P: Problem, u: ScalarField) -> ScalarField:
    """b = phi_u u; G'(u)[v] = 4 <b, v>."""
    _, b, _ = constraint_parts(P, P.check(u))
    return u.with_values(b)


def project_to_manifold(P: Problem, u: ScalarField) -> Tuple[float, ScalarField]:
    arr = P.check(u)
    _, _, G = constraint_parts(P, arr)
    if not G > 0:
        raise DegenerateInputError("Cannot project a field with G(u) = 0 onto the constraint")
    t = (P.c / G) ** 0.25
    return t, u.scaled(t)


def lagrange_multiplier(P: Problem, u: ScalarField) -> float:
    arr = P.check(u)
    _, _, G = constraint_parts(P, arr)
    lam = multiplier(P, arr, functional_gradient(P, arr), G)
    if not lam < 0:
        raise PreconditionError(f"Multiplier {lam:.6e} is not negative for a nonzero field")
    return lam


def residual(P: Problem, u: ScalarField) -> Tuple[float, float]:
    """Returns (||g + lam b||, lam)."""
    arr = P.check(u)
    g = functional_gradient(P, arr)
    _, b, G = constraint_parts(P, arr)
    lam = multiplier(P, arr, g, G)
    r = g + lam * b
    return float(np.sqrt(P.inner(r, r))), lam


def hessian_apply(P: Problem, u: ScalarField, lam: float, v: ScalarField) -> ScalarField:
    arr = P.check(u)
    varr = P.check(v)
    phi = P.convolve(arr * arr)
    return v.with_values(hessian_action(P, arr, phi, lam, varr))


# --- sign classification ---------------------------------------------------------------


class SignClass(str, Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    ONE_SIGN = "one_sign"
    SIGN_CHANGING = "sign_changing"
    ZERO = "zero"


def classify_sign(values: np.ndarray, f: Nonlinearity, tol: float = 1e-8, theta: float = 1e-6) -> SignClass:
    """
    Negative if max(u) <= tol ||u||_inf, sign-changing if both tails exceed theta ||u||_inf.
    Odd problems (where -u solves whenever u does) are oriented to integral <= 0 first.
    """
    arr = np.asarray(values)
    top = float(np.max(np.abs(arr)))
    if top == 0.0:
        return SignClass.ZERO
    if f.is_odd and np.sum(arr) > 0:
        arr = -arr
    hi = float(np.max(arr))
    lo = float(np.min(arr))
    if hi <= tol * top:
        return SignClass.NEGATIVE
    if lo >= -tol * top:
        return SignClass.POSITIVE
    if hi > theta * top and lo < -theta * top:
        return SignClass.SIGN_CHANGING
    return SignClass.ONE_SIGN

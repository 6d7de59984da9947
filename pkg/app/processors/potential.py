"""
Bopp-Podolsky potential phi_u = K * u^2 with K(r) = (1 - e^{-r}) / r.

The fast path is a free-space convolution on the 2n zero-padded grid with the kernel
sampled in real space, so the long-range Coulomb tail never wraps around the box.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable
import logging

import numpy as np
from scipy import fft as sfft
from scipy.spatial.distance import cdist

from app.config import settings
from app.errors import DimensionError, PreconditionError, SizeError
from app.processors.fields import (
    GridSpec,
    RadialGrid,
    RadialProfile,
    ScalarField,
    check_same_grid,
)

logger = logging.getLogger(__name__)

DIRECT_MAX_N = 32
DUST_THRESHOLD = 1e-12

KernelFunction = Callable[[np.ndarray], np.ndarray]


def bopp_podolsky_kernel(r: np.ndarray) -> np.ndarray:
    """K(r) = (1 - e^{-r}) / r with K(0) = 1."""
    r = np.asarray(r, dtype=np.float64)
    out = np.ones_like(r)
    pos = r > 0
    out[pos] = -np.expm1(-r[pos]) / r[pos]
    return out


def _displacement_radii(n: int, h: float) -> np.ndarray:
    # Wrapped integer displacements of the 2n padded grid: 0..n-1, then -n..-1
    m = 2 * n
    d = np.arange(m)
    d = np.where(d < n, d, d - m).astype(np.float64)
    sq = d[:, None, None] ** 2 + d[None, :, None] ** 2 + d[None, None, :] ** 2
    return h * np.sqrt(sq)


@dataclass(frozen=True, eq=False)
class KernelPlan:
    """Precomputed padded kernel transform for one grid. Immutable and shareable."""

    grid: GridSpec
    kernel_hat: np.ndarray

    @classmethod
    def build(cls, grid: GridSpec, kernel: KernelFunction = bopp_podolsky_kernel) -> "KernelPlan":
        samples = kernel(_displacement_radii(grid.n, grid.h))
        kernel_hat = sfft.rfftn(samples, workers=settings.FFT_WORKERS)
        kernel_hat.flags.writeable = False
        logger.debug(f"[Potential] Built kernel plan for n={grid.n}, L={grid.L}")
        return cls(grid=grid, kernel_hat=kernel_hat)

    def convolve(self, density: np.ndarray) -> np.ndarray:
        """h^3 * sum_j K(|x_i - x_j|) density_j on the n^3 grid."""
        n = self.grid.n
        padded = np.zeros((2 * n,) * 3)
        padded[:n, :n, :n] = density
        workers = settings.FFT_WORKERS
        spec = sfft.rfftn(padded, workers=workers)
        full = sfft.irfftn(spec * self.kernel_hat, s=padded.shape, workers=workers)
        return self.grid.cell_volume * full[:n, :n, :n]


def _clamp_dust(phi: np.ndarray) -> np.ndarray:
    top = float(np.max(phi))
    low = float(np.min(phi))
    if low >= 0:
        return phi
    if low < -DUST_THRESHOLD * max(top, 0.0):
        raise PreconditionError(
            f"Potential has negative values {low:.3e} beyond dust level (max {top:.3e})"
        )
    return np.maximum(phi, 0.0)


def _check_plan(plan: KernelPlan, *fields: ScalarField) -> None:
    grid = check_same_grid(*fields)
    if grid != plan.grid:
        raise DimensionError(f"Kernel plan built for {plan.grid}, field lives on {grid}")


def solve_potential(plan: KernelPlan, u: ScalarField) -> ScalarField:
    _check_plan(plan, u)
    phi = plan.convolve(u.values * u.values)
    return u.with_values(_clamp_dust(phi))


def bilinear_potential(plan: KernelPlan, v: ScalarField, w: ScalarField) -> ScalarField:
    """K * (v w); symmetric in (v, w) and equal to solve_potential when v = w."""
    _check_plan(plan, v, w)
    density = v.values * w.values
    if np.array_equal(v.values, w.values):
        return v.with_values(_clamp_dust(plan.convolve(density)))
    return v.with_values(plan.convolve(density))


def constraint_value(plan: KernelPlan, u: ScalarField) -> float:
    """G(u) = integral of phi_u u^2."""
    phi = solve_potential(plan, u)
    return float(u.grid.cell_volume * np.vdot(phi.values, u.values * u.values))


def solve_potential_direct(u: ScalarField, kernel: KernelFunction = bopp_podolsky_kernel) -> ScalarField:
    """
    Direct O(n^6) quadrature with the same convention as the fast path.
    Oracle only; refuses n > 32.
    """
    grid = u.grid
    if grid.n > DIRECT_MAX_N:
        raise SizeError(f"Direct potential is O(n^6); n={grid.n} exceeds {DIRECT_MAX_N}")

    idx = np.indices(grid.shape).reshape(3, -1).T.astype(np.float64)
    density = (u.values * u.values).reshape(-1)
    phi = np.empty(grid.size)
    block = max(1, 2 ** 22 // grid.size)
    for start in range(0, grid.size, block):
        stop = min(start + block, grid.size)
        radii = grid.h * cdist(idx[start:stop], idx)
        phi[start:stop] = kernel(radii) @ density
    return u.with_values(_clamp_dust(grid.cell_volume * phi.reshape(grid.shape)))


# --- radial (shell) form -------------------------------------------------------------


def shell_kernel(r: np.ndarray, s: np.ndarray) -> np.ndarray:
    """
    Spherical average of K over a shell of radius s seen from radius r:
    1/max(r,s) - sinh(min) e^{-max} / (r s).
    """
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    a = np.minimum(r, s)
    b = np.maximum(r, s)
    out = np.ones(np.broadcast(a, b).shape)
    a, b = np.broadcast_arrays(a, b)

    only_b = (a == 0) & (b > 0)
    out[only_b] = -np.expm1(-b[only_b]) / b[only_b]

    both = a > 0
    aa, bb = a[both], b[both]
    # e^{-b} sinh(a) / a written without overflow for a <= b
    yukawa = 0.5 * np.exp(aa - bb) * (-np.expm1(-2.0 * aa)) / aa
    out[both] = (1.0 - yukawa) / bb
    return out


class RadialKernel:
    """Dense symmetric shell-kernel operator for one radial grid."""

    def __init__(self, grid: RadialGrid):
        self.grid = grid
        r = grid.r
        self.matrix = shell_kernel(r[:, None], r[None, :])
        self.matrix.flags.writeable = False

    def convolve(self, density: np.ndarray) -> np.ndarray:
        return self.matrix @ (self.grid.weights * density)


@lru_cache(maxsize=8)
def radial_kernel(grid: RadialGrid) -> RadialKernel:
    return RadialKernel(grid)


def solve_potential_radial(p: RadialProfile) -> RadialProfile:
    kernel = radial_kernel(p.grid)
    return p.with_values(kernel.convolve(p.values * p.values))


def radial_constraint_value(p: RadialProfile) -> float:
    phi = solve_potential_radial(p)
    return float(np.dot(p.grid.weights, phi.values * p.values * p.values))

"""Uniform-grid scalar fields, spectral operators, radial grids and the BPF1 file format."""
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Tuple
import logging
import os
import struct

import numpy as np
from scipy import fft as sfft

from app.config import settings
from app.errors import DimensionError, FieldFormatError

logger = logging.getLogger(__name__)

BPF1_MAGIC = b"BPF1"
_HEADER = struct.Struct("<4s3Id")


@dataclass(frozen=True)
class GridSpec:
    """Cubic box [-L, L)^3 sampled with n points per axis."""

    n: int
    L: float

    def __post_init__(self):
        if self.n < 8 or self.n % 2:
            raise DimensionError(f"Grid needs an even n >= 8, got n={self.n}")
        if not self.L > 0:
            raise DimensionError(f"Grid half length must be positive, got L={self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n ** 3

    @property
    def cell_volume(self) -> float:
        return self.h ** 3

    @cached_property
    def axis(self) -> np.ndarray:
        # x_i = -L + i*h; the origin sits at index n/2
        return -self.L + self.h * np.arange(self.n)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.axis, self.axis, self.axis, indexing="ij")

    @cached_property
    def k_squared(self) -> np.ndarray:
        """|k|^2 on the rfftn half spectrum (symbol of -Laplacian)."""
        k = 2.0 * np.pi * sfft.fftfreq(self.n, d=self.h)
        kr = 2.0 * np.pi * sfft.rfftfreq(self.n, d=self.h)
        return k[:, None, None] ** 2 + k[None, :, None] ** 2 + kr[None, None, :] ** 2

    @cached_property
    def half_spectrum_weights(self) -> np.ndarray:
        # Multiplicity of each rfft coefficient in the full spectrum
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return w

    @property
    def nyquist_k_squared(self) -> float:
        return 3.0 * (np.pi / self.h) ** 2


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Immutable real field on a GridSpec; values have shape (n, n, n), x slowest."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.size != self.grid.size:
            raise DimensionError(
                f"Field has {arr.size} values, grid n={self.grid.n} needs {self.grid.size}"
            )
        arr = arr.reshape(self.grid.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Field values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def __neg__(self) -> "ScalarField":
        return self.with_values(-self.values)

    def scaled(self, t: float) -> "ScalarField":
        return self.with_values(t * self.values)


def sample(grid: GridSpec, func: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> ScalarField:
    """Evaluates func(X, Y, Z) on the grid nodes."""
    X, Y, Z = grid.mesh()
    return ScalarField(grid, np.broadcast_to(func(X, Y, Z), grid.shape))


def zeros(grid: GridSpec) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape))


def gaussian(grid: GridSpec, center=(0.0, 0.0, 0.0), width: float = 1.0, amplitude: float = -1.0) -> ScalarField:
    """amplitude * exp(-|x - center|^2 / (2 width^2))."""
    cx, cy, cz = center
    return sample(
        grid,
        lambda X, Y, Z: amplitude * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2 + (Z - cz) ** 2) / (2.0 * width ** 2)),
    )


def gaussian_mixture(
    grid: GridSpec,
    rng: np.random.Generator,
    count: int = 3,
    width: float = 1.0,
    spread: float = 0.3,
    signed: bool = True,
) -> ScalarField:
    """Random smooth field: Gaussians with centers within spread*L of the origin."""
    values = np.zeros(grid.shape)
    for _ in range(count):
        center = rng.uniform(-spread * grid.L, spread * grid.L, size=3)
        amplitude = rng.uniform(0.5, 1.5) * (rng.choice([-1.0, 1.0]) if signed else -1.0)
        values += gaussian(grid, tuple(center), width * rng.uniform(0.7, 1.3), amplitude).values
    return ScalarField(grid, values)


def check_same_grid(*fields: ScalarField) -> GridSpec:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise DimensionError(f"Grid mismatch: {grid} vs {f.grid}")
    return grid


def roll_field(u: ScalarField, shift: Tuple[int, int, int]) -> ScalarField:
    """Cyclic grid shift by whole cells."""
    return u.with_values(np.roll(u.values, shift, axis=(0, 1, 2)))


# --- quadrature -----------------------------------------------------------------


def integrate(u: ScalarField) -> float:
    """Midpoint rule h^3 * sum(values)."""
    return float(u.grid.cell_volume * np.sum(u.values))


def inner(u: ScalarField, v: ScalarField) -> float:
    check_same_grid(u, v)
    return float(u.grid.cell_volume * np.vdot(u.values, v.values))


def l2_norm(u: ScalarField) -> float:
    return float(np.sqrt(inner(u, u)))


def lp_norm(u: ScalarField, p: float) -> float:
    return float((u.grid.cell_volume * np.sum(np.abs(u.values) ** p)) ** (1.0 / p))


# --- spectral operators -----------------------------------------------------------


def neg_laplacian(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    """Spectral -Laplacian of a periodic array."""
    workers = settings.FFT_WORKERS
    spec = sfft.rfftn(values, workers=workers)
    return sfft.irfftn(spec * grid.k_squared, s=grid.shape, workers=workers)


def solve_shifted_laplacian(grid: GridSpec, values: np.ndarray, shift: float) -> np.ndarray:
    """Applies (-Laplacian + shift)^{-1}; shift must be positive."""
    workers = settings.FFT_WORKERS
    spec = sfft.rfftn(values, workers=workers)
    return sfft.irfftn(spec / (grid.k_squared + shift), s=grid.shape, workers=workers)


def spectral_derivative(grid: GridSpec, values: np.ndarray, axis: int) -> np.ndarray:
    """d/dx_axis with the Nyquist mode dropped."""
    n = grid.n
    if axis == 2:
        k = 2.0 * np.pi * sfft.rfftfreq(n, d=grid.h)
    else:
        k = 2.0 * np.pi * sfft.fftfreq(n, d=grid.h)
    k = k.copy()
    k[n // 2] = 0.0
    shape = [1, 1, 1]
    shape[axis] = k.size
    workers = settings.FFT_WORKERS
    spec = sfft.rfftn(values, workers=workers)
    return sfft.irfftn(spec * (1j * k.reshape(shape)), s=grid.shape, workers=workers)


def gradient_sq_integral(u: ScalarField) -> float:
    """
    Returns the integral of |grad u|^2 with spectral differentiation.
    Computed through Parseval, so the result is nonnegative by construction.
    """
    grid = u.grid
    spec = sfft.rfftn(u.values, workers=settings.FFT_WORKERS)
    power = (spec.real ** 2 + spec.imag ** 2) * grid.k_squared * grid.half_spectrum_weights
    return float(grid.cell_volume * np.sum(power) / grid.size)


# --- radial grids -----------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    """Nodes r_j = j * r_max / m, j = 0..m."""

    m: int
    r_max: float

    def __post_init__(self):
        if self.m < 16:
            raise DimensionError(f"Radial grid needs m >= 16, got {self.m}")
        if not self.r_max > 0:
            raise DimensionError(f"Radial grid needs r_max > 0, got {self.r_max}")

    @property
    def dr(self) -> float:
        return self.r_max / self.m

    @cached_property
    def r(self) -> np.ndarray:
        return self.dr * np.arange(self.m + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights for the volume element 4 pi r^2 dr; the origin node gets its ball volume."""
        w = 4.0 * np.pi * self.r ** 2 * self.dr
        w[0] = np.pi * self.dr ** 3 / 6.0
        w[-1] *= 0.5
        return w


@dataclass(frozen=True, eq=False)
class RadialProfile:
    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size != self.grid.m + 1:
            raise DimensionError(f"Profile has {arr.size} values, radial grid needs {self.grid.m + 1}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Profile values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    def with_values(self, values: np.ndarray) -> "RadialProfile":
        return RadialProfile(self.grid, values)


def integrate_radial(p: RadialProfile) -> float:
    return float(np.dot(p.grid.weights, p.values))


def half_mass_radius(p: RadialProfile) -> float:
    """Radius of the ball holding half of the integral of u^2."""
    mass = np.cumsum(p.grid.weights * p.values ** 2)
    if mass[-1] <= 0:
        return 0.0
    return float(np.interp(0.5 * mass[-1], mass, p.grid.r))


# --- BPF1 I/O ---------------------------------------------------------------------


def write_field(path: str, u: ScalarField) -> None:
    """Writes u in BPF1 layout: magic, 3 x uint32 dims, float64 L, float64 payload (LE)."""
    n = u.grid.n
    header = _HEADER.pack(BPF1_MAGIC, n, n, n, float(u.grid.L))
    payload = np.ascontiguousarray(u.values, dtype="<f8").tobytes(order="C")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_field(path: str) -> ScalarField:
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < _HEADER.size:
        raise FieldFormatError(f"{path}: file shorter than the BPF1 header")
    magic, nx, ny, nz, L = _HEADER.unpack_from(raw, 0)
    if magic != BPF1_MAGIC:
        raise FieldFormatError(f"{path}: bad magic {magic!r}")
    if not (nx == ny == nz):
        raise FieldFormatError(f"{path}: non-cubic dims ({nx}, {ny}, {nz})")

    expected = nx * ny * nz * 8
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FieldFormatError(f"{path}: payload has {len(payload)} bytes, dims need {expected}")

    try:
        grid = GridSpec(nx, L)
        values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(grid.shape)
        return ScalarField(grid, values)
    except (DimensionError, ValueError) as e:
        raise FieldFormatError(f"{path}: invalid field contents: {e}") from e

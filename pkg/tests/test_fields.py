import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import DimensionError, FieldFormatError
from app.processors.fields import (
    GridSpec,
    RadialGrid,
    RadialProfile,
    ScalarField,
    gaussian,
    gradient_sq_integral,
    half_mass_radius,
    integrate,
    integrate_radial,
    l2_norm,
    neg_laplacian,
    read_field,
    sample,
    solve_shifted_laplacian,
    spectral_derivative,
    write_field,
    zeros,
)


@pytest.mark.parametrize("n, L", [(7, 1.0), (6, 1.0), (9, 2.0), (16, 0.0), (16, -1.0)])
def test_grid_rejects_bad_shape(n, L):
    with pytest.raises(DimensionError):
        GridSpec(n, L)


def test_grid_spacing_and_origin():
    grid = GridSpec(16, 4.0)
    assert grid.h == 0.5
    assert grid.size == 16 ** 3
    assert grid.axis[grid.n // 2] == 0.0
    assert grid.axis[0] == -4.0


def test_field_rejects_wrong_length(small_grid):
    with pytest.raises(DimensionError):
        ScalarField(small_grid, np.zeros(10))


def test_field_rejects_non_finite(small_grid):
    values = np.zeros(small_grid.shape)
    values[1, 2, 3] = np.nan
    with pytest.raises(ValueError):
        ScalarField(small_grid, values)


def test_field_values_are_read_only(small_grid):
    u = zeros(small_grid)
    with pytest.raises(ValueError):
        u.values[0, 0, 0] = 1.0


def test_gaussian_integral():
    grid = GridSpec(32, 6.0)
    u = sample(grid, lambda X, Y, Z: np.exp(-(X ** 2 + Y ** 2 + Z ** 2)))
    assert integrate(u) == pytest.approx(np.pi ** 1.5, rel=1e-10)


def test_gaussian_dirichlet_integral():
    grid = GridSpec(32, 6.0)
    u = sample(grid, lambda X, Y, Z: np.exp(-(X ** 2 + Y ** 2 + Z ** 2)))
    expected = 3.0 * np.pi ** 1.5 / (2.0 * np.sqrt(2.0))
    assert gradient_sq_integral(u) == pytest.approx(expected, rel=1e-6)


def test_neg_laplacian_of_fourier_mode():
    grid = GridSpec(16, 3.0)
    kx = 2.0 * np.pi / grid.L
    kz = np.pi / grid.L
    X, _, Z = grid.mesh()
    u = np.cos(kx * X) * np.sin(kz * Z)
    expected = (kx ** 2 + kz ** 2) * u
    assert np.max(np.abs(neg_laplacian(grid, u) - expected)) <= 1e-10 * np.max(np.abs(expected))


def test_shifted_laplacian_inverts(small_grid, rng):
    u = rng.standard_normal(small_grid.shape)
    back = solve_shifted_laplacian(small_grid, neg_laplacian(small_grid, u) + 2.5 * u, 2.5)
    assert np.allclose(back, u, rtol=0, atol=1e-10)


def test_spectral_derivative_of_sine():
    grid = GridSpec(16, np.pi)
    X, Y, _ = grid.mesh()
    u = np.sin(X) * np.cos(2 * Y)
    assert np.allclose(spectral_derivative(grid, u, 0), np.cos(X) * np.cos(2 * Y), atol=1e-12)
    assert np.allclose(spectral_derivative(grid, u, 1), -2 * np.sin(X) * np.sin(2 * Y), atol=1e-12)


@given(t=st.floats(min_value=-10.0, max_value=10.0).filter(lambda t: abs(t) > 1e-6))
@settings(max_examples=25, deadline=None)
def test_l2_norm_homogeneity(t):
    grid = GridSpec(8, 2.0)
    u = gaussian(grid, width=0.8)
    assert l2_norm(u.scaled(t)) == pytest.approx(abs(t) * l2_norm(u), rel=1e-12)


def test_radial_weights_fill_the_ball():
    grid = RadialGrid(400, 5.0)
    ball = 4.0 / 3.0 * np.pi * grid.r_max ** 3
    assert np.sum(grid.weights) == pytest.approx(ball, rel=1e-4)


def test_radial_gaussian_integral():
    grid = RadialGrid(2000, 10.0)
    p = RadialProfile(grid, np.exp(-grid.r ** 2))
    assert integrate_radial(p) == pytest.approx(np.pi ** 1.5, rel=1e-5)


def test_half_mass_radius_of_uniform_profile():
    grid = RadialGrid(1000, 2.0)
    values = np.ones(grid.m + 1)
    values[-1] = 0.0
    p = RadialProfile(grid, values)
    assert half_mass_radius(p) == pytest.approx(2.0 * 0.5 ** (1.0 / 3.0), rel=1e-2)


def test_profile_rejects_wrong_length():
    with pytest.raises(DimensionError):
        RadialProfile(RadialGrid(32, 1.0), np.zeros(5))


def test_bpf1_roundtrip(tmp_path, small_grid, rng):
    u = ScalarField(small_grid, rng.standard_normal(small_grid.shape))
    path = tmp_path / "u.bpf"
    write_field(str(path), u)
    back = read_field(str(path))
    assert back.grid == small_grid
    assert np.array_equal(back.values, u.values)
    # 4 magic bytes, 3 uint32 dims, one float64 L
    assert path.stat().st_size == 24 + 8 * small_grid.size


def test_bpf1_bad_magic(tmp_path, small_grid):
    path = tmp_path / "u.bpf"
    write_field(str(path), zeros(small_grid))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FieldFormatError):
        read_field(str(path))


def test_bpf1_truncated_payload(tmp_path, small_grid):
    path = tmp_path / "u.bpf"
    write_field(str(path), zeros(small_grid))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FieldFormatError):
        read_field(str(path))


def test_bpf1_non_cubic(tmp_path):
    path = tmp_path / "u.bpf"
    header = struct.pack("<4s3Id", b"BPF1", 8, 8, 10, 1.0)
    path.write_bytes(header + np.zeros(8 * 8 * 10).tobytes())
    with pytest.raises(FieldFormatError):
        read_field(str(path))


def test_bpf1_short_header(tmp_path):
    path = tmp_path / "u.bpf"
    path.write_bytes(b"BPF1")
    with pytest.raises(FieldFormatError):
        read_field(str(path))

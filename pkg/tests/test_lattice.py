import numpy as np
import pytest
from hypothesis import given, strategies as st

from qpreduce.lattice import (GridFunction, LatticeSpec, cube_modes, dealiased_product, dft_forward,
                              dft_inverse, japanese_bracket, mode_index, to_coefficients, to_grid)


def test_spec_sizes_and_validation():
    s = LatticeSpec(2, 1, 3, 2)
    assert s.n_space == 49 and s.n_angle == 5
    assert s.space_shape == (7, 7) and s.angle_shape == (5,)
    with pytest.raises(ValueError):
        LatticeSpec(1, 1, 0, 2)
    with pytest.raises(ValueError):
        LatticeSpec(1, 1, 2.5, 2)


@given(st.integers(1, 4), st.integers(1, 3))
def test_negation_reverses_enumeration(radius, dim):
    modes = cube_modes(radius, dim)
    assert np.array_equal(-modes, modes[::-1])
    for i, m in enumerate(modes):
        assert mode_index(m, radius) == i


def test_mode_index_out_of_range():
    with pytest.raises(IndexError):
        mode_index((3,), 2)


def test_japanese_bracket_values():
    assert japanese_bracket(0) == 1.0
    assert japanese_bracket(np.array([3, 4])) == pytest.approx(np.sqrt(26))
    assert np.allclose(japanese_bracket(np.array([[1], [-2]])), [np.sqrt(2), np.sqrt(5)])


def test_coefficients_of_known_function():
    # f = cos(2x) + 3 sin(x) - 0.5: coefficients 1/2 at +-2, -1.5i / +1.5i at +1 / -1
    x = 2 * np.pi * np.arange(11) / 11
    f = np.cos(2 * x) + 3 * np.sin(x) - 0.5
    c = to_coefficients(f, (3,))
    expected = np.array([0, 0.5, 1.5j, -0.5, -1.5j, 0.5, 0])
    assert np.allclose(c, expected, atol=1e-14)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 2))
def test_grid_roundtrip(seed, r, dim):
    rng = np.random.default_rng(seed)
    shape = (2 * r + 1,) * dim
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    g = to_grid(c, (2 * r + 3,) * dim)
    assert np.allclose(to_coefficients(g, (r,) * dim), c, atol=1e-12)


def test_grid_too_small_raises():
    with pytest.raises(ValueError):
        to_grid(np.zeros(7), (5,))
    with pytest.raises(ValueError):
        to_coefficients(np.zeros(5), (3,))


def test_gridfunction_roundtrip():
    spec = LatticeSpec(2, 1, 3, 2)
    rng = np.random.default_rng(0)
    c = rng.standard_normal(spec.space_shape) + 0j
    f = dft_inverse(c, spec, "space")
    assert f.values.shape == spec.space_shape
    assert np.allclose(dft_forward(f), c, atol=1e-12)
    both = GridFunction(np.zeros((5, 7, 7)), spec, "both")
    assert both.radii() == (2, 3, 3)
    with pytest.raises(ValueError):
        dft_forward(GridFunction(np.zeros((6, 6)), spec))


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_dealiased_product_matches_convolution(seed, r):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(2 * r + 1) + 1j * rng.standard_normal(2 * r + 1)
    b = rng.standard_normal(2 * r + 1) + 1j * rng.standard_normal(2 * r + 1)
    full = np.convolve(a, b)          # modes -2r..2r
    expected = full[r:3 * r + 1]
    assert np.allclose(dealiased_product(a, b, (r,)), expected, atol=1e-12)
    assert np.allclose(dealiased_product(a, b, (r,), (2 * r,)), full, atol=1e-12)

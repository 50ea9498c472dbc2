"""Truncated Fourier lattices, uniform grids and discrete transforms.

Modes live in hypercubes: spatial modes j in Z^d with |j|_inf <= J and angle
modes l in Z^n with |l|_inf <= L.  Modes are enumerated in lexicographic
order with the first coordinate varying slowest, which is also the C-order
flattening of a centred coefficient array of shape (2R+1,)*k.  In this order
the map xi -> -xi reverses the index.

Fourier convention: for a function sampled on the uniform grid with G points
per axis, the coefficient of mode xi is the grid average of f(x) e^{-i xi.x},
i.e. ``fftn(values) / G**k`` read at index ``xi mod G``.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np


@dataclass(frozen=True)
class LatticeSpec:
    """Truncation of the spatial (d, J) and angle (n, L) lattices."""

    d: int
    n: int
    J: int
    L: int

    def __post_init__(self):
        for name in ("d", "n", "J", "L"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def n_space(self):
        return (2 * self.J + 1) ** self.d

    @property
    def n_angle(self):
        return (2 * self.L + 1) ** self.n

    @property
    def space_shape(self):
        return (2 * self.J + 1,) * self.d

    @property
    def angle_shape(self):
        return (2 * self.L + 1,) * self.n

    def with_J(self, J):
        return LatticeSpec(self.d, self.n, J, self.L)

    def with_L(self, L):
        return LatticeSpec(self.d, self.n, self.J, L)


def cube_modes(radius, dim):
    """All integer points of [-radius, radius]^dim, lexicographic, shape (count, dim)."""
    axis = range(-radius, radius + 1)
    return np.array(list(product(axis, repeat=dim)), dtype=int).reshape(-1, dim)


def enumerate_modes(spec):
    """Return ``(angle_modes, space_modes)`` as integer arrays of shape (count, n) and (count, d)."""
    return cube_modes(spec.L, spec.n), cube_modes(spec.J, spec.d)


def mode_index(mode, radius):
    """Flat index of ``mode`` in the lexicographic enumeration of a cube of given radius."""
    idx = 0
    for c in mode:
        if abs(c) > radius:
            raise IndexError(f"mode {tuple(mode)} outside radius {radius}")
        idx = idx * (2 * radius + 1) + (int(c) + radius)
    return idx


def japanese_bracket(xi):
    """<xi> = (1 + |xi|^2)^(1/2), Euclidean norm over the last axis.

    Scalars are treated as one-dimensional points.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0:
        return float(np.sqrt(1.0 + xi * xi))
    return np.sqrt(1.0 + np.sum(xi * xi, axis=-1))


def grid_points(size, dim):
    """Uniform grid on the torus [0, 2pi)^dim as a list of 1d axes."""
    return [2 * np.pi * np.arange(size) / size for _ in range(dim)]


def _take_band(arr, axes, radii):
    for ax, r in zip(axes, radii):
        size = arr.shape[ax]
        if size < 2 * r + 1:
            raise ValueError(f"grid of size {size} cannot hold modes of radius {r}")
        arr = np.take(arr, np.arange(-r, r + 1) % size, axis=ax)
    return arr


def to_coefficients(values, radii, axes=None):
    """Centred Fourier coefficients of grid samples.

    ``values`` has one grid axis per entry of ``radii`` (the trailing ones
    unless ``axes`` is given); each grid axis must have at least 2r+1 points.
    The output replaces every grid axis with an axis of length 2r+1 indexed
    by mode + r.
    """
    values = np.asarray(values)
    radii = tuple(radii)
    if axes is None:
        axes = tuple(range(values.ndim - len(radii), values.ndim))
    coeffs = np.fft.fftn(values, axes=axes)
    coeffs = coeffs / np.prod([values.shape[a] for a in axes])
    return _take_band(coeffs, axes, radii)


def to_grid(coeffs, sizes, axes=None):
    """Inverse of :func:`to_coefficients`: evaluate centred coefficients on a grid.

    Each coefficient axis of length 2r+1 becomes a grid axis of the
    requested size (zero padding in between).
    """
    coeffs = np.asarray(coeffs)
    sizes = tuple(sizes)
    if axes is None:
        axes = tuple(range(coeffs.ndim - len(sizes), coeffs.ndim))
    full = coeffs.astype(complex)
    for ax, size in zip(axes, sizes):
        width = full.shape[ax]
        r = (width - 1) // 2
        if size < width:
            raise ValueError(f"grid of size {size} cannot hold modes of radius {r}")
        shape = list(full.shape)
        shape[ax] = size
        padded = np.zeros(shape, dtype=complex)
        sl = [slice(None)] * full.ndim
        sl[ax] = np.arange(-r, r + 1) % size
        padded[tuple(sl)] = full
        full = padded
    return np.fft.ifftn(full, axes=axes) * np.prod([full.shape[a] for a in axes])


@dataclass
class GridFunction:
    """Samples on the native grid of a lattice.

    ``kind`` selects the grid directions: ``"space"`` (d axes of 2J+1 points),
    ``"angle"`` (n axes of 2L+1 points) or ``"both"`` (angle axes first).
    Leading axes beyond those are treated as components.
    """

    values: np.ndarray
    spec: LatticeSpec
    kind: str = "space"

    def radii(self):
        s = self.spec
        if self.kind == "space":
            return (s.J,) * s.d
        if self.kind == "angle":
            return (s.L,) * s.n
        if self.kind == "both":
            return (s.L,) * s.n + (s.J,) * s.d
        raise ValueError(f"unknown grid kind {self.kind!r}")

    def grid_shape(self):
        return tuple(2 * r + 1 for r in self.radii())


def dft_forward(f):
    """Centred coefficients of a :class:`GridFunction` on its native grid."""
    radii = f.radii()
    shape = f.grid_shape()
    values = np.asarray(f.values)
    if values.shape[values.ndim - len(shape):] != shape:
        raise ValueError(f"grid shape {values.shape} does not match lattice {shape}")
    return to_coefficients(values, radii)


def dft_inverse(coeffs, spec, kind="space"):
    """GridFunction whose samples have the given centred coefficients."""
    f = GridFunction(np.empty(0), spec, kind)
    shape = f.grid_shape()
    coeffs = np.asarray(coeffs)
    if coeffs.shape[coeffs.ndim - len(shape):] != shape:
        raise ValueError(f"coefficient shape {coeffs.shape} does not match lattice {shape}")
    return GridFunction(to_grid(coeffs, shape), spec, kind)


def dealiased_product(a, b, radii, out_radii=None):
    """Coefficients of the product of two band-limited functions.

    Both inputs are centred coefficient arrays over the trailing axes given
    by ``radii``.  The product is formed on a grid of at least double
    resolution and truncated back to ``out_radii`` (defaults to ``radii``).
    """
    radii = tuple(radii)
    out_radii = radii if out_radii is None else tuple(out_radii)
    sizes = tuple(2 * (2 * r + 1) for r in radii)
    ga = to_grid(a, sizes)
    gb = to_grid(b, sizes)
    return to_coefficients(ga * gb, out_radii)

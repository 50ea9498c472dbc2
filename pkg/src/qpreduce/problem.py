"""Building the forcing fields and perturbation operators from Fourier terms.

A term ``a * cos(l.phi + j.x)`` or ``a * sin(l.phi + j.x)`` contributes two
exponentials.  Vector fields carry a component index; scalar potentials
ignore it.
"""

from dataclasses import dataclass

import numpy as np

from .lattice import japanese_bracket, mode_index
from .operator import QPOperator, space_modes


@dataclass(frozen=True)
class FourierTerm:
    angle_mode: tuple
    space_mode: tuple
    amplitude: float
    parity: str = "cos"
    component: int = 0

    def exponentials(self):
        """[(l, j, c)] with the term equal to sum c e^{i(l.phi + j.x)}."""
        l = tuple(int(v) for v in self.angle_mode)
        j = tuple(int(v) for v in self.space_mode)
        ml = tuple(-v for v in l)
        mj = tuple(-v for v in j)
        a = float(self.amplitude)
        if self.parity == "cos":
            pair = [(l, j, a / 2), (ml, mj, a / 2)]
        elif self.parity == "sin":
            pair = [(l, j, a / 2j), (ml, mj, -a / 2j)]
        else:
            raise ValueError(f"parity must be 'cos' or 'sin', got {self.parity!r}")
        merged = {}
        for key_l, key_j, c in pair:
            merged[(key_l, key_j)] = merged.get((key_l, key_j), 0) + c
        return [(k[0], k[1], c) for k, c in merged.items()]


def as_terms(items):
    out = []
    for t in items:
        if isinstance(t, FourierTerm):
            out.append(t)
        else:
            t = dict(t)
            out.append(FourierTerm(tuple(t["angle_mode"]), tuple(t["space_mode"]),
                                   float(t["amplitude"]), t.get("parity", "cos"),
                                   int(t.get("component", 0))))
    return out


def term_radii(terms):
    """Largest |l|_inf and |j|_inf among the terms."""
    lmax = max((max(abs(v) for v in t.angle_mode) for t in terms), default=0)
    jmax = max((max(abs(v) for v in t.space_mode) for t in terms), default=0)
    return lmax, jmax


def field_coefficients(terms, d, n, L, J, components=None):
    """Centred coefficients of a vector field, shape (d,) + (2L+1,)*n + (2J+1,)*d."""
    components = d if components is None else components
    out = np.zeros((components,) + (2 * L + 1,) * n + (2 * J + 1,) * d, complex)
    for t in as_terms(terms):
        if not 0 <= t.component < components:
            raise ValueError(f"component {t.component} out of range for d={d}")
        if len(t.angle_mode) != n or len(t.space_mode) != d:
            raise ValueError(f"term {t} has wrong mode dimensions")
        for l, j, c in t.exponentials():
            if max(map(abs, l)) > L or max(map(abs, j)) > J:
                raise ValueError(f"term {t} does not fit in radii L={L}, J={J}")
            idx = tuple(v + L for v in l) + tuple(v + J for v in j)
            out[(t.component,) + idx] += c
    return out


def scalar_coefficients(terms, d, n, L, J):
    """Centred coefficients of a scalar potential, shape (2L+1,)*n + (2J+1,)*d."""
    terms = [FourierTerm(t.angle_mode, t.space_mode, t.amplitude, t.parity, 0)
             for t in as_terms(terms)]
    return field_coefficients(terms, d, n, L, J, components=1)[0]


def _place(spec, l, k, column_values, blocks):
    """Add column_values[j'] at entry (j' + k, j') of block l, where inside the lattice."""
    if max(map(abs, l)) > spec.L:
        return
    b = mode_index(l, spec.L)
    modes = space_modes(spec)
    target = modes + np.asarray(k)
    inside = np.all(np.abs(target) <= spec.J, axis=1)
    cols = np.flatnonzero(inside)
    rows = np.array([mode_index(t, spec.J) for t in target[inside]], dtype=int)
    blocks[b, rows, cols] += column_values[cols]


def multiplication_operator(terms, spec):
    """Multiplication by a scalar potential q(phi, x)."""
    blocks = np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex)
    ones = np.ones(spec.n_space, complex)
    for t in as_terms(terms):
        for l, k, c in t.exponentials():
            _place(spec, l, k, c * ones, blocks)
    return QPOperator(spec, blocks, copy=False)


def transport_operator(terms, spec):
    """V(phi, x) . grad as a quasi-periodic operator (Galerkin truncation)."""
    blocks = np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex)
    modes = space_modes(spec)
    for t in as_terms(terms):
        deriv = 1j * modes[:, t.component].astype(complex)
        for l, k, c in t.exponentials():
            _place(spec, l, k, c * deriv, blocks)
    return QPOperator(spec, blocks, copy=False)


def free_transport(spec, nu):
    """Diagonal of nu . grad: i nu.j per mode."""
    return 1j * (space_modes(spec) @ np.asarray(nu, dtype=float))


def odd_multiplier(spec, direction, gain):
    """m(j) = i (c.j) <j>^{-gain}, an odd imaginary symbol of order 1 - gain."""
    modes = space_modes(spec)
    c = np.asarray(direction, dtype=float)
    return 1j * (modes @ c) * japanese_bracket(modes) ** (-gain)


def growth_multiplier(spec, strength, order):
    """Real even symbol strength * <j>^order; breaks reversibility when nonzero."""
    return strength * japanese_bracket(space_modes(spec)) ** order + 0j


def multiplier_times_potential(potential, spec, direction, gain, growth=0.0, growth_order=-1.0):
    """W = q(phi, x) m(D) + growth <D>^growth_order.

    With q real and even and m from :func:`odd_multiplier`, W is real,
    reversible and symmetric hyperbolic.
    """
    Q = multiplication_operator(potential, spec)
    m = odd_multiplier(spec, direction, gain)
    W = QPOperator(spec, Q.blocks * m[None, None, :], copy=False)
    if growth:
        W = W + QPOperator.diagonal(spec, growth_multiplier(spec, growth, growth_order))
    return W


def generator(spec, nu, eps, V_terms, W):
    """Full generator (nu + eps V).grad + eps W on the lattice."""
    H = QPOperator.diagonal(spec, free_transport(spec, nu))
    if eps:
        H = H + eps * transport_operator(V_terms, spec)
        if W is not None:
            H = H + eps * W
    return H

"""Quasi-periodic operators stored as angle-Fourier families of matrices.

An operator R(phi) acting on functions of x in T^d is kept through its
angle-Fourier coefficients R(l), |l|_inf <= L, each a complex matrix over the
spatial modes |j|_inf <= J.  Entry ``blocks[l, j, j']`` is the coefficient of
e^{ijx} in R(l)[e^{ij'x}], so rows are output modes and columns input modes.

Products are angle convolutions.  Angle indices that fall outside the cube
|l|_inf <= L are dropped; :func:`compose` can report the m-norm of what was
dropped.
"""

import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lattice import LatticeSpec, cube_modes, japanese_bracket, mode_index, to_coefficients, to_grid


@lru_cache(maxsize=64)
def _modes(spec):
    angle = cube_modes(spec.L, spec.n)
    space = cube_modes(spec.J, spec.d)
    return angle, space


@lru_cache(maxsize=64)
def _brackets(spec):
    angle, space = _modes(spec)
    return japanese_bracket(angle), japanese_bracket(space)


@lru_cache(maxsize=64)
def _differences(spec):
    """Euclidean |j - j'| as a matrix over spatial modes."""
    _, space = _modes(spec)
    diff = space[:, None, :] - space[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def angle_modes(spec):
    return _modes(spec)[0]


def space_modes(spec):
    return _modes(spec)[1]


@dataclass(frozen=True)
class NormProfile:
    """Exponents of the weighted norms: angle regularity s, spatial weights sigma1, sigma2, extra decay beta."""

    s: float = 0.0
    sigma1: float = 0.0
    sigma2: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.s < 0 or self.beta < 0:
            raise ValueError("s and beta must be non-negative")

    def replace(self, **kw):
        fields = dict(s=self.s, sigma1=self.sigma1, sigma2=self.sigma2, beta=self.beta)
        fields.update(kw)
        return NormProfile(**fields)


@dataclass(frozen=True)
class StructureFlags:
    real: bool
    reversible: bool
    reversibility_preserving: bool
    symmetric_hyperbolic_defect: float

    def as_dict(self):
        return dict(real=self.real, reversible=self.reversible,
                    reversibility_preserving=self.reversibility_preserving,
                    symmetric_hyperbolic_defect=self.symmetric_hyperbolic_defect)


class NeumannError(ArithmeticError):
    pass


class QPOperator:
    """Immutable family of blocks ``R(l)`` of shape (n_angle, n_space, n_space)."""

    __slots__ = ("spec", "blocks")

    def __init__(self, spec, blocks, copy=True):
        blocks = np.array(blocks, dtype=complex, copy=copy)
        shape = (spec.n_angle, spec.n_space, spec.n_space)
        if blocks.shape != shape:
            raise ValueError(f"blocks have shape {blocks.shape}, expected {shape}")
        if not np.all(np.isfinite(blocks)):
            raise ValueError("operator entries must be finite")
        blocks.flags.writeable = False
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "blocks", blocks)

    def __setattr__(self, name, value):
        raise AttributeError("QPOperator is immutable")

    # constructors
    @classmethod
    def zeros(cls, spec):
        return cls(spec, np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex), copy=False)

    @classmethod
    def identity(cls, spec):
        return cls.diagonal(spec, np.ones(spec.n_space))

    @classmethod
    def diagonal(cls, spec, values):
        """Angle-independent diagonal operator (a Fourier multiplier)."""
        blocks = np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex)
        blocks[spec.n_angle // 2] = np.diag(np.asarray(values, dtype=complex))
        return cls(spec, blocks, copy=False)

    @classmethod
    def from_block(cls, spec, l, matrix):
        blocks = np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex)
        blocks[mode_index(l, spec.L)] = matrix
        return cls(spec, blocks, copy=False)

    @classmethod
    def from_grid(cls, spec, values):
        """Blocks from matrices sampled on a uniform angle grid.

        ``values`` has shape grid_shape + (n_space, n_space) with n angle
        axes, each with at least 2L+1 points.
        """
        values = np.asarray(values)
        axes = tuple(range(spec.n))
        coeffs = to_coefficients(values, (spec.L,) * spec.n, axes=axes)
        return cls(spec, coeffs.reshape(spec.n_angle, spec.n_space, spec.n_space), copy=False)

    # views
    @property
    def zero_index(self):
        return self.spec.n_angle // 2

    def block(self, l):
        return self.blocks[mode_index(l, self.spec.L)]

    def angle_array(self):
        """Blocks reshaped to angle_shape + (n_space, n_space)."""
        s = self.spec
        return self.blocks.reshape(s.angle_shape + (s.n_space, s.n_space))

    def to_grid(self, size):
        """Matrices R(phi) on the uniform angle grid with ``size`` points per axis."""
        s = self.spec
        return to_grid(self.angle_array(), (size,) * s.n, axes=tuple(range(s.n)))

    def evaluate(self, phi):
        """The matrix R(phi) at a single angle point."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        phases = np.exp(1j * (angle_modes(self.spec) @ phi))
        return np.tensordot(phases, self.blocks, axes=(0, 0))

    def diagonal_average(self):
        """Diagonal of the l=0 block."""
        return np.diag(self.blocks[self.zero_index]).copy()

    def max_abs(self):
        return float(np.max(np.abs(self.blocks))) if self.blocks.size else 0.0

    # arithmetic
    def _check(self, other):
        if not isinstance(other, QPOperator):
            return NotImplemented
        if other.spec != self.spec:
            raise ValueError(f"lattice mismatch: {self.spec} vs {other.spec}")
        return True

    def __add__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return QPOperator(self.spec, self.blocks + other.blocks, copy=False)

    def __sub__(self, other):
        if self._check(other) is NotImplemented:
            return NotImplemented
        return QPOperator(self.spec, self.blocks - other.blocks, copy=False)

    def __neg__(self):
        return QPOperator(self.spec, -self.blocks, copy=False)

    def __mul__(self, c):
        if isinstance(c, QPOperator):
            return NotImplemented
        return QPOperator(self.spec, self.blocks * complex(c), copy=False)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return compose(self, other)

    def __eq__(self, other):
        return (isinstance(other, QPOperator) and other.spec == self.spec
                and np.array_equal(self.blocks, other.blocks))

    def __hash__(self):
        return hash((self.spec, self.blocks.tobytes()))

    def __repr__(self):
        return f"QPOperator({self.spec}, max|entry|={self.max_abs():.3e})"

    # truncation changes
    def restrict(self, spec):
        """Sub-lattice view: keep |j| <= spec.J and |l| <= spec.L."""
        return _reindex(self, spec)

    def embed(self, spec):
        """Zero-extend to a larger lattice."""
        return _reindex(self, spec)

    # serialization
    def to_bytes(self):
        s = self.spec
        header = b"QPOP" + struct.pack("<4q", s.d, s.n, s.J, s.L)
        return header + np.ascontiguousarray(self.blocks, dtype="<c16").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"QPOP":
            raise ValueError("not a serialized QPOperator")
        d, n, J, L = struct.unpack("<4q", data[4:36])
        spec = LatticeSpec(d, n, J, L)
        blocks = np.frombuffer(data[36:], dtype="<c16")
        return cls(spec, blocks.reshape(spec.n_angle, spec.n_space, spec.n_space))

    def to_json(self):
        s = self.spec
        flat = self.blocks.ravel()
        return json.dumps({"d": s.d, "n": s.n, "J": s.J, "L": s.L,
                           "real": flat.real.tolist(), "imag": flat.imag.tolist()})

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        spec = LatticeSpec(obj["d"], obj["n"], obj["J"], obj["L"])
        flat = np.array(obj["real"], dtype=float) + 1j * np.array(obj["imag"], dtype=float)
        return cls(spec, flat.reshape(spec.n_angle, spec.n_space, spec.n_space))

    def save(self, path):
        path = str(path)
        if path.endswith(".json"):
            with open(path, "w") as fh:
                fh.write(self.to_json())
        else:
            with open(path, "wb") as fh:
                fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        path = str(path)
        if path.endswith(".json"):
            with open(path) as fh:
                return cls.from_json(fh.read())
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _reindex(R, spec):
    src = R.spec
    if (spec.d, spec.n) != (src.d, src.n):
        raise ValueError("cannot change dimensions")
    Jc, Lc = min(src.J, spec.J), min(src.L, spec.L)
    sa = np.array([mode_index(l, src.L) for l in cube_modes(Lc, src.n)])
    ta = np.array([mode_index(l, spec.L) for l in cube_modes(Lc, src.n)])
    common = cube_modes(Jc, src.d)
    sj = np.array([mode_index(j, src.J) for j in common])
    tj = np.array([mode_index(j, spec.J) for j in common])
    out = np.zeros((spec.n_angle, spec.n_space, spec.n_space), complex)
    out[np.ix_(ta, tj, tj)] = R.blocks[np.ix_(sa, sj, sj)]
    return QPOperator(spec, out, copy=False)


def _fsum_sqrt(squares):
    return math.sqrt(math.fsum(np.ravel(squares)))


def hs_norm(M, sigma1=0.0, sigma2=0.0, d=1):
    """Weighted Hilbert-Schmidt norm of a matrix over the spatial modes of a d-cube.

    ( sum_{k,k'} <k>^{2 sigma2} |M_k^k'|^2 <k'>^{-2 sigma1} )^(1/2)
    """
    M = np.asarray(M)
    size = M.shape[0]
    J = int(round((size ** (1.0 / d) - 1) / 2))
    if (2 * J + 1) ** d != size:
        raise ValueError(f"matrix of size {size} is not a d={d} mode cube")
    br = japanese_bracket(cube_modes(J, d))
    w = br[:, None] ** sigma2 * br[None, :] ** (-sigma1)
    return _fsum_sqrt(np.abs(M * w) ** 2)


def _weighted_squares(R, profile, s=None):
    s = profile.s if s is None else s
    angle_br, space_br = _brackets(R.spec)
    w = (angle_br ** s)[:, None, None] * (space_br[:, None] ** profile.sigma2
                                          * space_br[None, :] ** (-profile.sigma1))[None]
    return np.abs(R.blocks * w) ** 2


def m_norm(R, profile=NormProfile()):
    """( sum_l <l>^{2s} (HS_{sigma1,sigma2} norm of R(l))^2 )^(1/2)."""
    return _fsum_sqrt(_weighted_squares(R, profile))


def grad_weight(R, beta):
    """Entrywise multiplication by <j - j'>^beta."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if beta == 0:
        return R
    w = np.sqrt(1.0 + _differences(R.spec) ** 2) ** beta
    return QPOperator(R.spec, R.blocks * w[None], copy=False)


def beta_norm(R, profile):
    """||R||_{s+beta} + ||<grad>^beta R||_s."""
    b = profile.beta
    return (m_norm(R, profile.replace(s=profile.s + b))
            + m_norm(grad_weight(R, b), profile))


def cutoff(R, N):
    """Split R = Pi_N R + Pi_N^perp R, Pi_N keeping |l| <= N and |j - j'| < N (Euclidean)."""
    if N < 1:
        raise ValueError("cutoff scale must be at least 1")
    lnorm = np.sqrt(np.sum(angle_modes(R.spec) ** 2, axis=1))
    keep = (lnorm <= N)[:, None, None] & (_differences(R.spec) < N)[None]
    low = np.where(keep, R.blocks, 0)
    return QPOperator(R.spec, low, copy=False), QPOperator(R.spec, R.blocks - low, copy=False)


def omega_derivative(R, omega):
    """omega . d/dphi, acting on block l as multiplication by i omega.l."""
    factor = 1j * (angle_modes(R.spec) @ np.asarray(omega, dtype=float))
    return QPOperator(R.spec, R.blocks * factor[:, None, None], copy=False)


def _nonzero_blocks(R):
    return np.flatnonzero(np.any(R.blocks != 0, axis=(1, 2)))


def compose(R, P, return_dropped=False):
    """Product (RP)(l) = sum_l' R(l - l') P(l'), clipped to |l|_inf <= L.

    With ``return_dropped`` also returns the m-norm (s = 0, unweighted) of
    the clipped tail.  Sparse angle supports are convolved directly; dense
    ones go through an angle grid of 4L+1 points per axis, which holds the
    full product without aliasing.
    """
    if R.spec != P.spec:
        raise ValueError(f"lattice mismatch: {R.spec} vs {P.spec}")
    spec = R.spec
    nr, np_ = _nonzero_blocks(R), _nonzero_blocks(P)
    grid = 4 * spec.L + 1
    if len(nr) * len(np_) <= grid ** spec.n:
        modes = angle_modes(spec)
        out = np.zeros_like(R.blocks)
        tail = {}
        for a in nr:
            for b in np_:
                l = modes[a] + modes[b]
                prod = R.blocks[a] @ P.blocks[b]
                if np.max(np.abs(l)) <= spec.L:
                    out[mode_index(l, spec.L)] += prod
                elif return_dropped:
                    key = tuple(l)
                    tail[key] = tail.get(key, 0) + prod
        result = QPOperator(spec, out, copy=False)
        if not return_dropped:
            return result
        dropped = math.sqrt(math.fsum(float(np.sum(np.abs(t) ** 2)) for t in tail.values()))
        return result, dropped
    axes = tuple(range(spec.n))
    Rg = to_grid(R.angle_array(), (grid,) * spec.n, axes=axes)
    Pg = to_grid(P.angle_array(), (grid,) * spec.n, axes=axes)
    full = to_coefficients(np.matmul(Rg, Pg), (2 * spec.L,) * spec.n, axes=axes)
    inner = tuple(slice(spec.L, 3 * spec.L + 1) for _ in range(spec.n))
    kept = full[inner].reshape(spec.n_angle, spec.n_space, spec.n_space)
    result = QPOperator(spec, kept, copy=False)
    if not return_dropped:
        return result
    mask = np.ones(full.shape[:spec.n], bool)
    mask[inner] = False
    dropped = _fsum_sqrt(np.abs(full[mask]) ** 2)
    return result, dropped


def commutator(A, B):
    return compose(A, B) - compose(B, A)


def adjoint(R):
    """Pointwise adjoint in phi: block l becomes the conjugate transpose of block -l."""
    return QPOperator(R.spec, np.conj(np.transpose(R.blocks[::-1], (0, 2, 1))), copy=False)


def neumann_inverse(X, tol=1e-14, max_terms=200, guard=None):
    """Return S = (Id + X)^{-1} - Id = sum_{k>=1} (-X)^k.

    The series is summed with clipped products; inside the clipped algebra
    (Id + X)(Id + S) = Id - (-X)^{K+1} for K terms, so the residual is the
    first omitted term.  The guard requires the unweighted m-norm with
    s = s0 = [n/2] + 1 to be below 1.
    """
    spec = X.spec
    if guard is None:
        guard = NormProfile(s=spec.n // 2 + 1)
    size = m_norm(X, guard)
    if size >= 1:
        raise NeumannError(f"Neumann series refused: norm {size:.3e} >= 1")
    scale = m_norm(X)
    total = QPOperator.zeros(spec)
    if scale == 0:
        return total
    term = -X
    for _ in range(max_terms):
        total = total + term
        term = compose(-X, term)
        if m_norm(term) <= tol * scale:
            return total
    raise NeumannError(f"Neumann series not converged after {max_terms} terms "
                       f"(last term {m_norm(term):.3e})")


def check_structure(R, tol=1e-12):
    """Reality / reversibility flags from the coefficient identities.

    With R'(l)_k^k' = R(-l)_{-k}^{-k'} (full index reversal in the lexicographic
    enumeration): real iff R = conj(R'), reversible iff R = -R',
    reversibility preserving iff R = R'.  Tolerances are relative to the
    largest entry.
    """
    B = R.blocks
    mirrored = B[::-1, ::-1, ::-1]
    scale = float(np.max(np.abs(B))) if B.size else 0.0
    bound = tol * scale

    def holds(diff):
        return bool(np.max(np.abs(diff)) <= bound) if scale > 0 else True

    defect = m_norm(R + adjoint(R))
    return StructureFlags(real=holds(B - np.conj(mirrored)),
                          reversible=holds(B + mirrored),
                          reversibility_preserving=holds(B - mirrored),
                          symmetric_hyperbolic_defect=defect)


def project_structure(R, real=False, parity=0):
    """Nearest operator with the requested coefficient identities.

    ``parity`` is -1 for reversible, +1 for reversibility preserving and 0
    for no parity constraint.  Returns the projection and the removed part
    relative to the largest entry.  The result satisfies the identities
    exactly in floating point, since only commutative sums are formed.
    """
    if parity not in (-1, 0, 1):
        raise ValueError("parity must be -1, 0 or 1")
    B = R.blocks
    out = B
    if parity:
        out = (out + parity * out[::-1, ::-1, ::-1]) / 2
    if real:
        out = (out + np.conj(out[::-1, ::-1, ::-1])) / 2
    scale = float(np.max(np.abs(B))) if B.size else 0.0
    removed = float(np.max(np.abs(B - out))) / scale if scale > 0 else 0.0
    return QPOperator(R.spec, out, copy=False), removed


def estimate_order(R):
    """Fitted exponent m such that column norms of R grow like <j'>^m.

    Column norms aggregate all blocks; the fit uses modes with
    J/4 <= |j'| <= 3J/4 to stay away from the origin and the truncation
    edge.  Returns nan when fewer than three usable columns remain.
    """
    spec = R.spec
    cols = np.sqrt(np.sum(np.abs(R.blocks) ** 2, axis=(0, 1)))
    _, space = _modes(spec)
    radius = np.sqrt(np.sum(space ** 2, axis=1))
    lo, hi = max(1.0, spec.J / 4), max(2.0, 3 * spec.J / 4)
    use = (radius >= lo) & (radius <= hi) & (cols > 0)
    br = _brackets(spec)[1][use]
    if np.count_nonzero(use) < 3 or np.ptp(np.log(br)) == 0:
        return float("nan")
    slope, _ = np.polyfit(np.log(br), np.log(cols[use]), 1)
    return float(slope)

"""Order-lowering conjugations H0 + Z + R -> H0 + Z' + R'.

H0 = diag(i nu0.j) is the straightened transport, Z a Fourier multiplier and
R the current remainder (eps already included).  Each step solves

    omega.d_phi G - [H0, G] = R - <R>,     <R> = diagonal of the l = 0 block,

and changes variables by u = exp(G(omega t)) v.  The new generator is

    exp(-G) H exp(G) - exp(-G) omega.d_phi exp(G)
        = sum_k ad_C^k(H)/k! + sum_k ad_C^k(omega.d_phi C)/(k+1)!,   C = -G,

and is returned as H0 + (Z + <R>) + R' with R' collected from the terms of
order two and higher, so no large diagonal is ever subtracted.
"""

from dataclasses import dataclass, field

import numpy as np

from .operator import (NormProfile, QPOperator, angle_modes, check_structure, commutator,
                       estimate_order, m_norm, omega_derivative, project_structure, space_modes)
from .lattice import japanese_bracket


class SeriesError(ArithmeticError):
    pass


class SmallDivisorExit(RuntimeError):
    def __init__(self, mode, margin):
        self.mode = tuple(int(v) for v in mode)
        self.margin = float(margin)
        super().__init__(f"small divisor at (l, j - j') = {self.mode}, margin {self.margin:.3e}")


def double_average(W):
    """Diagonal of the l = 0 block (the average over angles and translations)."""
    return W.diagonal_average()


def _diag_commutator(h, G):
    """[diag(h), G] entrywise: (h_j - h_j') G_j^j'."""
    return QPOperator(G.spec, G.blocks * (h[:, None] - h[None, :])[None], copy=False)


def smoothing_divisors(spec, omega, nu0):
    """omega.l + nu0.(j' - j) as an array (n_angle, n_space, n_space)."""
    wl = angle_modes(spec) @ np.asarray(omega, dtype=float)
    vj = space_modes(spec) @ np.asarray(nu0, dtype=float)
    return wl[:, None, None] + (vj[None, :] - vj[:, None])[None]


def _index_brackets(spec):
    la = angle_modes(spec)
    sm = space_modes(spec)
    diff = sm[None, :, :] - sm[:, None, :]
    l2 = np.sum(la ** 2, axis=1)
    k2 = np.sum(diff ** 2, axis=-1)
    return np.sqrt(1.0 + l2[:, None, None] + k2[None])


def solve_homological_smoothing(R, omega, nu0, gamma, tau):
    """G with omega.d_phi G - [H0, G] = R - <R>.

    G(l)_j^j' = R(l)_j^j' / (i(omega.l + nu0.(j' - j))) off the averaged
    entries, which are set to zero.  Raises :class:`SmallDivisorExit` if
    some |omega.l + nu0.(j' - j)| <= gamma/<(l, j' - j)>^tau.
    """
    spec = R.spec
    div = smoothing_divisors(spec, omega, nu0)
    margin = np.abs(div) - gamma / _index_brackets(spec) ** tau
    c = spec.n_angle // 2
    idx = np.arange(spec.n_space)
    margin[c, idx, idx] = np.inf
    worst = np.unravel_index(int(np.argmin(margin)), margin.shape)
    if margin[worst] <= 0:
        l = angle_modes(spec)[worst[0]]
        k = space_modes(spec)[worst[2]] - space_modes(spec)[worst[1]]
        raise SmallDivisorExit(tuple(l) + tuple(k), margin[worst])
    div = 1j * div
    div[c, idx, idx] = 1.0
    blocks = R.blocks / div
    blocks[c, idx, idx] = 0
    return QPOperator(spec, blocks, copy=False)


def homological_residual(G, R, omega, nu0):
    """m_norm of omega.d_phi G - [H0, G] - (R - <R>), relative to m_norm(R - <R>)."""
    h0 = 1j * (space_modes(R.spec) @ np.asarray(nu0, dtype=float))
    rhs = R - QPOperator.diagonal(R.spec, double_average(R))
    lhs = omega_derivative(G, omega) - _diag_commutator(h0, G)
    scale = m_norm(rhs)
    return m_norm(lhs - rhs) / scale if scale else m_norm(lhs)


def _series(C, starts, weights, series_tol, max_terms=80):
    """sum_{k>=1} sum_i weights[i](k) ad_C^k(starts[i]).

    Stops once the k-th contribution is below series_tol times the first.
    Returns the sum and the number of terms used.
    """
    current = list(starts)
    total = QPOperator.zeros(C.spec)
    first = None
    for k in range(1, max_terms + 1):
        current = [commutator(C, X) for X in current]
        term = QPOperator.zeros(C.spec)
        for w, X in zip(weights, current):
            term = term + w(k) * X
        total = total + term
        size = m_norm(term)
        if first is None:
            first = size
        if size <= series_tol * max(first, 1e-300) or size == 0:
            return total, k
    raise SeriesError(f"commutator series not converged after {max_terms} terms")


def _factorial(k):
    return float(np.prod(np.arange(1, k + 1))) if k > 0 else 1.0


def conjugate_full(H, G, omega, series_tol=1e-14):
    """Push-forward of the generator H under u = exp(G) v (no decomposition)."""
    C = -G
    dC = omega_derivative(C, omega)
    tail, _ = _series(C, [H, dC], [lambda k: 1 / _factorial(k), lambda k: 1 / _factorial(k + 1)],
                      series_tol)
    return H + dC + tail


def _guard_norm(G):
    return m_norm(G, NormProfile(s=G.spec.n // 2 + 1))


def exp_conjugate(h0, z, R, G, omega, series_tol=1e-12, guard=0.5):
    """One change of variables u = exp(G) v applied to H0 + diag(z) + R.

    Returns ``(z_new, R_new, info)`` with z_new = z + <R> and R_new the
    terms of order two and higher.  G is assumed to solve the homological
    equation, so [C, H0] + omega.d_phi C = -(R - <R>) is used exactly; the
    rounding-level defect of that identity is reported, not added, since
    it would otherwise dominate remainders that shrink by eps per step.
    """
    if _guard_norm(G) >= guard:
        raise SeriesError(f"generator too large for the exponential series: {_guard_norm(G):.3e}")
    spec = R.spec
    avg = double_average(R)
    z_new = z + avg
    C = -G
    S = -(R - QPOperator.diagonal(spec, avg))
    computed = omega_derivative(C, omega) - _diag_commutator(h0, C)
    Zop = QPOperator.diagonal(spec, z)
    tail, terms = _series(C, [Zop + R, S],
                          [lambda k: 1 / _factorial(k), lambda k: 1 / _factorial(k + 1)],
                          series_tol)
    info = {"series_terms": terms, "first_order_defect": m_norm(computed - S)}
    return z_new, tail, info


@dataclass
class SmoothingState:
    step: int
    nu0: np.ndarray
    z: np.ndarray
    W: QPOperator
    generators: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @property
    def h0(self):
        return 1j * (space_modes(self.W.spec) @ np.asarray(self.nu0, dtype=float))

    def full(self):
        return QPOperator.diagonal(self.W.spec, self.h0 + self.z) + self.W


def _step_diagnostics(step, W, z, G=None, residual=None, info=None):
    flags = check_structure(W)
    zflags = check_structure(QPOperator.diagonal(W.spec, z))
    out = {"step": step, "m_norm": m_norm(W), "order": estimate_order(W) if W.max_abs() > 0 else float("nan"),
           "structure": flags.as_dict(), "z_real": zflags.real, "z_reversible": zflags.reversible}
    if G is not None:
        gflags = check_structure(G)
        out["generator_norm"] = m_norm(G)
        out["generator_structure"] = gflags.as_dict()
    if residual is not None:
        out["homological_residual"] = residual
    if info:
        out.update(info)
    return out


def input_symmetry(W, tol=1e-12):
    """(real, parity) that W satisfies, for :func:`project_structure`."""
    flags = check_structure(W, tol)
    parity = -1 if flags.reversible else (1 if flags.reversibility_preserving else 0)
    if flags.reversible and flags.reversibility_preserving:
        parity = 0
    return flags.real, parity


def run_smoothing(W0, omega, nu0, gamma, tau, M, series_tol=1e-12, z0=None, keep_structure=True):
    """M order-lowering steps starting from H0 + diag(z0) + W0.

    With ``keep_structure`` the symmetries found in W0 are checked on every
    new remainder as computed, then imposed exactly before the next step.
    Small divisors would otherwise amplify rounding-level asymmetry by a
    constant factor per step relative to the shrinking remainder.  The
    removed part is reported as ``symmetry_projection``.
    """
    spec = W0.spec
    z = np.zeros(spec.n_space, complex) if z0 is None else np.asarray(z0, complex)
    real, parity = input_symmetry(W0) if keep_structure else (False, 0)
    state = SmoothingState(step=0, nu0=np.asarray(nu0, float), z=z, W=W0)
    state.diagnostics.append(_step_diagnostics(0, W0, z))
    for j in range(1, M + 1):
        R = state.W
        G = solve_homological_smoothing(R, omega, nu0, gamma, tau)
        res = homological_residual(G, R, omega, nu0)
        z_new, R_new, info = exp_conjugate(state.h0, state.z, R, G, omega, series_tol)
        diag = _step_diagnostics(j, R_new, z_new, G, res, info)
        if real or parity:
            R_new, removed = project_structure(R_new, real, parity)
            diag["symmetry_projection"] = removed
        state.generators.append(G)
        state.z, state.W, state.step = z_new, R_new, j
        state.diagnostics.append(diag)
    return state


def z_decay_exponent(z, spec):
    """Fitted growth exponent of |z(j)| in <j> over the interior modes."""
    modes = space_modes(spec)
    radius = np.sqrt(np.sum(modes ** 2, axis=1))
    use = (radius >= 1) & (radius <= 3 * spec.J / 4) & (np.abs(z) > 0)
    if np.count_nonzero(use) < 3:
        return float("nan")
    slope, _ = np.polyfit(np.log(japanese_bracket(modes[use])), np.log(np.abs(z[use])), 1)
    return float(slope)

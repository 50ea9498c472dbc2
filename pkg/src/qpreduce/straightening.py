"""Straightening the transport field by a quasi-periodic change of space variables.

We look for a displacement alpha(phi, x) in R^d and a constant vector nu0 with

    -omega.d_phi alpha + (nu + eps V).grad alpha + nu + eps V = nu0,

so that, writing u(t, x) = v(t, x + alpha(omega t, x)), the transport part of
du/dt = (nu + eps V).grad u becomes nu0.grad in v.  The minus sign comes from
the time derivative of the change of variables.  The unknown is found by
Picard iteration: nu0 is the mean of the pushed field and alpha solves the
constant-coefficient equation (-omega.d_phi + nu0.grad) alpha = rhs by
Fourier division.  The divisors -omega.l + nu0.j run over the same set as
omega.l + nu0.j, so the non-resonance check is unaffected.

Displacements are stored as centred coefficient arrays of shape
(d,) + (2L+1,)*n + (2J+1,)*d; grids used for products have twice the
resolution per axis.
"""

from dataclasses import dataclass, field

import numpy as np

from .lattice import cube_modes, japanese_bracket, to_coefficients, to_grid
from .operator import QPOperator
from .problem import field_coefficients


class DiophantineExit(RuntimeError):
    """A divisor fell below the non-resonance threshold."""

    def __init__(self, mode, margin, message=None):
        self.mode = tuple(int(v) for v in mode)
        self.margin = float(margin)
        super().__init__(message or f"small divisor at (l, j) = {self.mode}, margin {self.margin:.3e}")


class StraighteningError(RuntimeError):
    pass


@dataclass
class Diffeomorphism:
    """x -> x + alpha(phi, x) and its inverse y -> y + alpha_inv(phi, y)."""

    alpha: np.ndarray
    alpha_inv: np.ndarray
    n: int
    d: int
    L: int
    J: int
    roundtrip_error: float = 0.0
    jacobian_margin: float = 0.0

    def grid_values(self, inverse=False, angle_size=None, space_size=None):
        coeffs = self.alpha_inv if inverse else self.alpha
        sa = angle_size or 2 * (2 * self.L + 1)
        sx = space_size or 2 * (2 * self.J + 1)
        return to_grid(coeffs, (sa,) * self.n + (sx,) * self.d).real


@dataclass
class StraighteningResult:
    nu0: np.ndarray
    diffeo: Diffeomorphism
    residual: float
    diophantine_ok: bool
    iterations: int
    worst_margin: float
    worst_mode: tuple
    converged: bool = True
    history: list = field(default_factory=list)

    def drift_constant(self, nu, eps):
        """|nu0 - nu| / eps (nan at eps = 0)."""
        if eps == 0:
            return float("nan")
        return float(np.linalg.norm(self.nu0 - np.asarray(nu, dtype=float)) / eps)


def divisor_table(omega, nu0, L, J):
    """omega.l + nu0.j over the cube |l| <= L, |j| <= J, shape (2L+1,)*n + (2J+1,)*d."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    nu0 = np.atleast_1d(np.asarray(nu0, dtype=float))
    n, d = len(omega), len(nu0)
    la = [np.arange(-L, L + 1) * w for w in omega]
    ja = [np.arange(-J, J + 1) * v for v in nu0]
    grids = np.meshgrid(*(la + ja), indexing="ij")
    return sum(grids) if grids else np.zeros(())


def _bracket_table(n, d, L, J):
    axes = [np.arange(-L, L + 1)] * n + [np.arange(-J, J + 1)] * d
    grids = np.meshgrid(*axes, indexing="ij")
    return np.sqrt(1.0 + sum(g.astype(float) ** 2 for g in grids))


def diophantine_check(omega, nu0, gamma, tau, Lmax, Jmax):
    """Scan |omega.l + nu0.j| > gamma / <(l, j)>^tau over the truncated cube.

    Returns ``(ok, margin, mode)`` where margin is the smallest value of
    |omega.l + nu0.j| - gamma/<(l,j)>^tau over (l, j) != 0 and mode is the
    minimizing (l, j) flattened into one tuple.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    nu0 = np.atleast_1d(np.asarray(nu0, dtype=float))
    n, d = len(omega), len(nu0)
    div = np.abs(divisor_table(omega, nu0, Lmax, Jmax))
    margin = div - gamma / _bracket_table(n, d, Lmax, Jmax) ** tau
    centre = (Lmax,) * n + (Jmax,) * d
    margin[centre] = np.inf
    flat = int(np.argmin(margin))
    idx = np.unravel_index(flat, margin.shape)
    mode = tuple(int(i) - Lmax for i in idx[:n]) + tuple(int(i) - Jmax for i in idx[n:])
    worst = float(margin[idx])
    return worst > 0, worst, mode


def _derivative_factors(n, d, L, J):
    """i l_m and i j_i as broadcastable arrays over the centred coefficient cube."""
    shape = (2 * L + 1,) * n + (2 * J + 1,) * d
    out = []
    for axis in range(n + d):
        r = L if axis < n else J
        view = [1] * (n + d)
        view[axis] = shape[axis]
        out.append(1j * np.arange(-r, r + 1).reshape(view))
    return out[:n], out[n:]


def _pushed_field(alpha, V, omega, nu, eps, sizes, n, d, L, J):
    """Grid samples of -omega.d_phi alpha + nu + eps V + (nu + eps V).grad alpha."""
    dphi, dx = _derivative_factors(n, d, L, J)
    Vg = to_grid(V, sizes).real
    coef = np.asarray(nu, dtype=float).reshape((d,) + (1,) * (n + d)) + eps * Vg
    omega_dalpha = sum(w * f for w, f in zip(omega, dphi)) * alpha
    fieldv = coef - to_grid(omega_dalpha, sizes).real
    for i in range(d):
        grad_i = to_grid(dx[i] * alpha, sizes).real
        fieldv = fieldv + coef[i] * grad_i
    return fieldv, coef


def solve_straightening(V_terms, omega, nu, eps, gamma, tau, L, J, tol=1e-10, max_iter=200,
                        smallness=0.5):
    """Picard iteration for (alpha, nu0); see the module docstring.

    Raises :class:`DiophantineExit` when a divisor |omega.l + nu0.j| drops to
    gamma/<(l,j)>^tau or below.  Non-convergence is reported through
    ``converged`` and ``residual``.
    """
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    n, d = len(omega), len(nu)
    if eps / gamma > smallness:
        raise StraighteningError(f"eps/gamma = {eps / gamma:.3g} exceeds the smallness threshold {smallness}")
    V = field_coefficients(V_terms, d, n, L, J)
    sizes = (2 * (2 * L + 1),) * n + (2 * (2 * J + 1),) * d
    radii = (L,) * n + (J,) * d
    alpha = np.zeros_like(V)
    centre = (L,) * n + (J,) * d
    nu0 = nu.copy()
    history = []
    converged = False
    residual = np.inf
    it = 0
    ok, margin, mode = diophantine_check(omega, nu0, gamma, tau, L, J)
    for it in range(max_iter + 1):
        fieldv, coef = _pushed_field(alpha, V, omega, nu, eps, sizes, n, d, L, J)
        nu0 = fieldv.reshape(d, -1).mean(axis=1)
        residual = float(np.max(np.abs(fieldv - nu0.reshape((d,) + (1,) * (n + d)))))
        history.append(residual)
        if residual <= tol:
            converged = True
            break
        if it == max_iter:
            break
        ok, margin, mode = diophantine_check(omega, nu0, gamma, tau, L, J)
        if not ok:
            raise DiophantineExit(mode, margin)
        # rhs = nu0 - nu - eps V - (nu - nu0 + eps V).grad alpha
        _, dx = _derivative_factors(n, d, L, J)
        shift = coef - nu0.reshape((d,) + (1,) * (n + d))
        rhs = nu0.reshape((d,) + (1,) * (n + d)) - coef
        for i in range(d):
            rhs = rhs - shift[i] * to_grid(dx[i] * alpha, sizes).real
        rhs_hat = to_coefficients(rhs, radii)
        div = 1j * divisor_table(-omega, nu0, L, J)
        div[centre] = 1.0
        alpha = rhs_hat / div
        alpha[(slice(None),) + centre] = 0
    ok, margin, mode = diophantine_check(omega, nu0, gamma, tau, L, J)
    alpha_inv, err, jac = invert_diffeo(alpha, n, d, L, J)
    diffeo = Diffeomorphism(alpha, alpha_inv, n, d, L, J, roundtrip_error=err, jacobian_margin=jac)
    return StraighteningResult(nu0=nu0, diffeo=diffeo, residual=residual, diophantine_ok=ok,
                               iterations=it, worst_margin=margin, worst_mode=mode,
                               converged=converged, history=history)


def _eval_space_series(coeffs_phi, points, J, d):
    """Evaluate sum_j c_j e^{ij.x} at arbitrary points.

    coeffs_phi: (components, n_space) coefficients at one angle; points: (P, d).
    Returns values (components, P) and gradients (components, d, P).
    """
    modes = cube_modes(J, d)
    E = np.exp(1j * points @ modes.T)
    vals = (E @ coeffs_phi.T).T
    grads = np.stack([(E @ (coeffs_phi * (1j * modes[:, i])).T).T for i in range(d)], axis=1)
    return vals.real, grads.real


def _angle_samples(coeffs, n, d, L, J, angle_size):
    """Coefficients in x at every angle grid point, shape (G^n, components, n_space)."""
    comps = coeffs.shape[0]
    on_grid = to_grid(coeffs, (angle_size,) * n, axes=tuple(range(1, n + 1)))
    on_grid = np.moveaxis(on_grid.reshape((comps,) + (angle_size,) * n + (-1,)), 0, n)
    return on_grid.reshape((angle_size ** n, comps, (2 * J + 1) ** d))


def invert_diffeo(alpha, n, d, L, J, tol=1e-14, max_iter=50):
    """Inverse displacement by per-point Newton on a doubled grid.

    Returns ``(alpha_inv, roundtrip_error, jacobian_margin)``: the
    coefficients of the inverse displacement, the largest defect of
    x -> x + alpha -> (x + alpha) + alpha_inv(x + alpha) - x on the grid,
    and 1 - sup |grad alpha| (operator 2-norm).
    """
    alpha = np.asarray(alpha, dtype=complex)
    sa = 2 * (2 * L + 1)
    sx = 2 * (2 * J + 1)
    per_angle = _angle_samples(alpha, n, d, L, J, sa)
    axes = np.meshgrid(*([2 * np.pi * np.arange(sx) / sx] * d), indexing="ij")
    y = np.stack([a.ravel() for a in axes], axis=1)
    inv_grid = np.zeros((sa ** n, d, y.shape[0]))
    sup_grad = 0.0
    for a, coeffs_phi in enumerate(per_angle):
        vals, grads = _eval_space_series(coeffs_phi, y, J, d)
        jac_norm = np.linalg.norm(np.transpose(grads, (2, 0, 1)), ord=2, axis=(1, 2))
        sup_grad = max(sup_grad, float(np.max(jac_norm)))
        x = y - vals.T
        for _ in range(max_iter):
            vals, grads = _eval_space_series(coeffs_phi, x, J, d)
            F = x + vals.T - y
            Jm = np.eye(d)[None] + np.transpose(grads, (2, 0, 1))
            step = np.linalg.solve(Jm, F[..., None])[..., 0]
            x = x - step
            if np.max(np.abs(step)) <= tol:
                break
        inv_grid[a] = (x - y).T
    if sup_grad >= 1:
        raise StraighteningError(f"Jacobian margin violated: sup|grad alpha| = {sup_grad:.3f}")
    inv_grid = inv_grid.reshape((sa,) * n + (d,) + (sx,) * d)
    inv_grid = np.moveaxis(inv_grid, n, 0)
    alpha_inv = to_coefficients(inv_grid, (L,) * n + (J,) * d)
    err = roundtrip_error(alpha, alpha_inv, n, d, L, J)
    return alpha_inv, err, 1.0 - sup_grad


def roundtrip_error(alpha, alpha_inv, n, d, L, J, space_size=None):
    """sup over the grid of |(x + alpha(x)) + alpha_inv(x + alpha(x)) - x|."""
    sa = 2 * (2 * L + 1)
    sx = space_size or 2 * (2 * J + 1) + 1
    fwd = _angle_samples(np.asarray(alpha, complex), n, d, L, J, sa)
    inv = _angle_samples(np.asarray(alpha_inv, complex), n, d, L, J, sa)
    axes = np.meshgrid(*([2 * np.pi * np.arange(sx) / sx] * d), indexing="ij")
    x = np.stack([a.ravel() for a in axes], axis=1)
    worst = 0.0
    for cf, ci in zip(fwd, inv):
        vf, _ = _eval_space_series(cf, x, J, d)
        y = x + vf.T
        vi, _ = _eval_space_series(ci, y, J, d)
        worst = max(worst, float(np.max(np.abs(y + vi.T - x))))
    return worst


def composition_operator(diffeo, direction, spec, oversample=2):
    """Matrix blocks of u(x) -> u(x + alpha(phi, x)) (or alpha_inv for 'inverse').

    For each angle grid point the columns e^{ij'.(x + alpha)} are sampled on
    an oversampled grid and transformed; the angle grid is then transformed
    into blocks.  ``spec`` may use a larger J than the displacement itself.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    if (spec.n, spec.d) != (diffeo.n, diffeo.d):
        raise ValueError("lattice dimensions do not match the diffeomorphism")
    n, d = spec.n, spec.d
    coeffs = diffeo.alpha_inv if direction == "inverse" else diffeo.alpha
    sa = oversample * (2 * spec.L + 1)
    sx = oversample * (2 * spec.J + 1)
    sx = max(sx, 2 * (2 * diffeo.J + 1))
    disp = to_grid(coeffs, (sa,) * n + (sx,) * d).real
    disp = np.moveaxis(disp, 0, n)
    disp = disp.reshape((sa ** n, d) + (sx,) * d)
    axes = np.meshgrid(*([2 * np.pi * np.arange(sx) / sx] * d), indexing="ij")
    xgrid = np.stack(axes)
    modes = cube_modes(spec.J, d)
    out = np.empty((sa ** n, spec.n_space, spec.n_space), complex)
    for a in range(sa ** n):
        moved = xgrid + disp[a]
        phase = np.tensordot(modes, moved, axes=(1, 0))
        cols = to_coefficients(np.exp(1j * phase), (spec.J,) * d)
        out[a] = cols.reshape(spec.n_space, spec.n_space).T
    values = out.reshape((sa,) * n + (spec.n_space, spec.n_space))
    return QPOperator.from_grid(spec, values)


def field_after_straightening(result, V_terms, omega, nu, eps):
    """Pushed field evaluated at y + alpha_inv(phi, y) on the grid.

    This is the straightened transport coefficient computed directly from
    the change of variables; it should equal nu0 everywhere.
    """
    dfm = result.diffeo
    n, d, L, J = dfm.n, dfm.d, dfm.L, dfm.J
    V = field_coefficients(V_terms, d, n, L, J)
    sizes = (2 * (2 * L + 1),) * n + (2 * (2 * J + 1),) * d
    fieldv, _ = _pushed_field(dfm.alpha, V, np.atleast_1d(omega), nu, eps, sizes, n, d, L, J)
    # the pushed field holds modes up to (2L, 2J); evaluate its series at displaced points
    fhat = to_coefficients(fieldv, (2 * L,) * n + (2 * J,) * d)
    sa = sizes[0]
    per_angle_f = _angle_samples(fhat, n, d, 2 * L, 2 * J, sa)
    per_angle_inv = _angle_samples(dfm.alpha_inv, n, d, L, J, sa)
    sx = 2 * (2 * J + 1)
    axes = np.meshgrid(*([2 * np.pi * np.arange(sx) / sx] * d), indexing="ij")
    y = np.stack([a.ravel() for a in axes], axis=1)
    out = np.empty((sa ** n, d, y.shape[0]))
    for a in range(sa ** n):
        vi, _ = _eval_space_series(per_angle_inv[a], y, J, d)
        x = y + vi.T
        vf, _ = _eval_space_series(per_angle_f[a], x, 2 * J, d)
        out[a] = vf
    return out


def is_odd(coeffs):
    """Largest violation of f(-phi, -x) = -f(phi, x) for real centred coefficients."""
    c = np.asarray(coeffs)
    flipped = c[(slice(None),) + (slice(None, None, -1),) * (c.ndim - 1)]
    scale = max(float(np.max(np.abs(c))), 1e-300)
    return float(np.max(np.abs(c + flipped))) / scale

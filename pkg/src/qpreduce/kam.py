"""KAM reducibility of A + P(omega t), A diagonal, P small and smoothing.

Each step solves

    [A, X] - omega.d_phi X = Pbar - Pi_N P,     Pbar = diagonal of the l = 0 block,

entrywise X(l)_j^j' = P(l)_j^j' / (i omega.l + lam_j' - lam_j), and changes
variables by u = (Id + X(omega t)) v.  The new remainder is

    P+ = Pi_N^perp P + P X + (Phi^{-1} - Id)(Pbar + Pi_N^perp P + P X)

with Phi^{-1} - Id from a Neumann series, and the new diagonal is A + Pbar.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import cube_modes, japanese_bracket
from .operator import (NormProfile, QPOperator, angle_modes, beta_norm, check_structure, compose,
                       cutoff, hs_norm, m_norm, neumann_inverse, omega_derivative,
                       project_structure, space_modes)


class MelnikovExit(RuntimeError):
    def __init__(self, tuple_, margin, step=None):
        self.offender = tuple_
        self.margin = float(margin)
        self.step = step
        l, j, jp = tuple_
        super().__init__(f"Melnikov condition fails at l={l}, j={j}, j'={jp} "
                         f"(margin {self.margin:.3e}, step {step})")


class KAMDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class KAMConstants:
    tau: float
    gamma: float
    s: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def alpha(self):
        return 12 * self.tau + 7

    @property
    def beta(self):
        return self.alpha + 1

    @property
    def m(self):
        return 2 * self.tau + 2

    @property
    def N0(self):
        return 1.0 / self.gamma

    def N(self, k):
        if k < 0:
            return 1.0
        return self.N0 ** (1.5 ** k)

    @property
    def profile(self):
        return NormProfile(s=self.s, sigma1=self.sigma, sigma2=self.sigma)

    @property
    def weighted_profile(self):
        return NormProfile(s=self.s, sigma1=self.sigma - self.m, sigma2=self.sigma + self.m)

    def as_dict(self):
        return dict(tau=self.tau, gamma=self.gamma, alpha=self.alpha, beta=self.beta, m=self.m,
                    N0=self.N0, s=self.s, sigma=self.sigma)


@dataclass
class DiagonalSpectrum:
    """lam_j = i nu0.j + z(j) + rho_j over the spatial modes of a lattice."""

    modes: np.ndarray
    nu0: np.ndarray
    z: np.ndarray
    rho: np.ndarray

    @classmethod
    def free(cls, spec, nu0, z=None):
        modes = space_modes(spec)
        z = np.zeros(len(modes), complex) if z is None else np.asarray(z, complex)
        return cls(modes, np.asarray(nu0, float), z, np.zeros(len(modes), complex))

    @property
    def transport(self):
        return 1j * (self.modes @ self.nu0)

    @property
    def lam(self):
        return self.transport + self.z + self.rho

    def shifted(self, delta):
        return DiagonalSpectrum(self.modes, self.nu0, self.z, self.rho + delta)

    def operator(self, spec):
        return QPOperator.diagonal(spec, self.lam)

    def max_real_part(self):
        return float(np.max(np.abs(self.lam.real)))

    def to_dict(self):
        out = {}
        for mode, t, z, r in zip(self.modes, self.transport, self.z, self.rho):
            lam = t + z + r
            out[",".join(str(int(v)) for v in mode)] = {
                "lambda": [float(lam.real), float(lam.imag)],
                "z": [float(z.real), float(z.imag)],
                "rho": [float(r.real), float(r.imag)]}
        return {"nu0": [float(v) for v in self.nu0], "modes": out}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def melnikov_margin(lam, modes, omega, l, j, jp, gamma, tau):
    """|i omega.l + lam_j - lam_j'| - gamma/(<l><j><j'>)^tau for one tuple.

    ``lam`` is indexed like ``modes``; j and j' are modes, not indices.
    Returns inf for the excluded tuples (0, j, j).
    """
    l = np.atleast_1d(np.asarray(l, dtype=float))
    j = np.atleast_1d(np.asarray(j))
    jp = np.atleast_1d(np.asarray(jp))
    if not np.any(l) and np.array_equal(j, jp):
        return float("inf")
    lookup = {tuple(int(v) for v in m): i for i, m in enumerate(np.asarray(modes))}
    a, b = lookup[tuple(int(v) for v in j)], lookup[tuple(int(v) for v in jp)]
    div = abs(1j * float(np.dot(omega, l)) + lam[a] - lam[b])
    weight = (japanese_bracket(l) * japanese_bracket(j) * japanese_bracket(jp)) ** tau
    return float(div - gamma / weight)


def melnikov_scan(lam, modes, omega, gamma, tau, Lmax, N=None):
    """Worst margin over |l|_inf <= Lmax (and |l|, |j - j'| <= N if given).

    Returns ``(ok, margin, (l, j, j'))``; the tuples (0, j, j) are skipped.
    """
    modes = np.asarray(modes)
    n = len(np.atleast_1d(omega))
    ls = cube_modes(int(Lmax), n)
    if N is not None:
        ls = ls[np.sqrt(np.sum(ls ** 2, axis=1)) <= N]
    lam = np.asarray(lam, complex)
    br = japanese_bracket(modes) ** tau
    pair_weight = br[:, None] * br[None, :]
    diff = lam[:, None] - lam[None, :]
    allowed = np.ones_like(pair_weight, dtype=bool)
    if N is not None:
        dist = np.sqrt(np.sum((modes[:, None, :] - modes[None, :, :]) ** 2, axis=-1))
        allowed = dist <= N
    eye = np.eye(len(modes), dtype=bool)
    worst, where = np.inf, None
    for l in ls:
        wl = float(np.dot(omega, l))
        margin = np.abs(1j * wl + diff) - gamma / (japanese_bracket(l) ** tau * pair_weight)
        mask = allowed & ~eye if not np.any(l) else allowed
        if not np.any(mask):
            continue
        margin = np.where(mask, margin, np.inf)
        idx = np.unravel_index(int(np.argmin(margin)), margin.shape)
        if margin[idx] < worst:
            worst = float(margin[idx])
            where = (tuple(int(v) for v in l), tuple(int(v) for v in modes[idx[0]]),
                     tuple(int(v) for v in modes[idx[1]]))
    return worst >= 0, worst, where


def check_melnikov_set(A, omega, gamma, tau, N, Lmax):
    """Melnikov conditions at scale N for the tuples of an angle cube of radius Lmax."""
    return melnikov_scan(A.lam, A.modes, omega, gamma, tau, Lmax, N)


def kam_divisors(spec, omega, lam):
    """i omega.l + lam_j' - lam_j as an array (n_angle, n_space, n_space)."""
    wl = 1j * (angle_modes(spec) @ np.asarray(omega, dtype=float))
    lam = np.asarray(lam, complex)
    return wl[:, None, None] + (lam[None, :] - lam[:, None])[None]


def solve_homological_kam(P, A, omega, N):
    """(X, Pbar) with [A, X] - omega.d_phi X = Pbar - Pi_N P.

    X lives on the support of Pi_N P minus the averaged entries.  The
    caller is responsible for the Melnikov check.
    """
    spec = P.spec
    low, _ = cutoff(P, N)
    c = spec.n_angle // 2
    idx = np.arange(spec.n_space)
    pbar = np.diag(P.blocks[c]).copy()
    div = kam_divisors(spec, omega, A.lam)
    div[c, idx, idx] = 1.0
    blocks = low.blocks / div
    blocks[c, idx, idx] = 0
    return QPOperator(spec, blocks, copy=False), pbar


def kam_homological_residual(X, P, A, omega, N):
    """Relative m-norm of [A, X] - omega.d_phi X - Pbar + Pi_N P."""
    spec = P.spec
    low, _ = cutoff(P, N)
    pbar = QPOperator.diagonal(spec, P.diagonal_average())
    lam = A.lam
    comm = QPOperator(spec, X.blocks * (lam[:, None] - lam[None, :])[None], copy=False)
    lhs = comm - omega_derivative(X, omega)
    rhs = pbar - low
    scale = m_norm(rhs)
    return m_norm(lhs - rhs) / scale if scale else m_norm(lhs)


@dataclass
class KAMTrace:
    rows: list = field(default_factory=list)
    spectra: list = field(default_factory=list)
    scales: list = field(default_factory=list)

    columns = ("k", "N_k", "m_norm", "m_norm_weighted", "beta_norm", "worst_margin",
               "max_dlambda", "homological_residual", "neumann_guard", "symmetry_projection")

    def norms(self):
        return np.array([r["m_norm"] for r in self.rows])

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow([_fmt(r.get(c, "")) for c in self.columns])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


@dataclass
class KAMState:
    k: int
    A: DiagonalSpectrum
    P: QPOperator
    V: QPOperator
    trace: KAMTrace = field(default_factory=KAMTrace)
    symmetry: tuple = (False, 0)


def _push_forward(H, Phi, omega, tol=1e-15):
    """Phi^{-1} (H Phi - omega.d_phi Phi) with Phi = Id + X."""
    X = Phi - QPOperator.identity(Phi.spec)
    inv = QPOperator.identity(Phi.spec) + neumann_inverse(X, tol=tol)
    return compose(inv, compose(H, Phi) - omega_derivative(Phi, omega))


def kam_step(state, consts, omega):
    """One reducibility step at scale N_k.  Raises :class:`MelnikovExit`."""
    spec = state.P.spec
    k = state.k
    N = consts.N(k)
    P = state.P
    ok, margin, where = check_melnikov_set(state.A, omega, consts.gamma, consts.tau, N, spec.L)
    if not ok:
        raise MelnikovExit(where, margin, step=k)
    X, pbar = solve_homological_kam(P, state.A, omega, N)
    residual = kam_homological_residual(X, P, state.A, omega, N)
    _, high = cutoff(P, N)
    PX = compose(P, X)
    guard = m_norm(X, NormProfile(s=spec.n // 2 + 1))
    S = neumann_inverse(X)
    Q = QPOperator.diagonal(spec, pbar) + high + PX
    P_new = high + PX + compose(S, Q)
    real, parity = state.symmetry
    removed = 0.0
    if real or parity:
        P_new, removed = project_structure(P_new, real, parity)
    A_new = state.A.shifted(pbar)
    V_new = compose(state.V, QPOperator.identity(spec) + X)
    row = _trace_row(k, N, P, consts, margin, pbar, residual, guard, removed)
    row["structure_P"] = check_structure(P).as_dict()
    row["structure_X"] = check_structure(X).as_dict()
    row["dlambda_bound_ok"] = increment_bound_holds(P, consts)
    trace = state.trace
    trace.rows.append(row)
    trace.spectra.append(state.A)
    trace.scales.append(N)
    return KAMState(k + 1, A_new, P_new, V_new, trace, state.symmetry)


def increment_bound_holds(P, consts):
    """|P(0)_j^j| <= hs_norm(P(0); sigma, sigma + 2m) <j>^{-2m} for every j."""
    spec = P.spec
    block = P.blocks[spec.n_angle // 2]
    kappa = 2 * consts.m
    bound = hs_norm(block, consts.sigma, consts.sigma + kappa, spec.d)
    br = japanese_bracket(space_modes(spec))
    return bool(np.all(np.abs(np.diag(block)) <= bound * br ** (-kappa) * (1 + 1e-12)))


def _trace_row(k, N, P, consts, margin, pbar, residual, guard, removed):
    bprofile = consts.profile.replace(beta=consts.beta)
    return {"k": k, "N_k": float(N), "m_norm": m_norm(P, consts.profile),
            "m_norm_weighted": m_norm(P, consts.weighted_profile),
            "beta_norm": beta_norm(P, bprofile), "worst_margin": float(margin),
            "max_dlambda": float(np.max(np.abs(pbar))) if pbar.size else 0.0,
            "homological_residual": float(residual), "neumann_guard": float(guard),
            "symmetry_projection": float(removed)}


def kam_reduce(A0, P0, consts, omega, max_steps=12, stop_tol=1e-13, keep_structure=True):
    """Iterate :func:`kam_step` until m_norm(P_k) <= stop_tol * m_norm(P_0).

    Returns ``(spectrum, V_inf, trace)``.  The trace holds one row per
    step taken and a final row for the last remainder; ``trace.spectra``
    holds the spectrum used at each step.  Raises :class:`KAMDivergence`
    when the norm grows on two consecutive steps.
    """
    spec = P0.spec
    symmetry = (False, 0)
    if keep_structure:
        from .smoothing import input_symmetry
        symmetry = input_symmetry(P0)
    state = KAMState(0, A0, P0, QPOperator.identity(spec), KAMTrace(), symmetry)
    start = m_norm(P0, consts.profile)
    growth = 0
    previous = start
    while state.k < max_steps:
        size = m_norm(state.P, consts.profile)
        if size == 0 or size <= stop_tol * start:
            break
        state = kam_step(state, consts, omega)
        size = m_norm(state.P, consts.profile)
        growth = growth + 1 if size > previous else 0
        if growth >= 2:
            raise KAMDivergence(f"remainder grew on two consecutive steps (now {size:.3e})")
        previous = size
    N = consts.N(state.k)
    final = _trace_row(state.k, N, state.P, consts, float("nan"), np.zeros(0), float("nan"),
                       float("nan"), 0.0)
    final["structure_P"] = check_structure(state.P).as_dict()
    state.trace.rows.append(final)
    return state.A, state.V, state.trace, state.P


def recursion_constants(trace, consts):
    """Per-step ratios ||P_{k+1}|| / (N_k^{4tau+2} ||P_k||^2 + N_k^{-beta} beta_norm(P_k)).

    The smallest single constant making the recursion inequality hold on
    every step is the maximum of these ratios.
    """
    rows = trace.rows
    out = []
    for a, b in zip(rows[:-1], rows[1:]):
        N = a["N_k"]
        bound = N ** (4 * consts.tau + 2) * a["m_norm"] ** 2 + N ** (-consts.beta) * a["beta_norm"]
        out.append(b["m_norm"] / bound if bound > 0 else (0.0 if b["m_norm"] == 0 else np.inf))
    return np.array(out)


def log_concave_decreasing(norms):
    """True when the positive norms strictly decrease with concave logarithms."""
    norms = np.asarray(norms, float)
    norms = norms[norms > 0]
    if len(norms) < 3:
        return False
    logs = np.log(norms)
    steps = np.diff(logs)
    return bool(np.all(steps < 0) and np.all(np.diff(steps) < 0))


def final_cantor_check(spectrum, omega, gamma, tau, Lmax, trace=None):
    """Final conditions with constant 2 gamma, plus the re-scan of earlier scales.

    Returns ``(ok, margin, offender, counterexamples)``.  When the final
    check passes and a trace is given, every recorded spectrum is checked
    with constant gamma on the tuples of its recorded scale N_k; ``counterexamples``
    lists the steps where that fails.
    """
    ok, margin, where = melnikov_scan(spectrum.lam, spectrum.modes, omega, 2 * gamma, tau, Lmax)
    bad = []
    if ok and trace is not None:
        for k, (A, N) in enumerate(zip(trace.spectra, trace.scales)):
            step_ok, step_margin, step_where = melnikov_scan(A.lam, A.modes, omega, gamma, tau,
                                                             Lmax, N)
            if not step_ok:
                bad.append({"step": k, "margin": step_margin, "offender": step_where})
    return ok, margin, where, bad

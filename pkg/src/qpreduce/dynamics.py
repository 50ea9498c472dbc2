"""Time evolution of du/dt = H(omega t) u on the Fourier lattice.

H(phi) = D + N(phi) with D = diag(i nu.j) and N(phi) the rest of the
generator (transport perturbation plus W), both as quasi-periodic operators.
Two independent integrators are provided; the reduced evolution pushes the
diagonal flow through the composed change of variables.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, lu_factor, lu_solve

from .lattice import japanese_bracket
from .operator import QPOperator, space_modes


@dataclass
class EvolutionConfig:
    T: float = 100.0
    dt: float = 0.05
    integrator: str = "strang_splitting"
    sigma: float = 1.0
    record_every: int = 10
    overflow: float = 1e200

    def __post_init__(self):
        if self.integrator not in ("strang_splitting", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.dt == 0 or self.T * self.dt < 0:
            raise ValueError("dt must be nonzero with the sign of T")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")

    @property
    def steps(self):
        return int(round(self.T / self.dt))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    sobolev: np.ndarray
    l2: np.ndarray
    tag: str = "ok"
    info: dict = field(default_factory=dict)

    def to_csv(self, extra=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["t", "hs_norm", "l2_norm"] + (list(extra) if extra else [])
        w.writerow(cols)
        for i, t in enumerate(self.times):
            row = [repr(float(t)), repr(float(self.sobolev[i])), repr(float(self.l2[i]))]
            if extra:
                row += [repr(float(v[i])) for v in extra.values()]
            w.writerow(row)
        return buf.getvalue()


def sobolev_norm(u, modes, sigma):
    """(sum <j>^{2 sigma} |u_j|^2)^(1/2), over the last axis."""
    w = japanese_bracket(modes) ** sigma
    return np.sqrt(np.sum(np.abs(u * w) ** 2, axis=-1))


def analytic_datum(spec, rate=0.5):
    """u0_j = rate^{|j|_1}, an analytic real even function."""
    modes = space_modes(spec)
    return rate ** np.sum(np.abs(modes), axis=1) + 0j


def mode_datum(spec, mode):
    u = np.zeros(spec.n_space, complex)
    modes = space_modes(spec)
    u[np.flatnonzero(np.all(modes == np.asarray(mode), axis=1))[0]] = 1.0
    return u


def split_generator(H):
    """(diagonal of the l = 0 block, H minus that diagonal)."""
    d = H.diagonal_average()
    return d, H - QPOperator.diagonal(H.spec, d)


def stability_report(H, dt):
    """dt times the largest diagonal frequency and the largest off-diagonal row sum."""
    d, N = split_generator(H)
    rows = np.sum(np.abs(N.blocks), axis=(0, 2))
    return {"dt_times_diagonal": float(abs(dt) * np.max(np.abs(d))),
            "dt_times_rest": float(abs(dt) * np.max(rows))}


def _strang_step(d, N, omega, t, h, u):
    half = np.exp(0.5 * h * d)
    u = half * u
    M = N.evaluate(np.asarray(omega) * (t + 0.5 * h))
    eye = np.eye(len(u))
    u = lu_solve(lu_factor(eye - 0.5 * h * M), (eye + 0.5 * h * M) @ u)
    return half * u


def _lawson_step(d, N, omega, t, h, u):
    # RK4 for v = exp(-d t) u, which removes the stiff diagonal exactly.
    def rhs(s, e, v):
        M = N.evaluate(np.asarray(omega) * (t + s))
        return (M @ (e * v)) / e

    e0 = np.ones_like(d)
    eh2 = np.exp(0.5 * h * d)
    eh = np.exp(h * d)
    k1 = rhs(0.0, e0, u)
    k2 = rhs(0.5 * h, eh2, u + 0.5 * h * k1)
    k3 = rhs(0.5 * h, eh2, u + 0.5 * h * k2)
    k4 = rhs(h, eh, u + h * k3)
    return eh * (u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))


def evolve_direct(cfg, H, omega, u0):
    """Integrate du/dt = H(omega t) u from t = 0 to cfg.T.

    ``H`` is the full generator as a :class:`QPOperator`.  Stops early
    with tag ``"blowup"`` once the l2 norm exceeds ``cfg.overflow``.
    """
    spec = H.spec
    modes = space_modes(spec)
    d, N = split_generator(H)
    step = _strang_step if cfg.integrator == "strang_splitting" else _lawson_step
    u = np.asarray(u0, complex).copy()
    times, states = [0.0], [u.copy()]
    tag = "ok"
    h = cfg.dt
    for i in range(1, cfg.steps + 1):
        u = step(d, N, omega, (i - 1) * h, h, u)
        if not np.all(np.isfinite(u)) or np.linalg.norm(u) > cfg.overflow:
            tag = "blowup"
            break
        if i % cfg.record_every == 0 or i == cfg.steps:
            times.append(i * h)
            states.append(u.copy())
    states = np.array(states)
    info = stability_report(H, h)
    return Trajectory(np.array(times), states, sobolev_norm(states, modes, cfg.sigma),
                      np.linalg.norm(states, axis=1), tag, info)


@dataclass
class ReductionChain:
    """Factors of U(phi) = A(phi) exp(G_1(phi)) ... exp(G_M(phi)) V(phi)."""

    A: QPOperator
    generators: list
    V: QPOperator
    lam: np.ndarray

    def matrix(self, phi):
        U = self.A.evaluate(phi)
        for G in self.generators:
            U = U @ expm(G.evaluate(phi))
        return U @ self.V.evaluate(phi)

    def inverse_apply(self, phi, u):
        """U(phi)^{-1} u through one solve or exponential per factor."""
        v = np.linalg.solve(self.A.evaluate(phi), u)
        for G in self.generators:
            v = expm(-G.evaluate(phi)) @ v
        return np.linalg.solve(self.V.evaluate(phi), v)


def evolve_reduced(chain, cfg, omega, u0, times=None):
    """u(t) = U(omega t) diag(exp(lam t)) U(0)^{-1} u0 at the recorded times."""
    spec = chain.A.spec
    modes = space_modes(spec)
    if times is None:
        n = cfg.steps
        idx = [i for i in range(n + 1) if i % cfg.record_every == 0 or i == n]
        times = np.array(idx, float) * cfg.dt
    omega = np.asarray(omega, float)
    v0 = chain.inverse_apply(np.zeros_like(omega), np.asarray(u0, complex))
    states = np.array([chain.matrix(omega * t) @ (np.exp(chain.lam * t) * v0) for t in times])
    return Trajectory(np.asarray(times, float), states, sobolev_norm(states, modes, cfg.sigma),
                      np.linalg.norm(states, axis=1))


def trajectory_distance(a, b, modes, sigma):
    """H^sigma distance per recorded time (the trajectories must share times)."""
    if len(a.times) != len(b.times) or not np.allclose(a.times, b.times):
        raise ValueError("trajectories are recorded at different times")
    return sobolev_norm(a.states - b.states, modes, sigma)


@dataclass(frozen=True)
class Classification:
    kind: str
    rate: float
    r2: float

    def as_dict(self):
        return {"kind": self.kind, "rate": self.rate, "r2": self.r2}


def growth_classifier(times, norms, tol_rate=1e-4, min_r2=0.99):
    """bounded / exponential / undecided from a linear fit of log norm against t."""
    times = np.asarray(times, float)
    norms = np.asarray(norms, float)
    if len(norms) < 100:
        raise ValueError("need at least 100 samples to classify growth")
    logs = np.log(norms)
    slope, intercept = np.polyfit(times, logs, 1)
    fit = slope * times + intercept
    ss_res = float(np.sum((logs - fit) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if abs(slope) <= tol_rate:
        return Classification("bounded", float(slope), r2)
    if slope >= tol_rate and r2 >= min_r2:
        return Classification("exponential", float(slope), r2)
    return Classification("undecided", float(slope), r2)

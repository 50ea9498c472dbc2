"""Monte Carlo estimate of the parameters excluded by the non-resonance conditions.

For each sampled (omega, nu) in [1, 2]^{n+d} two normalized margins are
computed once:

    mu_D = min |omega.l + nu0.k| <(l, k)>^tau                over (l, k) != 0,
    mu_F = min |i omega.l + lam_j - lam_j'| (<l><j><j'>)^tau  over (l, j, j') != (0, j, j),

and the sample is excluded at level gamma when mu_D <= gamma or
mu_F < 2 gamma.  Exclusion sets therefore nest in gamma by construction.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .lattice import cube_modes, japanese_bracket


def sample_parameters(seed, count, n=1, d=1):
    """Uniform i.i.d. points of [1, 2]^{n+d}, shape (count, n+d)."""
    rng = np.random.default_rng(seed)
    return 1.0 + rng.random((count, n + d))


def scan_radius(gammas, tau, floor=32):
    return int(max(floor, np.ceil(2.0 / min(gammas) ** (1.0 / tau))))


def diophantine_margins(omega, nu0, tau, radius):
    """mu_D for each row of omega (S, n) and nu0 (S, d)."""
    omega = np.atleast_2d(omega)
    nu0 = np.atleast_2d(nu0)
    n, d = omega.shape[1], nu0.shape[1]
    lk = cube_modes(radius, n + d)
    lk = lk[np.any(lk != 0, axis=1)]
    weight = japanese_bracket(lk) ** tau
    vals = np.abs(np.hstack([omega, nu0]) @ lk.T.astype(float)) * weight[None, :]
    return vals.min(axis=1)


def melnikov_margins(omega, lam, modes, tau, radius):
    """mu_F for each row of omega (S, n) and lam (S, n_modes).

    lam may be shared by all samples (one row).  Tuples (0, j, j) are skipped.
    """
    omega = np.atleast_2d(omega)
    lam = np.atleast_2d(np.asarray(lam, complex))
    modes = np.asarray(modes)
    n = omega.shape[1]
    br = japanese_bracket(modes) ** tau
    pair_w = (br[:, None] * br[None, :]).ravel()
    diff = (lam[:, :, None] - lam[:, None, :]).reshape(lam.shape[0], -1)
    offdiag = ~np.eye(len(modes), dtype=bool).ravel()
    best = np.full(omega.shape[0], np.inf)
    for l in cube_modes(radius, n):
        wl = omega @ l.astype(float)
        lw = japanese_bracket(l) ** tau
        vals = np.abs(1j * wl[:, None] + diff) * (lw * pair_w)[None, :]
        if not np.any(l):
            vals = vals[:, offdiag]
        best = np.minimum(best, vals.min(axis=1))
    return best


def wilson_interval(k, n, level=0.95):
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class MeasureResult:
    gammas: list
    samples: int
    excluded: list
    diophantine: list
    melnikov: list
    failures: list
    intervals: list
    margins: dict = field(default_factory=dict)
    spot: dict = field(default_factory=dict)

    @property
    def fractions(self):
        return [e / self.samples for e in self.excluded]

    def slope(self):
        """Least-squares slope of log fraction against log gamma (nan if a fraction is 0)."""
        f = np.asarray(self.fractions, float)
        if np.any(f <= 0) or len(f) < 2:
            return float("nan")
        return float(np.polyfit(np.log(self.gammas), np.log(f), 1)[0])

    def rows(self):
        for i, g in enumerate(self.gammas):
            yield {"gamma": g, "samples": self.samples, "excluded_count": self.excluded[i],
                   "fraction": self.excluded[i] / self.samples, "ci_low": self.intervals[i][0],
                   "ci_high": self.intervals[i][1], "diophantine": self.diophantine[i],
                   "melnikov": self.melnikov[i], "pipeline_failure": self.failures[i]}

    def to_csv(self):
        buf = io.StringIO()
        rows = list(self.rows())
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()

    def summary(self):
        return {"gammas": self.gammas, "samples": self.samples, "fractions": self.fractions,
                "excluded": self.excluded, "intervals": self.intervals,
                "slope": self.slope(), "spot_check": self.spot}


def classify(mu_d, mu_f, gammas, failed=None):
    """Per-gamma counts: (excluded, diophantine-only tags, melnikov tags, failures)."""
    mu_d = np.asarray(mu_d)
    mu_f = np.asarray(mu_f)
    failed = np.zeros(len(mu_d), bool) if failed is None else np.asarray(failed, bool)
    out = []
    for g in gammas:
        dio = (mu_d <= g) & ~failed
        mel = (mu_f < 2 * g) & ~dio & ~failed
        out.append((int(np.count_nonzero(dio | mel | failed)), int(np.count_nonzero(dio)),
                    int(np.count_nonzero(mel)), int(np.count_nonzero(failed))))
    return out


def excluded_fraction(points, n, gammas, tau, model, radius=None, chunk=250):
    """Excluded counts for every gamma.

    ``model(omega, nu)`` takes arrays (S, n), (S, d) and returns
    ``(nu0, lam, modes, failed)`` with nu0 (S, d), lam (S or 1, n_modes)
    and failed a boolean mask of samples the model could not treat.
    """
    if tau <= n or tau <= points.shape[1] - n:
        raise ValueError("tau must exceed max(n, d) for the exclusion sums to converge")
    radius = scan_radius(gammas, tau) if radius is None else radius
    mu_d, mu_f, failed = [], [], []
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        omega, nu = block[:, :n], block[:, n:]
        nu0, lam, modes, bad = model(omega, nu)
        mu_d.append(diophantine_margins(omega, nu0, tau, radius))
        mu_f.append(melnikov_margins(omega, lam, modes, tau, radius))
        failed.append(np.asarray(bad, bool))
    mu_d, mu_f, failed = np.concatenate(mu_d), np.concatenate(mu_f), np.concatenate(failed)
    counts = classify(mu_d, mu_f, gammas, failed)
    total = len(points)
    return MeasureResult(list(gammas), total, [c[0] for c in counts], [c[1] for c in counts],
                         [c[2] for c in counts], [c[3] for c in counts],
                         [wilson_interval(c[0], total) for c in counts],
                         margins={"diophantine": mu_d, "final": mu_f, "failed": failed})


def spot_indices(count, fraction, seed):
    """Deterministic subset of sample indices for the expensive model."""
    k = int(round(count * fraction))
    if k == 0:
        return np.zeros(0, int)
    rng = np.random.default_rng([seed, 1])
    return np.sort(rng.choice(count, size=k, replace=False))


def compare_models(points, n, gammas, tau, cheap, costly, radius):
    """Fraction of points whose exclusion decision differs between two models at some gamma."""
    a = excluded_fraction(points, n, gammas, tau, cheap, radius, chunk=len(points) or 1)
    b = excluded_fraction(points, n, gammas, tau, costly, radius, chunk=len(points) or 1)
    differ = np.zeros(len(points), bool)
    for g in gammas:
        ea = (a.margins["diophantine"] <= g) | (a.margins["final"] < 2 * g)
        eb = (b.margins["diophantine"] <= g) | (b.margins["final"] < 2 * g) | b.margins["failed"]
        differ |= ea != eb
    return {"points": int(len(points)), "disagreements": int(np.count_nonzero(differ)),
            "fraction": float(np.mean(differ)) if len(points) else 0.0}


def lipschitz_probe(model, point, h, n, m, directions=None):
    """Finite-difference Lipschitz quotients of nu0, z and rho at a parameter point.

    ``model(omega, nu)`` returns a dict with ``nu0``, ``z``, ``rho`` and
    ``modes`` or raises; a raising point is reported with tag ``"exit"``.
    The rho quotient is weighted by <j>^{2m}.
    """
    point = np.asarray(point, float)
    dirs = np.eye(len(point)) if directions is None else np.atleast_2d(directions)
    try:
        base = model(point[:n], point[n:])
    except Exception as exc:
        return {"tag": "exit", "reason": f"{type(exc).__name__}: {exc}"}
    weight = japanese_bracket(base["modes"]) ** (2 * m)
    out = {"tag": "ok", "nu0": [], "z": [], "rho_weighted": [], "nu0_jacobian": []}
    for e in dirs:
        q = point + h * e
        try:
            moved = model(q[:n], q[n:])
        except Exception as exc:
            return {"tag": "exit", "reason": f"{type(exc).__name__}: {exc}"}
        dnu = (np.asarray(moved["nu0"]) - np.asarray(base["nu0"])) / h
        out["nu0_jacobian"].append([float(v) for v in dnu])
        out["nu0"].append(float(np.linalg.norm(dnu)))
        out["z"].append(float(np.max(np.abs(moved["z"] - base["z"])) / h))
        out["rho_weighted"].append(float(np.max(weight * np.abs(moved["rho"] - base["rho"])) / h))
    return out

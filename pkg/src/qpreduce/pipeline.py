"""Straightening, smoothing, KAM reduction and verification at one parameter point.

``run_pipeline`` returns a :class:`PipelineResult` whose ``report`` is plain
JSON-ready data, deterministic for a given configuration.  Wall-clock
timings are kept apart in ``timings`` so the report stays byte-stable.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (EvolutionConfig, ReductionChain, analytic_datum, evolve_direct, evolve_reduced,
                       growth_classifier, mode_datum, trajectory_distance)
from .kam import (DiagonalSpectrum, KAMConstants, KAMDivergence, MelnikovExit, final_cantor_check,
                  kam_reduce, log_concave_decreasing, recursion_constants)
from .lattice import LatticeSpec, japanese_bracket
from .measure import (compare_models, excluded_fraction, sample_parameters, scan_radius,
                      spot_indices)
from .operator import (NeumannError, QPOperator, check_structure, m_norm, project_structure,
                       space_modes)
from .problem import as_terms, field_coefficients, generator, multiplier_times_potential
from .smoothing import SeriesError, SmallDivisorExit, run_smoothing, z_decay_exponent
from .straightening import (DiophantineExit, StraighteningError, composition_operator,
                            field_after_straightening, is_odd, solve_straightening)

EXIT_CODES = {"ok": 0, "config": 2, "diophantine_exit": 3, "melnikov_exit": 4,
              "divergence": 5, "numerical": 6}


class StageFailure(RuntimeError):
    def __init__(self, stage, kind, message, offender=None):
        self.stage = stage
        self.kind = kind
        self.offender = offender
        super().__init__(f"[{stage}] {kind}: {message}")


def derive_constants(tau, gamma, d, n=1):
    """alpha, beta, m, N0, M and s0 from the Melnikov exponent and constant."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    alpha = 12 * tau + 7
    beta = alpha + 1
    m = 2 * tau + 2
    M = 2 * m + 2 * beta + d // 2 + 1
    return {"alpha": alpha, "beta": beta, "m": m, "N0": 1.0 / gamma, "M": int(math.ceil(M)),
            "s0": n // 2 + 1}


def scale(N0, k):
    return 1.0 if k < 0 else N0 ** (1.5 ** k)


def clean(obj):
    """JSON-ready copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [clean(obj.real), clean(obj.imag)]
    return obj


@dataclass
class PipelineResult:
    report: dict
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def status(self):
        return self.report["status"]

    @property
    def exit_code(self):
        return self.report["exit_code"]


def lattice_of(cfg):
    lc = cfg.lattice
    return LatticeSpec(lc.d, lc.n, lc.J, lc.L)


def build_W(cfg, spec):
    """The perturbation W on a lattice, from the configuration."""
    wc = cfg.W
    if wc.kind == "explicit_blocks":
        W = QPOperator.load(wc.blocks_path)
        if (W.spec.d, W.spec.n) != (spec.d, spec.n):
            raise ValueError("explicit blocks have the wrong dimensions")
        return W.restrict(LatticeSpec(spec.d, spec.n, min(W.spec.J, spec.J), min(W.spec.L, spec.L))).embed(spec)
    terms = as_terms([t.model_dump() for t in wc.potential])
    return multiplier_times_potential(terms, spec, wc.direction, cfg.parameters.gain,
                                      wc.growth, wc.growth_order)


def V_terms(cfg):
    return as_terms([t.model_dump() for t in cfg.V])


def _fit_exponent(values, spec, lo=2.0, hi_frac=0.75):
    modes = space_modes(spec)
    radius = np.sqrt(np.sum(modes ** 2, axis=1))
    values = np.abs(np.asarray(values))
    use = (radius >= lo) & (radius <= hi_frac * spec.J) & (values > 0)
    if np.count_nonzero(use) < 3:
        return float("nan")
    return float(np.polyfit(np.log(japanese_bracket(modes[use])), np.log(values[use]), 1)[0])


def _failure(report, stage, kind, message, offender=None):
    report["status"] = "excluded" if kind in ("diophantine_exit", "melnikov_exit") else "failed"
    report["failure"] = {"stage": stage, "kind": kind, "message": message,
                         "offender": clean(offender)}
    report["exit_code"] = EXIT_CODES[kind]


def _classify_exception(exc):
    if isinstance(exc, (DiophantineExit, SmallDivisorExit)):
        return "diophantine_exit", exc.mode
    if isinstance(exc, MelnikovExit):
        return "melnikov_exit", exc.offender
    if isinstance(exc, (KAMDivergence, SeriesError, NeumannError, StraighteningError)):
        return "divergence", None
    return "numerical", None


def run_pipeline(cfg, upto="reduce"):
    """Run the stages up to ``upto`` (straighten, smooth, reduce) as enabled in cfg.stages."""
    order = ["straighten", "smooth", "reduce"]
    last = order.index(upto)
    enabled = [s for s in order[:last + 1] if getattr(cfg.stages, s)]
    spec = lattice_of(cfg)
    p = cfg.parameters
    gamma = cfg.gamma
    consts = derive_constants(p.tau, gamma, spec.d, spec.n)
    M_eff = min(consts["M"], cfg.smoothing.M_cap)
    deviations = []
    if M_eff < consts["M"]:
        deviations.append(f"smoothing steps capped: M_effective = {M_eff} < M = {consts['M']}")
    report = {
        "name": cfg.name, "run_id": cfg.digest(),
        "parameter_point": {"omega": p.omega, "nu": p.nu, "eps": p.eps, "gamma": gamma,
                            "tau": p.tau, "gain": p.gain},
        "constants": dict(consts, M_effective=M_eff, deviations=deviations),
        "lattice": {"d": spec.d, "n": spec.n, "J": spec.J, "L": spec.L, "pad": cfg.lattice.pad},
        "stages_run": [], "stages": {}, "checks": {}, "status": "ok", "failure": None, "exit_code": 0,
    }
    result = PipelineResult(report)
    art = result.artifacts
    art["spec"] = spec
    stage = None
    try:
        for stage in enabled:
            t0 = time.perf_counter()
            if stage == "straighten":
                _stage_straighten(cfg, spec, gamma, report, art)
            elif stage == "smooth":
                _stage_smooth(cfg, spec, gamma, M_eff, report, art)
            else:
                _stage_reduce(cfg, spec, gamma, report, art)
            report["stages_run"].append(stage)
            result.timings[stage] = time.perf_counter() - t0
    except StageFailure as exc:
        _failure(report, exc.stage, exc.kind, str(exc), exc.offender)
    except Exception as exc:  # every stage error is mapped onto the taxonomy
        kind, offender = _classify_exception(exc)
        _failure(report, stage, kind, f"{type(exc).__name__}: {exc}", offender)
    if report["status"] == "ok":
        _check_tolerances(cfg, report)
    result.report = clean(report)
    return result


def _stage_straighten(cfg, spec, gamma, report, art):
    p = cfg.parameters
    terms = V_terms(cfg)
    sc = cfg.straightening
    res = solve_straightening(terms, p.omega, p.nu, p.eps, gamma, p.tau, spec.L, spec.J,
                              tol=sc.tol, max_iter=sc.max_iter)
    if not res.diophantine_ok:
        raise DiophantineExit(res.worst_mode, res.worst_margin)
    big = spec.with_J(spec.J + cfg.lattice.pad)
    W_big = build_W(cfg, big)
    A = composition_operator(res.diffeo, "forward", big)
    Ainv = composition_operator(res.diffeo, "inverse", big)
    W0_raw = (Ainv @ (W_big @ A)).restrict(spec)
    field = field_after_straightening(res, terms, p.omega, p.nu, p.eps)
    nu0 = np.asarray(res.nu0)
    field_dev = float(np.max(np.abs(field - nu0.reshape((1, -1, 1)))))
    flags = {"W": check_structure(W_big.restrict(spec)).as_dict(),
             "A": check_structure(A).as_dict(), "A_inverse": check_structure(Ainv).as_dict(),
             "W0": check_structure(W0_raw).as_dict()}
    from .smoothing import input_symmetry
    real, parity = input_symmetry(W0_raw)
    W0, removed = project_structure(W0_raw, real, parity) if (real or parity) else (W0_raw, 0.0)
    V_coef = field_coefficients(terms, spec.d, spec.n, spec.L, spec.J)
    report["stages"]["straightening"] = {
        "nu0": nu0, "drift": nu0 - np.asarray(p.nu), "drift_constant": res.drift_constant(p.nu, p.eps),
        "residual": res.residual, "iterations": res.iterations, "converged": res.converged,
        "diophantine_margin": res.worst_margin, "diophantine_mode": res.worst_mode,
        "roundtrip_error": res.diffeo.roundtrip_error, "jacobian_margin": res.diffeo.jacobian_margin,
        "alpha_odd_defect": is_odd(res.diffeo.alpha), "V_even_defect": _even_defect(V_coef),
        "field_deviation": field_dev, "structure": flags, "symmetry_projection": removed,
        "W0_norm": m_norm(W0),
    }
    art.update(straightening=res, A=A, A_inverse=Ainv, W0=W0, W=W_big.restrict(spec),
               symmetry=(real, parity))


def _even_defect(coef):
    flipped = coef[(slice(None),) + (slice(None, None, -1),) * (coef.ndim - 1)]
    scale = max(float(np.max(np.abs(coef))), 1e-300)
    return float(np.max(np.abs(coef - np.conj(flipped)))) / scale


def _stage_smooth(cfg, spec, gamma, M_eff, report, art):
    if "W0" not in art:
        raise StageFailure("smooth", "numerical", "straightening stage was not run")
    p = cfg.parameters
    res = art["straightening"]
    state = run_smoothing(p.eps * art["W0"], p.omega, res.nu0, gamma, p.tau, M_eff,
                          series_tol=cfg.smoothing.series_tol)
    diag = state.diagnostics
    defects = [d["structure"]["symmetric_hyperbolic_defect"] for d in diag]
    report["stages"]["smoothing"] = {
        "steps": diag, "z_decay_exponent": z_decay_exponent(state.z, spec),
        "orders": [d["order"] for d in diag], "norms": [d["m_norm"] for d in diag],
        "hyperbolic_defect_ratio": (max(defects) / defects[0]) if defects and defects[0] > 0 else 0.0,
    }
    art["smoothing"] = state


def _stage_reduce(cfg, spec, gamma, report, art):
    if "smoothing" not in art:
        raise StageFailure("reduce", "numerical", "smoothing stage was not run")
    p = cfg.parameters
    state = art["smoothing"]
    kc = cfg.kam
    consts = KAMConstants(p.tau, gamma, s=kc.s if kc.s is not None else spec.n // 2 + 1,
                          sigma=kc.sigma)
    A0 = DiagonalSpectrum.free(spec, state.nu0, state.z)
    spectrum, V_inf, trace, P_final = kam_reduce(A0, state.W, consts, p.omega,
                                                 max_steps=kc.max_steps, stop_tol=kc.stop_tol)
    norms = trace.norms()
    ratios = recursion_constants(trace, consts)
    C = float(ratios[0]) if len(ratios) else float("nan")
    ok, margin, offender, bad = final_cantor_check(spectrum, p.omega, gamma, p.tau,
                                                   kc.cantor_L or spec.L, trace)
    rho_exp = _fit_exponent(spectrum.rho, spec)
    z_exp = _fit_exponent(spectrum.z, spec)
    report["stages"]["kam"] = {
        "constants": consts.as_dict(), "steps": len(trace.rows) - 1, "trace": trace.rows,
        "norms": norms, "log_concave_decreasing": log_concave_decreasing(norms),
        "recursion_ratios": ratios, "recursion_constant": C,
        "recursion_holds": bool(np.all(ratios <= C * (1 + 1e-9))) if len(ratios) else True,
        "final_structure": check_structure(P_final).as_dict(),
    }
    report["stages"]["cantor"] = {"ok": ok, "margin": margin, "offender": offender,
                                  "inclusion_counterexamples": bad}
    report["spectrum"] = {
        "max_real_part": spectrum.max_real_part(), "rho_decay_exponent": rho_exp,
        "z_decay_exponent": z_exp, "max_rho": float(np.max(np.abs(spectrum.rho))),
        "max_z": float(np.max(np.abs(spectrum.z))),
    }
    art.update(spectrum=spectrum, V_inf=V_inf, trace=trace, P_final=P_final, kam_constants=consts)
    if not ok:
        raise MelnikovExit(offender, margin, step="final")


def _check_tolerances(cfg, report):
    tol = cfg.tolerances
    st = report["stages"]
    checks = report["checks"]
    failures = []
    if "straightening" in st:
        s = st["straightening"]
        checks["straightening_residual"] = s["residual"] <= tol.straightening_residual
        if not checks["straightening_residual"]:
            failures.append(("straighten", "straightening residual above tolerance"))
    if "smoothing" in st:
        res = [d.get("homological_residual", 0.0) for d in st["smoothing"]["steps"]]
        checks["smoothing_homological"] = all(r <= tol.homological for r in res)
        if not checks["smoothing_homological"]:
            failures.append(("smooth", "homological residual above tolerance"))
    if "kam" in st:
        res = [r["homological_residual"] for r in st["kam"]["trace"][:-1]]
        checks["kam_homological"] = all(r <= tol.homological for r in res)
        if not checks["kam_homological"]:
            failures.append(("reduce", "KAM homological residual above tolerance"))
    if cfg.W.structure == "reversible" and "straightening" in st:
        checks["structure"] = structure_preserved(report)
        if not checks["structure"]:
            failures.append(("structure", "reality/reversibility identities violated"))
        if "spectrum" in report:
            checks["reversible_spectrum"] = report["spectrum"]["max_real_part"] <= tol.reversible_real_part
            if not checks["reversible_spectrum"]:
                failures.append(("reduce", "reversible run produced eigenvalues off the imaginary axis"))
    if failures:
        stage, message = failures[0]
        _failure(report, stage, "numerical", message)


def structure_flags(report):
    """(stage label, flags dict, expected kind) for every recorded stage output."""
    out = []
    st = report["stages"]
    if "straightening" in st:
        s = st["straightening"]["structure"]
        out += [("W", s["W"], "reversible"), ("A", s["A"], "preserving"),
                ("A_inverse", s["A_inverse"], "preserving"), ("W0", s["W0"], "reversible")]
    if "smoothing" in st:
        for d in st["smoothing"]["steps"]:
            out.append((f"smoothing_R{d['step']}", d["structure"], "reversible"))
            if "generator_structure" in d:
                out.append((f"smoothing_G{d['step']}", d["generator_structure"], "preserving"))
    if "kam" in st:
        for r in st["kam"]["trace"]:
            out.append((f"kam_P{r['k']}", r["structure_P"], "reversible"))
            if "structure_X" in r:
                out.append((f"kam_X{r['k']}", r["structure_X"], "preserving"))
    return out


def structure_preserved(report):
    ok = True
    for _, flags, kind in structure_flags(report):
        key = "reversible" if kind == "reversible" else "reversibility_preserving"
        ok = ok and bool(flags["real"]) and bool(flags[key])
    return ok


# reduced and direct dynamics

def reduction_chain(result):
    art = result.artifacts
    spec = art["spec"]
    return ReductionChain(art["A"].restrict(spec), list(art["smoothing"].generators),
                          art["V_inf"], art["spectrum"].lam)


def full_generator(cfg, spec):
    p = cfg.parameters
    W = build_W(cfg, spec)
    return generator(spec, p.nu, p.eps, V_terms(cfg), W)


def initial_datum(cfg, result):
    spec = result.artifacts["spec"]
    u0c = cfg.dynamics.u0
    if u0c.kind == "analytic":
        return analytic_datum(spec, u0c.rate)
    lam = result.artifacts["spectrum"].lam if "spectrum" in result.artifacts else None
    if u0c.mode is not None:
        mode = u0c.mode
    elif lam is not None:
        mode = space_modes(spec)[int(np.argmax(lam.real))]
    else:
        mode = [0] * spec.d
    e = mode_datum(spec, mode)
    if u0c.kind == "mode":
        return e
    return reduction_chain(result).matrix(np.zeros(spec.n)) @ e


def run_dynamics(cfg, result, with_reduced=True):
    """Direct and reduced evolution from the configured datum, plus classification."""
    spec = result.artifacts["spec"]
    dc = cfg.dynamics
    p = cfg.parameters
    H = full_generator(cfg, spec)
    u0 = initial_datum(cfg, result)
    modes = space_modes(spec)
    out = {"trajectories": {}, "summary": {}}
    dirs = {"forward": [1], "backward": [-1], "both": [1, -1]}[dc.directions]
    for sgn in dirs:
        ec = EvolutionConfig(T=sgn * dc.T, dt=sgn * dc.dt, integrator=dc.integrator,
                             sigma=dc.sigma, record_every=dc.record_every)
        direct = evolve_direct(ec, H, p.omega, u0)
        label = "forward" if sgn > 0 else "backward"
        summary = {"tag": direct.tag, "stability": direct.info,
                   "sup_norm_ratio": float(np.max(direct.sobolev) / direct.sobolev[0])}
        if len(direct.times) >= 100:
            summary["classification"] = growth_classifier(np.abs(direct.times), direct.sobolev,
                                                          dc.tol_rate).as_dict()
        extra = {}
        if with_reduced and "spectrum" in result.artifacts:
            chain = reduction_chain(result)
            reduced = evolve_reduced(chain, ec, p.omega, u0, times=direct.times)
            dist = trajectory_distance(direct, reduced, modes, dc.sigma)
            extra = {"reduced_hs_norm": reduced.sobolev, "distance": dist}
            summary["max_distance"] = float(np.max(dist))
            summary["relative_distance"] = float(np.max(dist) / direct.sobolev[0])
            lam = result.artifacts["spectrum"].lam
            summary["max_real_lambda"] = float(np.max(sgn * lam.real))
        out["trajectories"][label] = (direct, extra)
        out["summary"][label] = summary
    return out


# Monte Carlo exclusion

def first_order_model(cfg, radius):
    """nu0 = nu + eps <V>, lam_j = i nu0.j + eps <W>_j on modes |j| <= radius."""
    spec = lattice_of(cfg)
    p = cfg.parameters
    big = LatticeSpec(spec.d, spec.n, radius, spec.L)
    W = build_W(cfg, big)
    z = p.eps * W.diagonal_average()
    modes = space_modes(big)
    V = field_coefficients(V_terms(cfg), spec.d, spec.n, spec.L, spec.J)
    centre = (slice(None),) + (spec.L,) * spec.n + (spec.J,) * spec.d
    mean_V = V[centre].real

    def model(omega, nu):
        nu0 = nu + p.eps * mean_V[None, :]
        lam = 1j * (nu0 @ modes.T.astype(float)) + z[None, :]
        return nu0, lam, modes, np.zeros(len(omega), bool)

    return model


def pipeline_model(cfg, gamma):
    """Per-sample eigenvalues from the full pipeline on the configured lattice."""
    spec = lattice_of(cfg)
    modes = space_modes(spec)

    def model(omega, nu):
        nu0s, lams, bad = [], [], []
        for w, v in zip(omega, nu):
            sub = cfg.model_copy(deep=True)
            sub.parameters.omega = [float(x) for x in w]
            sub.parameters.nu = [float(x) for x in v]
            sub.parameters.gamma = gamma
            sub.parameters.a_exponent = None
            res = run_pipeline(sub)
            if "spectrum" in res.artifacts and res.status == "ok":
                nu0s.append(res.artifacts["straightening"].nu0)
                lams.append(res.artifacts["spectrum"].lam)
                bad.append(False)
            else:
                nu0s.append(np.asarray(v, float))
                lams.append(1j * (modes @ np.asarray(v, float)))
                bad.append(True)
        return np.array(nu0s), np.array(lams), modes, np.array(bad)

    return model


def run_measure(cfg, seed=None):
    mc = cfg.measure
    spec = lattice_of(cfg)
    seed = cfg.seed if seed is None else seed
    points = sample_parameters(seed, mc.samples, spec.n, spec.d)
    radius = mc.radius or scan_radius(mc.gammas, mc.tau)
    if mc.model == "first_order":
        model = first_order_model(cfg, radius)
    else:
        model = pipeline_model(cfg, min(mc.gammas))
    res = excluded_fraction(points, spec.n, mc.gammas, mc.tau, model, radius, mc.chunk)
    if mc.spot_fraction > 0:
        idx = spot_indices(len(points), mc.spot_fraction, seed)
        cheap = first_order_model(cfg, spec.J)
        costly = pipeline_model(cfg, min(mc.gammas))
        spot = compare_models(points[idx], spec.n, mc.gammas, mc.tau, cheap, costly, spec.J)
        spot["bound"] = mc.spot_bound
        spot["within_bound"] = spot["fraction"] <= mc.spot_bound
        res.spot = spot
    return res


def spectrum_model(cfg):
    """model(omega, nu) -> nu0, z, rho, modes from a full pipeline run (raises on exit)."""

    def model(omega, nu):
        sub = cfg.model_copy(deep=True)
        sub.parameters.omega = [float(x) for x in omega]
        sub.parameters.nu = [float(x) for x in nu]
        res = run_pipeline(sub)
        if res.status != "ok":
            raise RuntimeError(res.report["failure"]["message"])
        sp = res.artifacts["spectrum"]
        return {"nu0": sp.nu0, "z": sp.z, "rho": sp.rho, "modes": sp.modes}

    return model

"""Direct integration against the reduced solution.

The reduced flow U(omega t) exp(lam t) U(0)^{-1} u0 tracks the direct
solution; a planted non-reversible term makes the norm grow at the rate
of the largest real part.
"""

from qpreduce.config import parse_config
from qpreduce.pipeline import run_dynamics, run_pipeline

cfg = parse_config("kam: {stop_tol: 1.0e-60}\ndynamics: {T: 200.0, integrator: rk4, dt: 0.02, record_every: 10}\n")
out = run_dynamics(cfg, run_pipeline(cfg))["summary"]["forward"]
print(f"reversible: sup norm ratio {out['sup_norm_ratio']:.5f}, distance to reduced {out['max_distance']:.1e}, "
      f"classified {out['classification']['kind']}")

planted = parse_config("W: {structure: planted_growth, growth: 0.8}\nkam: {stop_tol: 1.0e-60}\n"
                       "dynamics: {T: 1000.0, record_every: 20, u0: {kind: reduced_mode}}\n")
out = run_dynamics(planted, run_pipeline(planted))["summary"]["forward"]
c = out["classification"]
print(f"planted: {c['kind']} with rate {c['rate']:.6f}; max Re lambda {out['max_real_lambda']:.6f}")

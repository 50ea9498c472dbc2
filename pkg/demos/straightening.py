"""Straightening the transport field.

For V = cos(phi + x) + 0.5 the new constant speed nu0 moves by about
eps/2, and pulling the field through the change of variables gives back a
constant to rounding accuracy.
"""

import numpy as np

from qpreduce.problem import FourierTerm
from qpreduce.straightening import field_after_straightening, is_odd, solve_straightening

V = [FourierTerm((1,), (1,), 1.0), FourierTerm((0,), (0,), 0.5)]
omega, nu = [1.3247], [1.7548]
for eps in (1e-4, 1e-3, 1e-2):
    res = solve_straightening(V, omega, nu, eps, gamma=0.05, tau=3.0, L=8, J=16, tol=1e-13)
    field = field_after_straightening(res, V, omega, nu, eps)
    print(f"eps={eps:.0e}: nu0 - nu = {res.nu0[0] - nu[0]:+.6e} ({res.drift_constant(nu, eps):.4f} eps), "
          f"{res.iterations} iterations, field deviation {np.max(np.abs(field - res.nu0[0])):.1e}, "
          f"displacement odd to {is_odd(res.diffeo.alpha):.0e}, round trip {res.diffeo.roundtrip_error:.0e}")

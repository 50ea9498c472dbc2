"""Fourier lattices and quasi-periodic operators.

Builds a multiplication operator, checks its symmetries, multiplies two
operators and compares the product with the pointwise matrix product.
"""

import numpy as np

from qpreduce.lattice import LatticeSpec
from qpreduce.operator import NormProfile, QPOperator, check_structure, compose, cutoff, m_norm
from qpreduce.problem import FourierTerm, multiplication_operator, transport_operator

spec = LatticeSpec(d=1, n=1, J=8, L=4)
print(f"lattice: {spec.n_space} spatial modes, {spec.n_angle} angle modes")

q = multiplication_operator([FourierTerm((1,), (1,), 0.7)], spec)
t = transport_operator([FourierTerm((1,), (0,), 1.0)], spec)
print("multiplication by 0.7 cos(phi + x):", check_structure(q).as_dict())
print("cos(phi) d/dx:                      ", check_structure(t).as_dict())

P = compose(q, t)
phi = np.array([0.8])
gap = np.max(np.abs(P.evaluate(phi) - q.evaluate(phi) @ t.evaluate(phi)))
print(f"product versus pointwise product at phi = 0.8: {gap:.1e} (truncation in x only)")

low, high = cutoff(P, 1.5)
prof = NormProfile(s=1.0)
print(f"m-norm {m_norm(P, prof):.3f}; below the cut {m_norm(low, prof):.3f}, above {m_norm(high, prof):.3f}")
print("identity round-trips through bytes:", QPOperator.from_bytes(QPOperator.identity(spec).to_bytes())
      == QPOperator.identity(spec))

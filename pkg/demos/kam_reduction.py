"""KAM reduction to a diagonal operator.

The remainder norms fall superexponentially; the final eigenvalues of a
reversible system stay on the imaginary axis.
"""

from qpreduce.config import parse_config
from qpreduce.pipeline import run_pipeline

rep = run_pipeline(parse_config("kam: {stop_tol: 1.0e-100}\n")).report
k = rep["stages"]["kam"]
for row in k["trace"]:
    margin = row["worst_margin"]
    margin = f"{margin:.4f}" if isinstance(margin, float) else "(final remainder)"
    print(f"k={row['k']}: N_k={row['N_k']:.1f}, |P_k| = {row['m_norm']:.2e}, Melnikov margin {margin}")
print("log-concave decrease:", k["log_concave_decreasing"], "| one recursion constant:", k["recursion_holds"])
sp = rep["spectrum"]
print(f"max |Re lambda| = {sp['max_real_part']:.1e}; |rho| decays like <j>^{sp['rho_decay_exponent']:.1f}")
print("final non-resonance check:", rep["stages"]["cantor"]["ok"])

bad = run_pipeline(parse_config("parameters: {nu: [1.3352]}\n")).report
print("near-resonant point:", bad["status"], bad["failure"]["kind"], bad["failure"]["offender"])

"""Order-lowering conjugations.

Each step moves the average of the remainder into the multiplier z and
leaves a remainder whose order drops by about the gain.
"""

from qpreduce.config import parse_config
from qpreduce.pipeline import run_pipeline

cfg = parse_config("smoothing: {M_cap: 4}\n")
rep = run_pipeline(cfg, upto="smooth").report
sm = rep["stages"]["smoothing"]
for step in sm["steps"]:
    line = f"step {step['step']}: m-norm {step['m_norm']:.2e}, fitted order {step['order']:+.2f}"
    if "homological_residual" in step:
        line += f", residual {step['homological_residual']:.0e}, symmetry projection {step['symmetry_projection']:.0e}"
    print(line)
print(f"z grows like <j>^{sm['z_decay_exponent']:.2f}; gain per step is {cfg.parameters.gain}")

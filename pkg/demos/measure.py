"""Monte Carlo estimate of the excluded parameters.

The excluded fraction shrinks roughly in proportion to gamma.
"""

from qpreduce.config import parse_config
from qpreduce.pipeline import run_measure

# 1% of the samples are re-run through the full pipeline to check the cheap model
res = run_measure(parse_config("measure: {samples: 2000, spot_fraction: 0.01}\nseed: 20240601\n"))
for row in res.rows():
    print(f"gamma {row['gamma']:<6} excluded {row['fraction']:.4f}  95% CI [{row['ci_low']:.4f}, {row['ci_high']:.4f}]")
print(f"log-log slope {res.slope():.3f}")
print(f"full pipeline disagrees with the first-order model on {res.spot['disagreements']} of {res.spot['points']} spot-checked points")

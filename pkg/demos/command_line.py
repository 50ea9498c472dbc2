"""The command line on the shipped configurations.

Runs the full pipeline into a temporary directory and lists what was written.
"""

import os
import tempfile

from qpreduce.cli import main

here = os.path.dirname(os.path.abspath(__file__))
configs = os.path.join(here, "..", "configs")
with tempfile.TemporaryDirectory() as out:
    code = main(["full", "--config", os.path.join(configs, "desk_reversible.yaml"), "--out", out,
                 "--override", "dynamics.T=100.0"])
    run = os.path.join(out, os.listdir(out)[0])
    print("exit code", code, "->", sorted(os.listdir(run)))
    code = main(["reduce", "--config", os.path.join(configs, "bad_resonant.yaml"), "--out", out])
    print("near-resonant configuration exits with", code)

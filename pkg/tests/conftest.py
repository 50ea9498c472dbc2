import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qpreduce.config import parse_config
from qpreduce.lattice import LatticeSpec
from qpreduce.operator import QPOperator
from qpreduce.pipeline import run_pipeline

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def random_operator(rng, spec, scale=1.0, decay=0.0):
    shape = (spec.n_angle, spec.n_space, spec.n_space)
    blocks = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if decay:
        from qpreduce.operator import angle_modes, space_modes
        la = np.sum(np.abs(angle_modes(spec)), axis=1)
        sm = space_modes(spec)
        dj = np.sum(np.abs(sm[:, None, :] - sm[None, :, :]), axis=-1)
        blocks = blocks * np.exp(-decay * (la[:, None, None] + dj[None]))
    return QPOperator(spec, scale * blocks)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return LatticeSpec(1, 1, 6, 3)


@pytest.fixture(scope="session")
def desk_result():
    cfg = parse_config("kam: {stop_tol: 1.0e-100}\n")
    return cfg, run_pipeline(cfg)

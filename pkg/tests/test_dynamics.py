import numpy as np
import pytest

from qpreduce.dynamics import (EvolutionConfig, ReductionChain, analytic_datum, evolve_direct, evolve_reduced,
                               growth_classifier, mode_datum, sobolev_norm, trajectory_distance)
from qpreduce.lattice import LatticeSpec
from qpreduce.operator import QPOperator, space_modes
from qpreduce.problem import FourierTerm, generator, multiplication_operator, multiplier_times_potential

OMEGA, NU = [1.3247], [1.7548]
V = [FourierTerm((1,), (1,), 1.0), FourierTerm((0,), (0,), 0.5)]


def desk_generator(spec, eps):
    W = multiplier_times_potential([FourierTerm((1,), (0,), 1.0), FourierTerm((0,), (1,), 0.5)],
                                   spec, [1.0], 0.75)
    return generator(spec, NU, eps, V, W)


@pytest.mark.parametrize("integrator", ["strang_splitting", "rk4"])
def test_free_transport_is_exact(integrator):
    spec = LatticeSpec(1, 1, 6, 2)
    H = generator(spec, NU, 0.0, V, None)
    u0 = analytic_datum(spec)
    traj = evolve_direct(EvolutionConfig(T=20, dt=0.1, integrator=integrator, record_every=5), H, OMEGA, u0)
    j = space_modes(spec)[:, 0]
    for t, u in zip(traj.times, traj.states):
        assert np.allclose(u, np.exp(1j * NU[0] * j * t) * u0, atol=1e-12)
    assert np.ptp(traj.l2) <= 1e-12


def errors(integrator, dts):
    spec = LatticeSpec(1, 1, 6, 3)
    H = desk_generator(spec, 0.2)
    u0 = analytic_datum(spec)
    run = lambda dt: evolve_direct(EvolutionConfig(T=2.0, dt=dt, integrator=integrator, record_every=10 ** 6),
                                   H, OMEGA, u0).states[-1]
    ref = run(dts[-1] / 8)
    return [np.linalg.norm(run(dt) - ref) for dt in dts]


def test_rk4_is_fourth_order():
    e = errors("rk4", [0.2, 0.1, 0.05])
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(np.abs(orders - 4) <= 0.3)


def test_splitting_is_second_order():
    e = errors("strang_splitting", [0.2, 0.1, 0.05])
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(np.abs(orders - 2) <= 0.3)


def test_l2_conserved_for_anti_self_adjoint_generator():
    spec = LatticeSpec(1, 1, 8, 2)
    field = [FourierTerm((1,), (0,), 0.5)]            # x-independent transport is skew
    q = multiplication_operator([FourierTerm((1,), (1,), 1.0), FourierTerm((0,), (2,), 0.3)], spec)
    H = generator(spec, NU, 0.3, field, 1j * q)
    traj = evolve_direct(EvolutionConfig(T=100, dt=0.05, record_every=50), H, OMEGA, analytic_datum(spec))
    assert np.max(np.abs(traj.l2 / traj.l2[0] - 1)) <= 1e-10


def test_reduced_equals_direct_when_nothing_to_reduce():
    spec = LatticeSpec(1, 1, 6, 2)
    I = QPOperator.identity(spec)
    lam = 1j * NU[0] * space_modes(spec)[:, 0]
    chain = ReductionChain(I, [], I, lam)
    cfg = EvolutionConfig(T=10, dt=0.1, record_every=10)
    u0 = analytic_datum(spec)
    direct = evolve_direct(cfg, generator(spec, NU, 0.0, V, None), OMEGA, u0)
    reduced = evolve_reduced(chain, cfg, OMEGA, u0)
    assert np.max(trajectory_distance(direct, reduced, space_modes(spec), 1.0)) <= 1e-12


def test_backward_time_and_blowup():
    spec = LatticeSpec(1, 1, 4, 2)
    H = QPOperator.diagonal(spec, np.full(spec.n_space, 2.0))
    u0 = mode_datum(spec, [1])
    back = evolve_direct(EvolutionConfig(T=-5, dt=-0.1, record_every=10), H, OMEGA, u0)
    assert back.l2[-1] == pytest.approx(np.exp(-10.0), rel=1e-12)
    blow = evolve_direct(EvolutionConfig(T=100, dt=0.1, overflow=1e6), H, OMEGA, u0)
    assert blow.tag == "blowup" and blow.times[-1] < 100


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(integrator="euler")
    with pytest.raises(ValueError):
        EvolutionConfig(T=10, dt=-0.1)
    with pytest.raises(ValueError):
        EvolutionConfig(record_every=0)
    assert EvolutionConfig(T=1.0, dt=0.1).steps == 10


def test_sobolev_norm_and_csv():
    spec = LatticeSpec(1, 1, 2, 1)
    u = mode_datum(spec, [2])
    assert sobolev_norm(u, space_modes(spec), 1.0) == pytest.approx(np.sqrt(5))
    traj = evolve_direct(EvolutionConfig(T=0.2, dt=0.1, record_every=1),
                         QPOperator.zeros(spec), OMEGA, u)
    lines = traj.to_csv({"extra": np.arange(3.0)}).splitlines()
    assert lines[0] == "t,hs_norm,l2_norm,extra" and len(lines) == 4
    other = evolve_direct(EvolutionConfig(T=0.3, dt=0.1, record_every=1), QPOperator.zeros(spec), OMEGA, u)
    with pytest.raises(ValueError):
        trajectory_distance(traj, other, space_modes(spec), 1.0)


def test_growth_classifier_synthetic():
    t = np.linspace(0, 1000, 500)
    assert growth_classifier(t, 1 + 0.1 * np.sin(t)).kind == "bounded"
    c = growth_classifier(t, 3 * np.exp(0.01 * t))
    assert c.kind == "exponential" and c.rate == pytest.approx(0.01, rel=1e-9) and c.r2 > 0.999
    rng = np.random.default_rng(0)
    noisy = np.exp(0.001 * t + rng.normal(0, 0.5, t.size))
    assert growth_classifier(t, noisy).kind == "undecided"
    with pytest.raises(ValueError):
        growth_classifier(t[:50], np.ones(50))

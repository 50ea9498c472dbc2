import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from conftest import random_operator
from qpreduce.lattice import LatticeSpec
from qpreduce.operator import QPOperator, angle_modes, check_structure, m_norm, space_modes
from qpreduce.smoothing import (SeriesError, SmallDivisorExit, conjugate_full, double_average,
                                exp_conjugate, homological_residual, run_smoothing,
                                solve_homological_smoothing)

OMEGA, NU0, GAMMA, TAU = [1.3247], [1.7548], 0.05, 3.0


def lift(R, radius):
    """Block-Toeplitz matrix of R on angle modes |l| <= radius (n = 1)."""
    spec = R.spec
    ns = spec.n_space
    size = 2 * radius + 1
    out = np.zeros((size * ns, size * ns), complex)
    for a in range(size):
        for b in range(size):
            k = a - b
            if abs(k) <= spec.L:
                out[a * ns:(a + 1) * ns, b * ns:(b + 1) * ns] = R.blocks[k + spec.L]
    return out


def unlift(M, spec, radius):
    """Read the blocks R(k) from column block 0 of a lifted matrix."""
    ns = spec.n_space
    blocks = np.zeros((spec.n_angle, ns, ns), complex)
    for k in range(-spec.L, spec.L + 1):
        a = radius + k
        blocks[k + spec.L] = M[a * ns:(a + 1) * ns, radius * ns:(radius + 1) * ns]
    return blocks


def test_double_average_quadrature_oracle(rng):
    spec = LatticeSpec(1, 1, 3, 2)
    W = random_operator(rng, spec)
    nphi, ntau = 2 * spec.L + 3, 4 * spec.J + 3
    modes = space_modes(spec)[:, 0]
    acc = np.zeros((spec.n_space, spec.n_space), complex)
    for phi in 2 * np.pi * np.arange(nphi) / nphi:
        Wp = W.evaluate([phi])
        for t in 2 * np.pi * np.arange(ntau) / ntau:
            T = np.exp(1j * modes * t)
            acc += T[:, None] * Wp * np.conj(T)[None, :]
    acc /= nphi * ntau
    assert np.allclose(np.diag(acc), double_average(W), atol=1e-13)
    assert np.allclose(acc - np.diag(np.diag(acc)), 0, atol=1e-13)


@given(st.integers(0, 2 ** 32 - 1))
def test_homological_residual_random(seed):
    rng = np.random.default_rng(seed)
    spec = LatticeSpec(1, 1, 6, 4)
    R = random_operator(rng, spec, scale=1e-3, decay=0.5)
    G = solve_homological_smoothing(R, OMEGA, NU0, GAMMA, TAU)
    assert homological_residual(G, R, OMEGA, NU0) <= 1e-12


def test_single_entry_formula():
    spec = LatticeSpec(1, 1, 3, 2)
    block = np.zeros((7, 7), complex)
    block[3 + 1, 3 - 1] = 0.2          # output j = 1, input j' = -1
    R = QPOperator.from_block(spec, (1,), block)
    G = solve_homological_smoothing(R, OMEGA, NU0, GAMMA, TAU)
    expected = 0.2 / (1j * (OMEGA[0] * 1 + NU0[0] * (-1 - 1)))
    assert G.block((1,))[4, 2] == pytest.approx(expected, rel=1e-14)
    assert np.count_nonzero(G.blocks) == 1


def test_average_is_left_alone():
    spec = LatticeSpec(1, 1, 3, 2)
    R = QPOperator.diagonal(spec, np.arange(7) * 1e-3j)
    assert solve_homological_smoothing(R, OMEGA, NU0, GAMMA, TAU) == QPOperator.zeros(spec)


def test_small_divisor_exit():
    spec = LatticeSpec(1, 1, 3, 2)
    R = random_operator(np.random.default_rng(1), spec)
    with pytest.raises(SmallDivisorExit):
        solve_homological_smoothing(R, [1.5], [1.5], GAMMA, TAU)


def test_conjugation_matches_dense_exponential(rng):
    spec = LatticeSpec(1, 1, 3, 8)
    sup = LatticeSpec(1, 1, 3, 1)
    H = QPOperator.diagonal(spec, 1j * NU0[0] * space_modes(spec)[:, 0]) + random_operator(rng, sup, 0.05).embed(spec)
    G = random_operator(rng, sup, 0.02).embed(spec)
    got = conjugate_full(H, G, OMEGA)
    radius = 30
    D = np.kron(np.diag(1j * OMEGA[0] * np.arange(-radius, radius + 1)), np.eye(spec.n_space))
    E = expm(lift(G, radius))
    Einv = expm(-lift(G, radius))
    dense = Einv @ (lift(H, radius) - D) @ E + D
    assert np.allclose(got.blocks, unlift(dense, spec, radius), atol=1e-11)


def test_exp_conjugate_equals_full_conjugation(rng):
    spec = LatticeSpec(1, 1, 4, 8)
    sup = LatticeSpec(1, 1, 4, 1)
    R = random_operator(rng, sup, 1e-3).embed(spec)
    h0 = 1j * NU0[0] * space_modes(spec)[:, 0]
    z = 1e-3j * np.linspace(-1, 1, spec.n_space)
    G = solve_homological_smoothing(R, OMEGA, NU0, GAMMA, TAU)
    z_new, R_new, info = exp_conjugate(h0, z, R, G, OMEGA)
    H = QPOperator.diagonal(spec, h0 + z) + R
    full = conjugate_full(H, G, OMEGA)
    split = QPOperator.diagonal(spec, h0 + z_new) + R_new
    assert m_norm(full - split) <= 1e-13 * m_norm(R)
    assert info["first_order_defect"] <= 1e-15
    with pytest.raises(SeriesError):
        exp_conjugate(h0, z, R, QPOperator.identity(spec), OMEGA)


def test_zero_generator_is_identity(rng):
    spec = LatticeSpec(1, 1, 3, 2)
    H = random_operator(rng, spec)
    assert conjugate_full(H, QPOperator.zeros(spec), OMEGA) == H
    state = run_smoothing(QPOperator.zeros(spec), OMEGA, NU0, GAMMA, TAU, 3)
    assert np.all(state.z == 0) and state.W == QPOperator.zeros(spec)


def test_desk_smoothing_lowers_order(desk_result):
    _, result = desk_result
    sm = result.report["stages"]["smoothing"]
    orders = sm["orders"]
    gain = result.report["parameter_point"]["gain"]
    drops = np.diff(orders)
    assert np.all(drops < 0)
    assert abs(drops[0] + gain) <= 0.3
    assert sm["hyperbolic_defect_ratio"] <= 10
    for step in sm["steps"][1:]:
        assert step["homological_residual"] <= 1e-12
        assert step["structure"]["real"] and step["structure"]["reversible"]
        assert step["generator_structure"]["reversibility_preserving"]
        assert step["z_real"] and step["z_reversible"]
    # z has order 1 - gain
    assert sm["z_decay_exponent"] <= 1 - gain + 0.2


def test_round_trip_recovers_the_generator(desk_result):
    _, result = desk_result
    st = result.artifacts["smoothing"]
    spec = st.W.spec
    eps = result.report["parameter_point"]["eps"]
    H = st.full()
    for G in reversed(st.generators):
        H = conjugate_full(H, -G, result.report["parameter_point"]["omega"])
    start = QPOperator.diagonal(spec, st.h0) + eps * result.artifacts["W0"]
    assert m_norm(H - start) <= 1e-10 * m_norm(eps * result.artifacts["W0"])

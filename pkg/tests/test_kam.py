import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_operator
from qpreduce import kam
from qpreduce.kam import (DiagonalSpectrum, KAMConstants, KAMDivergence, KAMState, KAMTrace, MelnikovExit,
                          _push_forward, final_cantor_check, increment_bound_holds, kam_homological_residual,
                          kam_reduce, kam_step, log_concave_decreasing, melnikov_margin, melnikov_scan,
                          recursion_constants, solve_homological_kam)
from qpreduce.lattice import LatticeSpec, japanese_bracket
from qpreduce.operator import NeumannError, QPOperator, m_norm, neumann_inverse, space_modes

OMEGA, NU0 = [1.3247], [1.7548]


def free(spec, z=None):
    return DiagonalSpectrum.free(spec, NU0, z)


def test_constants_for_tau_three():
    c = KAMConstants(3.0, 0.1)
    assert (c.alpha, c.beta, c.m) == (43, 44, 8)
    assert c.N0 == pytest.approx(10.0)
    assert c.N(2) == pytest.approx(10 ** 2.25)
    assert c.N(-1) == 1.0
    with pytest.raises(ValueError):
        KAMConstants(3.0, 1.5)


def test_melnikov_margin_closed_form():
    spec = LatticeSpec(1, 1, 3, 2)
    A = free(spec)
    m = melnikov_margin(A.lam, A.modes, OMEGA, [1], [2], [-1], 0.05, 3.0)
    div = abs(OMEGA[0] + NU0[0] * 3)
    assert m == pytest.approx(div - 0.05 / (np.sqrt(2) * np.sqrt(5) * np.sqrt(2)) ** 3, rel=1e-14)
    assert melnikov_margin(A.lam, A.modes, OMEGA, [0], [1], [1], 0.05, 3.0) == np.inf


def test_scan_against_loop(rng):
    spec = LatticeSpec(1, 1, 3, 2)
    lam = 1j * NU0[0] * space_modes(spec)[:, 0] + 1e-3 * rng.standard_normal(7)
    worst = np.inf
    for l in range(-4, 5):
        for a, j in enumerate(range(-3, 4)):
            for b, jp in enumerate(range(-3, 4)):
                if l == 0 and a == b:
                    continue
                worst = min(worst, melnikov_margin(lam, space_modes(spec), OMEGA, [l], [j], [jp], 0.05, 3.0))
    ok, margin, _ = melnikov_scan(lam, space_modes(spec), OMEGA, 0.05, 3.0, 4)
    assert ok and margin == pytest.approx(worst, rel=1e-13)


def test_planted_resonance_is_found():
    spec = LatticeSpec(1, 1, 3, 2)
    lam = 1j * NU0[0] * space_modes(spec)[:, 0]
    lam[space_modes(spec)[:, 0] == 2] = 1j * (OMEGA[0] + 1e-4)   # i omega.(-1) + lam_2 - lam_0 ~ 0
    ok, margin, where = melnikov_scan(lam, space_modes(spec), OMEGA, 0.05, 3.0, 2)
    assert not ok and margin < 0
    assert where == ((-1,), (2,), (0,))
    ok_small, _, _ = melnikov_scan(lam, space_modes(spec), OMEGA, 0.05, 3.0, 2, N=0.5)
    assert ok_small


def test_homological_single_entry_and_average(rng):
    spec = LatticeSpec(1, 1, 3, 2)
    A = free(spec, 1e-3j * np.arange(7))
    block = np.zeros((7, 7), complex)
    block[4, 2] = 0.1
    P = QPOperator.from_block(spec, (1,), block)
    X, pbar = solve_homological_kam(P, A, OMEGA, 10.0)
    lam = A.lam
    assert X.block((1,))[4, 2] == pytest.approx(0.1 / (1j * OMEGA[0] + lam[2] - lam[4]), rel=1e-14)
    D = QPOperator.diagonal(spec, rng.standard_normal(7))
    X, pbar = solve_homological_kam(D, A, OMEGA, 10.0)
    assert X == QPOperator.zeros(spec) and np.allclose(pbar, D.diagonal_average())


@given(st.integers(0, 2 ** 32 - 1), st.floats(1.0, 8.0))
def test_homological_residual_random(seed, N):
    rng = np.random.default_rng(seed)
    spec = LatticeSpec(1, 1, 5, 3)
    P = random_operator(rng, spec, 1e-4, decay=0.5)
    A = free(spec)
    X, _ = solve_homological_kam(P, A, OMEGA, N)
    assert kam_homological_residual(X, P, A, OMEGA, N) <= 1e-12


def state_for(P, A):
    return KAMState(0, A, P, QPOperator.identity(P.spec), KAMTrace())


def test_step_on_zero_and_diagonal(rng):
    spec = LatticeSpec(1, 1, 3, 2)
    consts = KAMConstants(3.0, 0.05)
    A = free(spec)
    s = kam_step(state_for(QPOperator.zeros(spec), A), consts, OMEGA)
    assert s.P == QPOperator.zeros(spec) and np.array_equal(s.A.lam, A.lam)
    c = 1e-3j * rng.standard_normal(7)
    s = kam_step(state_for(QPOperator.diagonal(spec, c), A), consts, OMEGA)
    assert np.allclose(s.A.lam, A.lam + c, atol=0)
    assert m_norm(s.P) == 0


def test_step_matches_push_forward(rng):
    spec = LatticeSpec(1, 1, 4, 8)
    sup = LatticeSpec(1, 1, 4, 1)
    P = random_operator(rng, sup, 1e-3).embed(spec)
    A = free(spec, 1e-3j * np.linspace(-1, 1, spec.n_space))
    consts = KAMConstants(3.0, 0.05)
    s = kam_step(state_for(P, A), consts, OMEGA)
    X = s.V - QPOperator.identity(spec)
    pushed = _push_forward(A.operator(spec) + P, QPOperator.identity(spec) + X, OMEGA)
    new = s.A.operator(spec) + s.P
    assert m_norm(pushed - new) <= 1e-10 * m_norm(P)
    # quadratic decrease of the remainder
    assert m_norm(s.P) <= 10 * m_norm(P) ** 2


def test_step_refuses_resonant_spectrum():
    spec = LatticeSpec(1, 1, 3, 2)
    lam = 1j * NU0[0] * space_modes(spec)[:, 0]
    z = np.zeros(7, complex)
    z[5] = 1j * (OMEGA[0] - 2 * NU0[0])      # lam_2 = i omega
    A = DiagonalSpectrum(space_modes(spec), np.array(NU0), z, np.zeros(7, complex))
    P = random_operator(np.random.default_rng(0), spec, 1e-4)
    with pytest.raises(MelnikovExit) as info:
        kam_step(state_for(P, A), KAMConstants(3.0, 0.05), OMEGA)
    assert info.value.step == 0 and info.value.margin < 0
    assert info.value.offender[0] == (-1,) and info.value.offender[2] == (0,)


def test_reduce_trivial_and_divergence(monkeypatch, rng):
    spec = LatticeSpec(1, 1, 3, 2)
    consts = KAMConstants(3.0, 0.05)
    A = free(spec)
    spectrum, V, trace, P = kam_reduce(A, QPOperator.zeros(spec), consts, OMEGA)
    assert len(trace.rows) == 1 and V == QPOperator.identity(spec)

    def growing(state, consts, omega):
        return KAMState(state.k + 1, state.A, state.P * 2.0, state.V, state.trace, state.symmetry)

    monkeypatch.setattr(kam, "kam_step", growing)
    with pytest.raises(KAMDivergence):
        kam_reduce(A, random_operator(rng, spec, 1e-3), consts, OMEGA)


def test_large_remainder_refused(rng):
    spec = LatticeSpec(1, 1, 4, 3)
    P = random_operator(rng, spec, 1.0, decay=0.3)
    with pytest.raises(NeumannError):
        kam_reduce(free(spec), P, KAMConstants(3.0, 1e-6), OMEGA)


def test_increment_bound(rng):
    spec = LatticeSpec(1, 1, 6, 2)
    for _ in range(20):
        assert increment_bound_holds(random_operator(rng, spec), KAMConstants(3.0, 0.05))


def test_log_concave_helper():
    assert log_concave_decreasing([1e-3, 1e-7, 1e-15, 1e-31])
    assert not log_concave_decreasing([1e-3, 1e-5, 1e-7, 1e-9])
    assert not log_concave_decreasing([1e-3, 1e-7])


def test_recursion_constants_formula():
    c = KAMConstants(1.0, 0.5)
    trace = KAMTrace(rows=[{"N_k": 2.0, "m_norm": 0.1, "beta_norm": 1.0},
                           {"N_k": 2.0 ** 1.5, "m_norm": 0.01, "beta_norm": 0.1}])
    expected = 0.01 / (2.0 ** 6 * 0.01 + 2.0 ** -20 * 1.0)
    assert recursion_constants(trace, c)[0] == pytest.approx(expected)


def test_desk_reduction(desk_result):
    cfg, result = desk_result
    rep = result.report
    k = rep["stages"]["kam"]
    assert k["log_concave_decreasing"] and k["recursion_holds"]
    assert rep["spectrum"]["max_real_part"] <= 1e-8
    assert rep["stages"]["cantor"]["ok"] and not rep["stages"]["cantor"]["inclusion_counterexamples"]
    for row in k["trace"][:-1]:
        assert row["homological_residual"] <= 1e-12
        assert row["dlambda_bound_ok"]
        assert row["structure_X"]["reversibility_preserving"]
    V = result.artifacts["V_inf"]
    S = neumann_inverse(V - QPOperator.identity(V.spec))
    assert m_norm(S) < 1e-2


def test_final_check_and_serialization(desk_result):
    cfg, result = desk_result
    sp = result.artifacts["spectrum"]
    ok, margin, where, bad = final_cantor_check(sp, cfg.parameters.omega, cfg.gamma, 3.0, 8,
                                                result.artifacts["trace"])
    assert ok and margin > 0 and bad == []
    bumped = sp.shifted(np.where(sp.modes[:, 0] == 1, 1j * (cfg.parameters.omega[0] - sp.lam[sp.modes[:, 0] == 1].imag + sp.lam[sp.modes[:, 0] == 0].imag), 0))
    ok, margin, where, _ = final_cantor_check(bumped, cfg.parameters.omega, cfg.gamma, 3.0, 8)
    assert not ok and where[1:] in (((1,), (0,)), ((0,), (1,)))
    data = json.loads(sp.to_json())
    assert set(data["modes"]) == {str(j) for j in range(-16, 17)}
    lines = result.artifacts["trace"].to_csv().splitlines()
    assert lines[0].split(",") == list(KAMTrace.columns)
    assert len(lines) == len(result.artifacts["trace"].rows) + 1

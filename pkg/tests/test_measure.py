import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from qpreduce.config import parse_config
from qpreduce.measure import (classify, diophantine_margins, excluded_fraction, lipschitz_probe,
                              melnikov_margins, sample_parameters, scan_radius, spot_indices, wilson_interval)
from qpreduce.pipeline import run_measure, spectrum_model


def free_model(J):
    modes = np.arange(-J, J + 1)[:, None]

    def model(omega, nu):
        return nu, 1j * nu @ modes.T.astype(float), modes, np.zeros(len(omega), bool)

    return model


def loop_margins(w, v, tau, R, J):
    mu_d = min(abs(w * l + v * k) * (1 + l * l + k * k) ** (tau / 2)
               for l in range(-R, R + 1) for k in range(-R, R + 1) if (l, k) != (0, 0))
    mu_f = np.inf
    for l in range(-R, R + 1):
        for j in range(-J, J + 1):
            for jp in range(-J, J + 1):
                if l == 0 and j == jp:
                    continue
                w8 = ((1 + l * l) * (1 + j * j) * (1 + jp * jp)) ** (tau / 2)
                mu_f = min(mu_f, abs(w * l + v * (j - jp)) * w8)
    return mu_d, mu_f


def test_margins_against_loops():
    pts = sample_parameters(7, 6)
    R, J, tau = 6, 4, 2.0
    res = excluded_fraction(pts, 1, [0.2, 0.05], tau, free_model(J), radius=R)
    for i, (w, v) in enumerate(pts):
        mu_d, mu_f = loop_margins(w, v, tau, R, J)
        assert res.margins["diophantine"][i] == pytest.approx(mu_d, rel=1e-12)
        assert res.margins["final"][i] == pytest.approx(mu_f, rel=1e-12)


def test_sampling_is_deterministic_and_uniform():
    a = sample_parameters(11, 4000, 1, 1)
    assert np.array_equal(a, sample_parameters(11, 4000, 1, 1))
    assert not np.array_equal(a, sample_parameters(12, 4000, 1, 1))
    assert a.min() >= 1 and a.max() < 2
    assert np.allclose(a.mean(axis=0), 1.5, atol=0.02)
    assert sample_parameters(0, 3, 2, 2).shape == (3, 4)


def test_wilson_interval_closed_form():
    k, n = 37, 400
    z = norm.ppf(0.975)
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    lo, hi = wilson_interval(k, n)
    assert lo == pytest.approx(centre - half, rel=1e-9)
    assert hi == pytest.approx(centre + half, rel=1e-9)
    assert wilson_interval(0, 0) == (0.0, 1.0)


@given(st.integers(0, 1000))
def test_exclusion_nests_in_gamma(seed):
    pts = sample_parameters(seed, 50)
    gammas = [0.3, 0.2, 0.1, 0.05]
    res = excluded_fraction(pts, 1, gammas, 2.0, free_model(4), radius=10)
    assert all(a >= b for a, b in zip(res.excluded, res.excluded[1:]))
    for i, g in enumerate(gammas):
        lo, hi = res.intervals[i]
        assert lo <= res.fractions[i] <= hi


def test_classify_counts_failures_once():
    out = classify([0.01, 1.0, 1.0], [1.0, 0.01, 1.0], [0.05], failed=[False, False, True])
    assert out == [(3, 1, 1, 1)]


def test_tau_guard_and_radius():
    with pytest.raises(ValueError):
        excluded_fraction(sample_parameters(0, 5), 1, [0.1], 1.0, free_model(2))
    assert scan_radius([0.2, 0.025], 2.0) == 32
    assert scan_radius([1e-4], 2.0) == 200


def test_shared_spectrum_broadcasts():
    omega = np.array([[1.3], [1.6]])
    lam = 1j * np.arange(-2, 3)[None, :] * 1.7
    m = melnikov_margins(omega, lam, np.arange(-2, 3)[:, None], 2.0, 3)
    assert m.shape == (2,)
    assert diophantine_margins(omega, np.array([[1.7], [1.7]]), 2.0, 3).shape == (2,)


def test_spot_indices_deterministic():
    a = spot_indices(100, 0.1, 5)
    assert len(a) == 10 and np.array_equal(a, spot_indices(100, 0.1, 5))
    assert len(spot_indices(100, 0.0, 5)) == 0


def test_run_measure_with_spot_check():
    cfg = parse_config("lattice: {J: 8, L: 4}\nmeasure: {samples: 40, spot_fraction: 0.1}\n"
                       "kam: {stop_tol: 1.0e-30}\nseed: 3\n")
    res = run_measure(cfg)
    assert res.samples == 40 and res.spot["points"] == 4
    assert 0 <= res.spot["fraction"] <= 1
    assert res.to_csv().splitlines()[0].startswith("gamma,samples,excluded_count,fraction")
    again = run_measure(cfg)
    assert again.to_csv() == res.to_csv()


def test_lipschitz_probe_at_zero_eps_and_resonance():
    cfg = parse_config("lattice: {J: 8, L: 4}\nparameters: {eps: 0.0}\n")
    model = spectrum_model(cfg)
    probe = lipschitz_probe(model, [1.3247, 1.7548], 1e-6, 1, 8.0)
    assert probe["tag"] == "ok"
    assert np.allclose(probe["nu0_jacobian"], [[0.0], [1.0]], atol=1e-8)
    assert max(probe["z"]) == 0 and max(probe["rho_weighted"]) == 0
    cfg = parse_config("lattice: {J: 8, L: 4}\n")
    assert lipschitz_probe(spectrum_model(cfg), [1.5, 1.5], 1e-6, 1, 8.0)["tag"] == "exit"


def test_lipschitz_quotients_scale_with_eps():
    quotients = []
    for eps in (1e-4, 1e-3):
        cfg = parse_config(f"lattice: {{J: 8, L: 4}}\nparameters: {{eps: {eps}}}\nkam: {{stop_tol: 1.0e-30}}\n")
        probe = lipschitz_probe(spectrum_model(cfg), [1.3247, 1.7548], 1e-5, 1, 2.0)
        assert probe["tag"] == "ok"
        quotients.append(max(probe["z"]))
    # eps <W> does not move with (omega, nu), so z varies at order eps^2
    assert 30 < quotients[1] / quotients[0] < 300

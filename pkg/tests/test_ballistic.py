import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import gambler_solve
from rwre.ballistic import (M0, annealed_green_drift, companion_hitting_time_exact,
                            companion_hitting_time_mc, coupled_rescaled_runs, default_L,
                            gambler_exit_left, gambler_exit_left_alt, gambler_exit_left_solve,
                            gambler_upper_bound, p_plus_minus, polynomial_condition_probe,
                            t_gamma_probe)
from rwre.environment import (HomogeneousEnvironment, ParameterError, build_two_point_law,
                              check_condition, law_lambda, point_mass_law, ssrw_law)
from rwre.green import expected_exit_time, symmetric_slab
from rwre.lattice import make_box

STRONG = point_mass_law(2, 0.9, [1 / 8, -1 / 8, 0, 0])  # omega(+-e1) = 0.3625, 0.1375
LD3 = build_two_point_law(3, 0.15, 0.0225, seed=11)


def test_gambler_examples():
    assert gambler_exit_left(2, 3, 0.5) == pytest.approx(0.6, abs=1e-15)
    assert gambler_exit_left(2, 3, 0.6) == pytest.approx(float(Fraction(76, 211)), abs=1e-14)
    assert gambler_exit_left(2, 3, 0.6) == pytest.approx(gambler_solve(2, 3, 0.6), abs=1e-14)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_gambler_rejects_degenerate(p):
    with pytest.raises(ParameterError):
        gambler_exit_left(2, 3, p)


def test_gambler_forms_and_solve_agree_on_grid():
    for a in range(1, 21):
        for b in range(1, 21):
            for p in np.arange(1, 10) / 10:
                v = gambler_exit_left(a, b, p)
                assert abs(v - gambler_exit_left_alt(a, b, p)) <= 1e-14
                assert abs(v - gambler_exit_left_solve(a, b, p)) <= 1e-12
                if p > 0.5:
                    assert v <= gambler_upper_bound(a, b, p) + 1e-15


@given(st.integers(1, 10), st.integers(1, 10), st.floats(0.3, 0.9))
def test_gambler_monotonicity(a, b, p):
    v = gambler_exit_left(a, b, p)
    assert gambler_exit_left(a, b, p + 0.05) < v
    assert gambler_exit_left(a + 1, b, p) < v
    assert gambler_exit_left(a, b + 1, p) > v


def test_probe_passes_for_strong_drift():
    rep = polynomial_condition_probe(STRONG, 8, 2, 2000, n_starts=6, seed=1)
    assert rep.verdict == "pass"
    assert rep.below_M0 and rep.M0 == pytest.approx(M0(2))


def test_probe_fails_for_ssrw():
    rep = polynomial_condition_probe(ssrw_law(2), 4, 1, 400, n_starts=4)
    assert rep.verdict == "fail"
    assert rep.to_dict()["M0"] > 1e40


def test_probe_rejects_odd_M():
    with pytest.raises(ParameterError):
        polynomial_condition_probe(STRONG, 5, 1, 10)


def test_tgamma_homogeneous_supports():
    rep = t_gamma_probe(STRONG, 1.0, [2, 3, 4, 5], 4000, seed=2)
    assert rep.slope > 0 and rep.verdict == "supports"


def test_tgamma_ssrw_flat():
    rep = t_gamma_probe(ssrw_law(2), 1.0, [2, 4, 6], 2000, seed=3)
    assert rep.verdict != "supports"
    assert abs(rep.slope) < 0.1


def test_tgamma_censoring_forced():
    rep = t_gamma_probe(STRONG, 1.0, [1, 8, 16], 50, seed=0)
    assert rep.censored[-1] and rep.censored[-2]
    assert rep.verdict == "insufficient"
    with pytest.raises(ParameterError):
        t_gamma_probe(STRONG, 1.0, [4, 2, 8], 10)


def test_annealed_green_drift_ssrw_zero():
    est = annealed_green_drift(ssrw_law(2), 4, 3)
    assert est.mean == 0.0 and est.stderr == 0.0


def test_annealed_green_drift_homogeneous_linearity():
    L = 5
    est = annealed_green_drift(STRONG, L, 2)
    slab = symmetric_slab(np.zeros(2, dtype=np.int64), L, 2 * L)
    t = expected_exit_time(HomogeneousEnvironment(STRONG.omega_atoms[0]), slab, [0, 0])
    assert est.mean == pytest.approx(law_lambda(STRONG) * t, rel=1e-10)


def test_annealed_green_drift_ld_lower_bound():
    assert check_condition(LD3, "LD", eta=0.5).holds
    L = default_L(0.5, LD3.epsilon)
    est = annealed_green_drift(LD3, L, 12)
    assert est.mean >= 0.4 * 3 * law_lambda(LD3) * L**2 - 4 * est.stderr


def test_p_plus_minus_ssrw_and_clamping():
    pm = p_plus_minus(ssrw_law(2, 0.1), n_envs=1, L=4)
    assert pm.p_minus <= 0.5 <= pm.p_plus
    cl = p_plus_minus(ssrw_law(2, 0.1), n_envs=1, L=4, exponent=-10)
    assert cl.p_minus == 0.0 and cl.p_plus == 1.0


def test_p_plus_ld_positive():
    pm = p_plus_minus(LD3, n_envs=4)
    assert pm.two_p_minus_1[1] > 0
    assert pm.L == default_L(0.5, LD3.epsilon)


def test_coupling_p_zero_never_right():
    env = HomogeneousEnvironment(STRONG.omega_atoms[0])
    box = make_box(8, [0, 0], site_budget=None)
    runs = coupled_rescaled_runs(env, box, [[0, 0]] * 5, 0.0, np.arange(5), 2,
                                 phat_exact=lambda x: 0.75)
    for r in runs:
        assert not any(r.c_right) and r.violations == 0 and r.dominated


def test_coupling_at_exact_phat_matches_gambler():
    omega = np.array([0.3, 0.2, 0.25, 0.25])
    env = HomogeneousEnvironment(omega)
    p = 0.6  # projected e1 walk
    L = 2
    ph = 1 - gambler_exit_left(L, L, p)
    box = make_box(40, [0, 0], site_budget=None)
    n = 1500
    runs = coupled_rescaled_runs(env, box, np.zeros((n, 2), dtype=np.int64), ph, np.arange(n),
                                 L, phat_exact=lambda x: ph, max_jumps=200)
    left = 0
    for r in runs:
        assert r.c_right == r.y_right
        c = np.array(r.companion)
        assert np.all(np.abs(np.diff([y[0] for y in r.Y])) == L)
        hit = np.flatnonzero((c <= -2) | (c >= 3))
        assert hit.size
        left += int(c[hit[0]] <= -2)
    exact = gambler_exit_left(2, 3, ph)
    se = math.sqrt(exact * (1 - exact) / n)
    assert abs(left / n - exact) <= 3 * se


def test_companion_hitting_time():
    p, N = 0.7, 20
    exact = companion_hitting_time_exact(p, N // 2)
    assert exact == pytest.approx((N / 2) / (2 * p - 1), rel=1e-10)
    mc = companion_hitting_time_mc(p, N // 2, 20000, seed=4)
    assert abs(mc.mean - exact) <= 3 * mc.stderr
    with pytest.raises(ParameterError):
        companion_hitting_time_exact(0.5, 3)


def test_default_L():
    assert default_L(0.5, 0.05) == 20
    with pytest.raises(ParameterError):
        default_L(0.1, 0.5)
